#ifndef DENSERL_LEXICON_HPP_
#define DENSERL_LEXICON_HPP_

#include <string>
#include <utility>
#include <vector>

namespace denserl {

/// Signed word/phrase table. Scanning is case-insensitive, word-aligned,
/// longest-phrase-first, and emits one non-overlapping hit per occurrence,
/// so equal inputs give equal outputs everywhere.
class Lexicon {
 public:
  struct Hit {
    int char_start = 0;
    int char_end = 0;
    double value = 0.0;
  };

  Lexicon() = default;
  explicit Lexicon(std::vector<std::pair<std::string, double>> entries);

  /// One entry per line: phrase<TAB>value.
  static Lexicon load(const std::string& path);

  std::vector<Hit> scan(const std::string& text) const;

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::vector<std::string> words;  // lowercased
    std::string phrase;
    double value = 0.0;
  };
  std::vector<Entry> entries_;  // sorted longest first
};

}  // namespace denserl

#endif  // DENSERL_LEXICON_HPP_
