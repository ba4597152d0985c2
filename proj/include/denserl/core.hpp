#ifndef DENSERL_CORE_HPP_
#define DENSERL_CORE_HPP_

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace denserl {

using TokenId = std::int32_t;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Word-level vocabulary. Index 0 is always the UNK symbol; unknown words
/// map to it instead of failing.
class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;

  explicit Vocabulary(std::vector<std::string> symbols);

  /// One symbol per line, line 0 reserved for UNK.
  static Vocabulary load(const std::string& path);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const;
  TokenId index(const std::string& symbol) const;  // kUnk if absent
  bool contains(const std::string& symbol) const;

  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// MDP types
// ---------------------------------------------------------------------------

/// State at decoding step t: the prompt plus the t tokens generated so far.
struct EpisodeState {
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;
  bool done = false;

  std::size_t step() const { return generated.size(); }
};

struct Transition {
  EpisodeState state;
  TokenId action = 0;
  EpisodeState next_state;
  double log_prob = 0.0;
  double value = 0.0;
};

/// Per-token reward bookkeeping for one trajectory. `combined` is the
/// weighted sum alpha1 * extrinsic + alpha2 * intrinsic with the extrinsic
/// mass placed only at the final index.
struct RewardVector {
  std::vector<double> intrinsic;  // length T
  double extrinsic = 0.0;         // scalar, applies at index T-1
  std::vector<double> combined;   // length T

  std::size_t size() const { return combined.size(); }
};

struct Trajectory {
  std::vector<Transition> transitions;
  RewardVector rewards;
  double terminal_value = 0.0;  // bootstrap V(s_{T+1}); zero once done

  std::size_t length() const { return transitions.size(); }
};

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Whitespace-split words mapped to vocabulary indices; unknown words map
/// to kUnk.
std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab);

struct Detokenized {
  std::string text;
  // Half-open [start, end) character ranges into `text`, one per token.
  std::vector<std::pair<int, int>> offsets;
};

/// Joins symbols with single spaces and reports per-token character offsets
/// for span alignment. Throws ShapeError on out-of-range indices.
Detokenized detokenize(const std::vector<TokenId>& tokens, const Vocabulary& vocab);

/// Whitespace word split with [start, end) character offsets into `text`.
std::vector<std::pair<int, int>> split_words(const std::string& text);

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x);

/// Stable per-episode seed derived from the run seed and an episode index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace denserl

#endif  // DENSERL_CORE_HPP_
