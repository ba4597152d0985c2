#include "denserl/lexicon.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "denserl/core.hpp"

namespace denserl {

namespace {

std::string lowercase(const std::string& s) {
  std::string out(s.size(), '\0');
  std::transform(s.begin(), s.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

Lexicon::Lexicon(std::vector<std::pair<std::string, double>> entries) {
  for (auto& [phrase, value] : entries) {
    Entry e;
    e.phrase = phrase;
    e.value = value;
    for (const auto& [start, end] : split_words(phrase)) {
      e.words.push_back(lowercase(phrase.substr(static_cast<std::size_t>(start),
                                                static_cast<std::size_t>(end - start))));
    }
    if (e.words.empty()) throw ConfigError("empty lexicon phrase");
    entries_.push_back(std::move(e));
  }
  std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
    if (a.words.size() != b.words.size()) return a.words.size() > b.words.size();
    return a.phrase < b.phrase;
  });
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open lexicon file: " + path);
  std::vector<std::pair<std::string, double>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ConfigError("lexicon line " + std::to_string(line_no) + " lacks a tab separator: " + path);
    }
    try {
      entries.emplace_back(line.substr(0, tab), std::stod(line.substr(tab + 1)));
    } catch (const std::exception&) {
      throw ConfigError("bad lexicon value on line " + std::to_string(line_no) + ": " + path);
    }
  }
  return Lexicon(std::move(entries));
}

std::vector<Lexicon::Hit> Lexicon::scan(const std::string& text) const {
  std::vector<Hit> hits;
  if (entries_.empty()) return hits;

  const auto word_spans = split_words(text);
  std::vector<std::string> words;
  words.reserve(word_spans.size());
  for (const auto& [start, end] : word_spans) {
    words.push_back(lowercase(text.substr(static_cast<std::size_t>(start),
                                          static_cast<std::size_t>(end - start))));
  }

  std::size_t i = 0;
  while (i < words.size()) {
    const Entry* match = nullptr;
    for (const Entry& e : entries_) {
      if (e.words.size() > words.size() - i) continue;
      bool ok = true;
      for (std::size_t k = 0; k < e.words.size(); ++k) {
        if (words[i + k] != e.words[k]) {
          ok = false;
          break;
        }
      }
      if (ok) {
        match = &e;
        break;  // entries are sorted longest first
      }
    }
    if (match) {
      const std::size_t last = i + match->words.size() - 1;
      hits.push_back({word_spans[i].first, word_spans[last].second, match->value});
      i += match->words.size();
    } else {
      ++i;
    }
  }
  return hits;
}

}  // namespace denserl
