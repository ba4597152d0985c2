#include "denserl/core.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace denserl {

Vocabulary::Vocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty()) throw ConfigError("vocabulary must contain at least the UNK symbol");
  index_.reserve(symbols_.size());
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) {
      throw ConfigError("vocabulary symbol " + std::to_string(i) + " is empty");
    }
    auto [it, inserted] = index_.emplace(symbols_[i], static_cast<TokenId>(i));
    if (!inserted) throw ConfigError("duplicate vocabulary symbol: " + symbols_[i]);
  }
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vocabulary file: " + path);
  std::vector<std::string> symbols;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    symbols.push_back(line);
  }
  return Vocabulary(std::move(symbols));
}

const std::string& Vocabulary::symbol(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw ShapeError("token index " + std::to_string(id) + " out of range for vocabulary of size " +
                     std::to_string(symbols_.size()));
  }
  return symbols_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::index(const std::string& symbol) const {
  auto it = index_.find(symbol);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& symbol) const {
  return index_.find(symbol) != index_.end();
}

std::vector<std::pair<int, int>> split_words(const std::string& text) {
  std::vector<std::pair<int, int>> words;
  const int n = static_cast<int>(text.size());
  int i = 0;
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= n) break;
    int start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    words.emplace_back(start, i);
  }
  return words;
}

std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<TokenId> tokens;
  for (const auto& [start, end] : split_words(text)) {
    tokens.push_back(vocab.index(text.substr(start, end - start)));
  }
  return tokens;
}

Detokenized detokenize(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  Detokenized out;
  out.offsets.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& sym = vocab.symbol(tokens[i]);  // throws on bad index
    if (i > 0) out.text.push_back(' ');
    int start = static_cast<int>(out.text.size());
    out.text += sym;
    out.offsets.emplace_back(start, static_cast<int>(out.text.size()));
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x51ed2701u));
}

}  // namespace denserl
