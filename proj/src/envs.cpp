#include "denserl/envs.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <unordered_map>

namespace denserl {

namespace {

std::string lowercase(const std::string& s) {
  std::string out(s.size(), '\0');
  std::transform(s.begin(), s.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> lowercase_words(const std::string& text) {
  std::vector<std::string> words;
  for (const auto& [start, end] : split_words(text)) {
    words.push_back(lowercase(text.substr(static_cast<std::size_t>(start),
                                          static_cast<std::size_t>(end - start))));
  }
  return words;
}

double uniform_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

bool Environment::accept_prompt(const std::string&) const { return true; }

double unigram_f1(const std::string& text, const std::string& reference) {
  const auto a = lowercase_words(text);
  const auto b = lowercase_words(reference);
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;

  std::unordered_map<std::string, int> counts;
  for (const auto& w : b) ++counts[w];
  int overlap = 0;
  for (const auto& w : a) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(a.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(b.size());
  return 2.0 * precision * recall / (precision + recall);
}

namespace {

// Pool-backed base: prompts are pool lines truncated to a uniform length in
// [min_prompt_tokens, max_prompt_tokens].
class PoolEnvironment : public Environment {
 public:
  PoolEnvironment(std::string name, const Vocabulary& vocab, const EnvConfig& config,
                  bool tab_separated_reference)
      : name_(std::move(name)),
        vocab_(vocab),
        min_len_(config.min_prompt_tokens),
        max_len_(config.max_prompt_tokens),
        tab_reference_(tab_separated_reference),
        pool_path_(config.pool_path) {
    if (min_len_ < 1 || max_len_ < min_len_) {
      throw ConfigError("require 1 <= min_prompt_tokens <= max_prompt_tokens");
    }
  }

  const std::string& name() const override { return name_; }

  PromptSample reset(std::mt19937_64& rng) const override {
    if (pool_.empty()) throw ConfigError("prompt pool is empty: " + pool_path_);
    const auto idx = std::min(pool_.size() - 1,
                              static_cast<std::size_t>(uniform_unit(rng) * static_cast<double>(pool_.size())));
    const auto& [prompt_text, reference] = pool_[idx];

    std::vector<TokenId> tokens = tokenize(prompt_text, vocab_);
    const int span = max_len_ - min_len_ + 1;
    const int want = min_len_ + static_cast<int>(uniform_unit(rng) * span);
    const std::size_t keep = std::max<std::size_t>(
        1, std::min(tokens.size(), static_cast<std::size_t>(std::min(want, max_len_))));
    tokens.resize(keep);
    return {std::move(tokens), reference};
  }

 protected:
  // Derived constructors call this once their filtering state is in place.
  void load_pool() {
    std::ifstream in(pool_path_);
    if (!in) throw ConfigError("cannot open prompt pool: " + pool_path_);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      if (!accept_prompt(line)) continue;

      std::string prompt = line;
      std::string reference;
      if (tab_reference_) {
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
          throw ConfigError("pool line lacks a tab-separated reference: " + pool_path_);
        }
        prompt = line.substr(0, tab);
        reference = line.substr(tab + 1);
      }
      if (tokenize(prompt, vocab_).empty()) continue;
      pool_.emplace_back(std::move(prompt), std::move(reference));
    }
    if (pool_.empty()) throw ConfigError("prompt pool has no usable lines: " + pool_path_);
  }

  std::string name_;
  const Vocabulary& vocab_;
  int min_len_;
  int max_len_;
  bool tab_reference_;
  std::string pool_path_;
  std::vector<std::pair<std::string, std::string>> pool_;
};

class SentimentEnv : public PoolEnvironment {
 public:
  SentimentEnv(const Vocabulary& vocab, const EnvConfig& config)
      : PoolEnvironment("sentiment", vocab, config, false),
        lexicon_(Lexicon::load(config.lexicon_path)) {
    load_pool();
  }

  // Signed lexicon hit count, unbounded like a classifier logit.
  double score(const std::string& text, const PromptSample&) const override {
    double s = 0.0;
    for (const auto& hit : lexicon_.scan(text)) s += hit.value > 0 ? 1.0 : -1.0;
    return s;
  }

 private:
  Lexicon lexicon_;
};

class ToxicityEnv : public PoolEnvironment {
 public:
  ToxicityEnv(const Vocabulary& vocab, const EnvConfig& config)
      : PoolEnvironment("toxicity", vocab, config, false),
        lexicon_(Lexicon::load(config.lexicon_path)),
        filter_prompts_(config.filter_prompts) {
    load_pool();
  }

  // 1 - toxic hits per generated token, clamped to [0, 1]; empty text is
  // fully non-toxic.
  double score(const std::string& text, const PromptSample&) const override {
    const auto words = split_words(text);
    if (words.empty()) return 1.0;
    const double hits = static_cast<double>(lexicon_.scan(text).size());
    return std::clamp(1.0 - hits / static_cast<double>(words.size()), 0.0, 1.0);
  }

  bool accept_prompt(const std::string& line) const override {
    if (!filter_prompts_) return true;
    return !lexicon_.scan(line).empty();
  }

 private:
  Lexicon lexicon_;
  bool filter_prompts_;
};

class OverlapEnv : public PoolEnvironment {
 public:
  OverlapEnv(const Vocabulary& vocab, const EnvConfig& config)
      : PoolEnvironment("overlap", vocab, config, true) {
    load_pool();
  }

  double score(const std::string& text, const PromptSample& sample) const override {
    return unigram_f1(text, sample.reference);
  }
};

class SubstringEnv : public PoolEnvironment {
 public:
  SubstringEnv(const Vocabulary& vocab, const EnvConfig& config)
      : PoolEnvironment("substring", vocab, config, false) {
    const auto words = lowercase_words(config.target_bigram);
    if (words.size() != 2) {
      throw ConfigError("substring environment needs a two-word target bigram, got: '" +
                        config.target_bigram + "'");
    }
    first_ = words[0];
    second_ = words[1];
    load_pool();
  }

  double score(const std::string& text, const PromptSample&) const override {
    const auto words = lowercase_words(text);
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
      if (words[i] == first_ && words[i + 1] == second_) return 1.0;
    }
    return 0.0;
  }

 private:
  std::string first_;
  std::string second_;
};

}  // namespace

std::unique_ptr<Environment> make_environment(const EnvConfig& config, const Vocabulary& vocab) {
  if (config.env_name == "sentiment") return std::make_unique<SentimentEnv>(vocab, config);
  if (config.env_name == "toxicity") return std::make_unique<ToxicityEnv>(vocab, config);
  if (config.env_name == "overlap") return std::make_unique<OverlapEnv>(vocab, config);
  if (config.env_name == "substring") return std::make_unique<SubstringEnv>(vocab, config);
  throw ConfigError("unknown environment: " + config.env_name);
}

}  // namespace denserl
