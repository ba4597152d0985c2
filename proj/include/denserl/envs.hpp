#ifndef DENSERL_ENVS_HPP_
#define DENSERL_ENVS_HPP_

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "denserl/core.hpp"
#include "denserl/lexicon.hpp"

namespace denserl {

/// A sampled episode start: prompt tokens plus, for reference-based tasks,
/// the reference text attached to the prompt.
struct PromptSample {
  std::vector<TokenId> prompt;
  std::string reference;
};

/// Supplies prompts and scores complete generations with a holistic scalar.
/// Scoring is a pure function of its text inputs.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual const std::string& name() const = 0;
  virtual PromptSample reset(std::mt19937_64& rng) const = 0;
  virtual double score(const std::string& generated_text, const PromptSample& sample) const = 0;
  /// Training-time prompt filter applied while loading the pool.
  virtual bool accept_prompt(const std::string& line) const;
};

struct EnvConfig {
  std::string env_name;        // sentiment | toxicity | overlap | substring
  std::string pool_path;
  std::string lexicon_path;    // sentiment and toxicity scoring lexicon
  std::string target_bigram;   // substring task, e.g. "red door"
  int min_prompt_tokens = 4;
  int max_prompt_tokens = 10;
  bool filter_prompts = false;  // toxicity: keep only prompts with a toxic hit
};

std::unique_ptr<Environment> make_environment(const EnvConfig& config, const Vocabulary& vocab);

/// Unigram multiset F1 between two texts. Both empty -> 1, one empty -> 0.
double unigram_f1(const std::string& text, const std::string& reference);

}  // namespace denserl

#endif  // DENSERL_ENVS_HPP_
