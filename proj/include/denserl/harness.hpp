#ifndef DENSERL_HARNESS_HPP_
#define DENSERL_HARNESS_HPP_

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denserl/core.hpp"
#include "denserl/critic.hpp"
#include "denserl/envs.hpp"
#include "denserl/policy.hpp"
#include "denserl/rlcore.hpp"

namespace denserl {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  TrainConfig train;
  SamplerConfig sampler;
  EnvConfig env;

  std::string vocab_path;
  std::string stop_token_symbol;  // resolved against the vocabulary; "" = none

  // critic wiring
  std::string critic_backend = "lexicon";  // lexicon | remote | scripted | self
  std::string critic_lexicon_path;
  std::string transcript_path;  // scripted/self transcripts, entries split by "---" lines
  RemoteConfig remote;
  std::string labels_preset;                   // "" = per-environment default
  std::optional<bool> send_reward_to_critic;   // unset = per-environment default
  std::string task_description_override;

  // run shape
  long total_episodes = 64;
  int batch_size = 8;
  int eval_every = 0;
  std::string eval_prompts_path;
  int eval_k = 25;
  double eval_threshold = 0.5;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int rollout_threads = 1;
  int moving_average_window = 10;

  // policy shape
  int window = 4;
  int embed_dim = 16;
  int hidden_dim = 32;

  /// Applies one flat config key; throws ConfigError on unknown keys or bad
  /// values.
  void apply(const std::string& key, const std::string& value);
  void validate() const;

  bool uses_intrinsic() const {
    return train.ablation != Ablation::kExtrinsicOnly && train.alpha2 != 0.0;
  }
};

/// Flat `key = value` file with '#' comments.
std::map<std::string, std::string> parse_config_file(const std::string& path);

RunConfig make_run_config(const std::map<std::string, std::string>& file_values,
                          const std::map<std::string, std::string>& overrides);

/// The documented flat-config key set (one CLI flag per key).
const std::vector<std::string>& run_config_keys();

// ---------------------------------------------------------------------------
// Critique prompt presets
// ---------------------------------------------------------------------------

struct CritiquePromptPreset {
  std::string task_description;
  std::vector<std::string> steps;
  std::vector<std::pair<std::string, std::vector<SpanAnnotation>>> few_shot_examples;
  LabelTable labels;
  bool send_reward = false;
};

CritiquePromptPreset critique_preset_for(const std::string& env_name);

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

struct CurvePoint {
  int step = 0;
  double mean_reward = 0.0;
  double mean_extrinsic = 0.0;
  double mean_intrinsic = 0.0;
  double mean_kl = 0.0;
  long discarded_spans = 0;
};

inline constexpr const char* kCurveHeader =
    "step,mean_reward,mean_extrinsic,mean_intrinsic,mean_kl,discarded_spans";

struct RunCurve {
  std::string path;
  std::vector<CurvePoint> points;
  bool nondeterministic = false;
};

RunCurve read_curve_csv(const std::string& path);
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points,
                     bool nondeterministic);

/// Trailing moving average over mean_reward; the first window-1 points
/// average the available prefix. Other fields pass through unchanged.
std::vector<CurvePoint> smooth_curve(const std::vector<CurvePoint>& points, int window);

/// First step whose smoothed mean_reward reaches the threshold.
std::optional<int> steps_to_threshold(const std::vector<CurvePoint>& points, double threshold,
                                      int window);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<CurvePoint> curve;
  std::vector<UpdateStats> update_stats;
  PolicyParams params;
  PolicyParams ref_params;
  CriticStats critic_stats;
  long critic_failures = 0;
  std::string curve_path;
  std::string checkpoint_path;
};

/// Full training loop: rollouts, extrinsic scoring, critique + span
/// alignment, reward combination, PPO updates; one CurvePoint per update.
/// Writes <out>/curve.csv and <out>/checkpoint.bin. Deterministic given the
/// seed for lexicon/scripted critics.
TrainResult train(const RunConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::vector<std::string> vocab_symbols;
  PolicyParams params;
  PolicyParams ref_params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string env;
  int num_prompts = 0;
  int k = 0;
  double mean_score = 0.0;
  double frac_above_threshold = 0.0;
  double distinct2 = 0.0;
  double ref_nll_per_token = 0.0;

  std::string to_json() const;
};

/// Samples k continuations per prompt line and reports the mean extrinsic
/// score, the fraction above the threshold, pooled distinct-2, and the mean
/// per-token negative log-likelihood under the frozen reference policy.
EvalReport evaluate(const PolicyParams& params, const PolicyParams& ref_params,
                    const Vocabulary& vocab, const Environment& env,
                    const std::vector<std::string>& prompt_lines, const SamplerConfig& sampler,
                    int k, double threshold, std::uint64_t seed);

/// Unique bigrams over total bigrams, pooled across token sequences.
double distinct2(const std::vector<std::vector<TokenId>>& sequences);

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

struct ComparisonReport {
  double threshold = 0.0;
  int window = 1;
  std::vector<std::string> paths;
  std::vector<std::optional<int>> run_steps_to_threshold;
  // Smoothed per-step differences of each run against run 0.
  std::vector<std::vector<double>> diffs_vs_first;
  // One-sided sign test pairing run i with run i+split: "group A reaches the
  // threshold in fewer updates than group B".
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double p_value = 1.0;

  std::string to_json() const;
};

/// Requires every curve to share the same step sequence.
ComparisonReport compare_runs(const std::vector<RunCurve>& runs, double threshold, int window,
                              std::optional<std::size_t> split = std::nullopt);

/// One-sided sign-test tail probability P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test_p_value(int wins, int n);

}  // namespace denserl

#endif  // DENSERL_HARNESS_HPP_
