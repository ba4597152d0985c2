#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "denserl/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

int run_train(const std::string& config_path, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> file_values;
  if (!config_path.empty()) file_values = denserl::parse_config_file(config_path);
  const denserl::RunConfig config = denserl::make_run_config(file_values, overrides);

  const denserl::TrainResult result = denserl::train(config);
  const auto& last = result.curve.back();
  std::cout << "updates: " << result.curve.size() << "\n"
            << "final mean_reward: " << last.mean_reward << "\n"
            << "final mean_extrinsic: " << last.mean_extrinsic << "\n"
            << "critic calls: " << result.critic_stats.calls
            << " (cache hits " << result.critic_stats.cache_hits
            << ", failures " << result.critic_failures << ")\n"
            << "curve: " << result.curve_path << "\n"
            << "checkpoint: " << result.checkpoint_path << "\n";
  return kExitOk;
}

int run_eval(const std::string& checkpoint_path, denserl::EnvConfig env_config,
             const std::string& prompts_path, const denserl::SamplerConfig& sampler, int k,
             double threshold, std::uint64_t seed, const std::string& out_path) {
  const denserl::Checkpoint ckpt = denserl::load_checkpoint(checkpoint_path);
  const denserl::Vocabulary vocab(ckpt.vocab_symbols);
  const auto env = denserl::make_environment(env_config, vocab);

  std::ifstream in(prompts_path);
  if (!in) throw denserl::ConfigError("cannot open prompts file: " + prompts_path);
  std::vector<std::string> prompts;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) prompts.push_back(line);
  }

  const denserl::EvalReport report = denserl::evaluate(
      ckpt.params, ckpt.ref_params, vocab, *env, prompts, sampler, k, threshold, seed);
  const std::string json = report.to_json();
  if (out_path.empty()) {
    std::cout << json << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw denserl::ConfigError("cannot write report: " + out_path);
    out << json << "\n";
    std::cout << "report: " << out_path << "\n";
  }
  return kExitOk;
}

int run_compare(const std::vector<std::string>& files, double threshold, int window, long split,
                const std::string& out_path) {
  std::vector<denserl::RunCurve> runs;
  runs.reserve(files.size());
  for (const std::string& f : files) runs.push_back(denserl::read_curve_csv(f));

  std::optional<std::size_t> split_opt;
  if (split > 0) split_opt = static_cast<std::size_t>(split);
  const denserl::ComparisonReport report = denserl::compare_runs(runs, threshold, window, split_opt);
  const std::string json = report.to_json();
  if (out_path.empty()) {
    std::cout << json << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw denserl::ConfigError("cannot write report: " + out_path);
    out << json << "\n";
    std::cout << "report: " << out_path << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense-reward PPO engine for token-level text generation"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a policy from a flat key-value config");
  std::string config_path;
  train_cmd->add_option("--config", config_path, "config file (key = value lines)");
  std::map<std::string, std::string> staged;
  for (const std::string& key : denserl::run_config_keys()) {
    staged[key] = {};
    train_cmd->add_option("--" + key, staged[key], "override config key '" + key + "'");
  }

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on an environment");
  std::string checkpoint_path;
  std::string prompts_path;
  std::string eval_out;
  denserl::EnvConfig env_config;
  denserl::SamplerConfig sampler;
  int k = 25;
  double threshold = 0.5;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval_cmd->add_option("--env", env_config.env_name, "environment name")->required();
  eval_cmd->add_option("--prompts", prompts_path, "evaluation prompt file")->required();
  eval_cmd->add_option("--lexicon", env_config.lexicon_path, "scoring lexicon (sentiment/toxicity)");
  eval_cmd->add_option("--target", env_config.target_bigram, "target bigram (substring)");
  eval_cmd->add_option("--k", k, "continuations per prompt");
  eval_cmd->add_option("--threshold", threshold, "score threshold for frac_above_threshold");
  eval_cmd->add_option("--seed", eval_seed, "sampling seed");
  eval_cmd->add_option("--temperature", sampler.temperature, "sampling temperature");
  eval_cmd->add_option("--top_p", sampler.top_p, "nucleus mass");
  eval_cmd->add_option("--min_new_tokens", sampler.min_new_tokens, "minimum generated tokens");
  eval_cmd->add_option("--max_new_tokens", sampler.max_new_tokens, "maximum generated tokens");
  eval_cmd->add_option("--out", eval_out, "write the JSON report here instead of stdout");

  // compare
  auto* compare_cmd = app.add_subcommand("compare", "compare learning curves");
  std::vector<std::string> curve_files;
  double cmp_threshold = 0.9;
  int cmp_window = 10;
  long cmp_split = 0;
  std::string cmp_out;
  compare_cmd->add_option("files", curve_files, "curve CSV files")->required()->expected(-2);
  compare_cmd->add_option("--threshold", cmp_threshold, "steps-to-threshold level");
  compare_cmd->add_option("--window", cmp_window, "moving-average window");
  compare_cmd->add_option("--split", cmp_split,
                          "size of the first sign-test group (default: half the files)");
  compare_cmd->add_option("--out", cmp_out, "write the JSON report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) {
      std::map<std::string, std::string> overrides;
      for (const auto& [key, value] : staged) {
        if (train_cmd->count("--" + key) > 0) overrides[key] = value;
      }
      return run_train(config_path, overrides);
    }
    if (eval_cmd->parsed()) {
      return run_eval(checkpoint_path, env_config, prompts_path, sampler, k, threshold, eval_seed,
                      eval_out);
    }
    if (compare_cmd->parsed()) {
      return run_compare(curve_files, cmp_threshold, cmp_window, cmp_split, cmp_out);
    }
  } catch (const denserl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const denserl::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    std::ofstream dump("diagnostics.txt");
    dump << "numerical abort\n" << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
