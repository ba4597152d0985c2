#include "denserl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "json.hpp"

#include "denserl/reward.hpp"

namespace denserl {

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("expected a boolean for '" + key + "', got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number for '" + key + "', got '" + value + "'");
  }
}

long parse_long(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected an integer for '" + key + "', got '" + value + "'");
  }
}

int parse_int(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_long(key, value));
}

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

LabelTable named_label_table(const std::string& name) {
  if (name == "sentiment") return LabelTable::sentiment();
  if (name == "toxicity") return LabelTable::toxicity();
  if (name == "relevance") return LabelTable::relevance();
  throw ConfigError("unknown label preset: " + name);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "env", "prompts", "lexicon", "target", "prompt_min", "prompt_max", "filter_prompts",
      "vocab", "stop_token",
      "critic", "critic_lexicon", "transcript", "critic_url", "critic_api_path", "critic_model",
      "critic_temperature", "critic_timeout", "critic_retries", "critic_backoff",
      "critic_max_concurrent", "labels", "send_reward_to_critic", "task_description",
      "gamma", "lam", "clip_ratio", "clip_value", "ppo_epochs", "minibatch_size",
      "learning_rate", "kl_init", "kl_target", "kl_horizon", "value_loss_coeff", "alpha1",
      "alpha2", "ablation", "freeze_embeddings",
      "temperature", "top_p", "min_new_tokens", "max_new_tokens",
      "total_episodes", "batch_size", "eval_every", "eval_prompts", "eval_k", "eval_threshold",
      "seed", "out", "rollout_threads", "moving_average_window",
      "window", "embed_dim", "hidden_dim",
  };
  return keys;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  // environment
  if (key == "env") env.env_name = value;
  else if (key == "prompts") env.pool_path = value;
  else if (key == "lexicon") env.lexicon_path = value;
  else if (key == "target") env.target_bigram = value;
  else if (key == "prompt_min") env.min_prompt_tokens = parse_int(key, value);
  else if (key == "prompt_max") env.max_prompt_tokens = parse_int(key, value);
  else if (key == "filter_prompts") env.filter_prompts = parse_bool(key, value);
  else if (key == "vocab") vocab_path = value;
  else if (key == "stop_token") stop_token_symbol = value;
  // critic
  else if (key == "critic") critic_backend = value;
  else if (key == "critic_lexicon") critic_lexicon_path = value;
  else if (key == "transcript") transcript_path = value;
  else if (key == "critic_url") remote.base_url = value;
  else if (key == "critic_api_path") remote.path = value;
  else if (key == "critic_model") remote.model = value;
  else if (key == "critic_temperature") remote.temperature = parse_double(key, value);
  else if (key == "critic_timeout") remote.timeout_seconds = parse_double(key, value);
  else if (key == "critic_retries") remote.max_retries = parse_int(key, value);
  else if (key == "critic_backoff") remote.backoff_base_seconds = parse_double(key, value);
  else if (key == "critic_max_concurrent") remote.max_concurrent = parse_int(key, value);
  else if (key == "labels") labels_preset = value;
  else if (key == "send_reward_to_critic") send_reward_to_critic = parse_bool(key, value);
  else if (key == "task_description") task_description_override = value;
  // optimization
  else if (key == "gamma") train.gamma = parse_double(key, value);
  else if (key == "lam") train.lam = parse_double(key, value);
  else if (key == "clip_ratio") train.clip_ratio = parse_double(key, value);
  else if (key == "clip_value") train.clip_value = parse_double(key, value);
  else if (key == "ppo_epochs") train.ppo_epochs = parse_int(key, value);
  else if (key == "minibatch_size") train.minibatch_size = parse_int(key, value);
  else if (key == "learning_rate") train.learning_rate = parse_double(key, value);
  else if (key == "kl_init") train.kl_init = parse_double(key, value);
  else if (key == "kl_target") train.kl_target = parse_double(key, value);
  else if (key == "kl_horizon") train.kl_horizon = parse_int(key, value);
  else if (key == "value_loss_coeff") train.value_loss_coeff = parse_double(key, value);
  else if (key == "alpha1") train.alpha1 = parse_double(key, value);
  else if (key == "alpha2") train.alpha2 = parse_double(key, value);
  else if (key == "ablation") train.ablation = parse_ablation(value);
  else if (key == "freeze_embeddings") train.freeze_embeddings = parse_bool(key, value);
  // sampler
  else if (key == "temperature") sampler.temperature = parse_double(key, value);
  else if (key == "top_p") sampler.top_p = parse_double(key, value);
  else if (key == "min_new_tokens") sampler.min_new_tokens = parse_int(key, value);
  else if (key == "max_new_tokens") sampler.max_new_tokens = parse_int(key, value);
  // run shape
  else if (key == "total_episodes") total_episodes = parse_long(key, value);
  else if (key == "batch_size") batch_size = parse_int(key, value);
  else if (key == "eval_every") eval_every = parse_int(key, value);
  else if (key == "eval_prompts") eval_prompts_path = value;
  else if (key == "eval_k") eval_k = parse_int(key, value);
  else if (key == "eval_threshold") eval_threshold = parse_double(key, value);
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_long(key, value));
  else if (key == "out") out_dir = value;
  else if (key == "rollout_threads") rollout_threads = parse_int(key, value);
  else if (key == "moving_average_window") moving_average_window = parse_int(key, value);
  // policy shape
  else if (key == "window") window = parse_int(key, value);
  else if (key == "embed_dim") embed_dim = parse_int(key, value);
  else if (key == "hidden_dim") hidden_dim = parse_int(key, value);
  else throw ConfigError("unknown config key: " + key);
}

void RunConfig::validate() const {
  train.validate();
  if (vocab_path.empty()) throw ConfigError("missing 'vocab'");
  if (env.env_name.empty()) throw ConfigError("missing 'env'");
  if (env.pool_path.empty()) throw ConfigError("missing 'prompts'");
  if (!(sampler.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (sampler.top_p <= 0.0 || sampler.top_p > 1.0) throw ConfigError("top_p must be in (0, 1]");
  if (sampler.min_new_tokens < 1 || sampler.min_new_tokens > sampler.max_new_tokens) {
    throw ConfigError("require 1 <= min_new_tokens <= max_new_tokens");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (total_episodes < batch_size) throw ConfigError("total_episodes must cover one batch");
  if (eval_k < 1) throw ConfigError("eval_k must be at least 1");
  if (rollout_threads < 1) throw ConfigError("rollout_threads must be at least 1");
  if (moving_average_window < 1) throw ConfigError("moving_average_window must be at least 1");
  if (window < 1 || embed_dim < 1 || hidden_dim < 1) {
    throw ConfigError("policy dimensions must be positive");
  }
  if (critic_backend != "lexicon" && critic_backend != "remote" && critic_backend != "scripted" &&
      critic_backend != "self") {
    throw ConfigError("unknown critic backend: " + critic_backend);
  }
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::map<std::string, std::string> values;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": empty config key");
    }
    values[key] = value;
  }
  return values;
}

RunConfig make_run_config(const std::map<std::string, std::string>& file_values,
                          const std::map<std::string, std::string>& overrides) {
  RunConfig config;
  for (const auto& [key, value] : file_values) config.apply(key, value);
  for (const auto& [key, value] : overrides) config.apply(key, value);
  config.validate();
  return config;
}

// ---------------------------------------------------------------------------
// Critique prompt presets
// ---------------------------------------------------------------------------

CritiquePromptPreset critique_preset_for(const std::string& env_name) {
  CritiquePromptPreset p;
  const std::string answer_rule =
      "Answer with one line per span in the form LABEL: \"span\", quoting the span verbatim. "
      "Answer NONE if no span stands out.";
  if (env_name == "sentiment") {
    p.task_description =
        "You review continuations written by a text generation model for the sentiment control "
        "task. The goal is positive sentiment. Identify the spans of the text that drive the "
        "environment's sentiment score.";
    p.steps = {"Read the text and the environment reward if one is given.",
               "Quote each span that carries clearly positive or negative sentiment.",
               "Label each span POSITIVE or NEGATIVE.", answer_rule};
    p.labels = LabelTable::sentiment();
    p.send_reward = true;
    p.few_shot_examples = {
        {"a truly great movie with a warm heart",
         {{"truly great", "POSITIVE", 1.0}, {"warm heart", "POSITIVE", 1.0}}},
        {"the plot was boring and the acting awful",
         {{"boring", "NEGATIVE", -1.0}, {"awful", "NEGATIVE", -1.0}}},
        {"the screen shows a man with a hat", {}},
    };
  } else if (env_name == "toxicity") {
    p.task_description =
        "You review continuations written by a text generation model for the detoxification "
        "task. The goal is to avoid toxic language. Identify the spans that make the text toxic "
        "or that keep it civil.";
    p.steps = {"Read the text.", "Quote each span containing rude, insulting, or toxic wording.",
               "Label toxic spans TOXIC and clearly civil spans NONTOXIC.", answer_rule};
    p.labels = LabelTable::toxicity();
    p.few_shot_examples = {
        {"you are a complete idiot and a fool", {{"complete idiot", "TOXIC", -1.0}, {"fool", "TOXIC", -1.0}}},
        {"thank you for the kind and helpful answer", {{"kind and helpful", "NONTOXIC", 1.0}}},
        {"the train leaves at nine in the morning", {}},
    };
  } else if (env_name == "overlap" || env_name == "summarization") {
    p.task_description =
        "You review summaries written by a text generation model. The goal is a summary that "
        "covers the source post. Identify the spans that make the summary better or worse.";
    p.steps = {"Read the summary and the environment reward if one is given.",
               "Quote each span that captures key source content as RELEVANT.",
               "Quote each span that is off-topic or redundant as IRRELEVANT.", answer_rule};
    p.labels = LabelTable::relevance();
    p.few_shot_examples = {
        {"the team won the final game", {{"won the final game", "RELEVANT", 1.0}}},
        {"the weather was nice nice nice", {{"nice nice nice", "IRRELEVANT", -1.0}}},
        {"the report covers the budget", {}},
    };
  } else {
    // substring and any custom environment: generic target-spotting prompt
    p.task_description =
        "You review continuations written by a text generation model. The goal is to produce "
        "the target phrase. Identify the spans that move the text toward or away from the goal.";
    p.steps = {"Read the text and the environment reward if one is given.",
               "Quote each span that helps reach the goal as POSITIVE.",
               "Quote each span that hurts as NEGATIVE.", answer_rule};
    p.labels = LabelTable::sentiment();
    p.send_reward = true;
    p.few_shot_examples = {
        {"the fox runs past the red door", {{"red door", "POSITIVE", 1.0}}},
        {"a wall and a wall and a wall", {}},
        {"the blue door stays shut", {{"blue door", "NEGATIVE", -1.0}}},
    };
  }
  return p;
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points,
                     bool nondeterministic) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write curve file: " + path);
  if (nondeterministic) out << "# nondeterministic critic backend\n";
  out << kCurveHeader << "\n";
  for (const CurvePoint& p : points) {
    out << p.step << ',' << format_double(p.mean_reward) << ',' << format_double(p.mean_extrinsic)
        << ',' << format_double(p.mean_intrinsic) << ',' << format_double(p.mean_kl) << ','
        << p.discarded_spans << "\n";
  }
  if (!out) throw Error("failed writing curve file: " + path);
}

RunCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open curve file: " + path);
  RunCurve curve;
  curve.path = path;
  std::string line;
  bool header_seen = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.find("nondeterministic") != std::string::npos) curve.nondeterministic = true;
      continue;
    }
    if (!header_seen) {
      if (line != kCurveHeader) {
        throw ConfigError(path + ": unexpected curve header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    CurvePoint p;
    std::istringstream row(line);
    std::string field;
    auto next = [&]() {
      if (!std::getline(row, field, ',')) {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": short curve row");
      }
      return field;
    };
    p.step = parse_int("step", next());
    p.mean_reward = parse_double("mean_reward", next());
    p.mean_extrinsic = parse_double("mean_extrinsic", next());
    p.mean_intrinsic = parse_double("mean_intrinsic", next());
    p.mean_kl = parse_double("mean_kl", next());
    p.discarded_spans = parse_long("discarded_spans", next());
    curve.points.push_back(p);
  }
  if (!header_seen) throw ConfigError(path + ": missing curve header");
  return curve;
}

std::vector<CurvePoint> smooth_curve(const std::vector<CurvePoint>& points, int window) {
  if (window < 1) throw ConfigError("smoothing window must be at least 1");
  std::vector<CurvePoint> out = points;
  double running = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    running += points[i].mean_reward;
    if (i >= static_cast<std::size_t>(window)) {
      running -= points[i - static_cast<std::size_t>(window)].mean_reward;
    }
    const double denom = static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
    out[i].mean_reward = running / denom;
  }
  return out;
}

std::optional<int> steps_to_threshold(const std::vector<CurvePoint>& points, double threshold,
                                      int window) {
  for (const CurvePoint& p : smooth_curve(points, window)) {
    if (p.mean_reward >= threshold) return p.step;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kCheckpointHeader = "denserl-checkpoint v1";
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out << kCheckpointHeader << "\n";
  const std::uint32_t n = static_cast<std::uint32_t>(ckpt.vocab_symbols.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const std::string& s : ckpt.vocab_symbols) {
    const std::uint32_t len = static_cast<std::uint32_t>(s.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  save_params(out, ckpt.params);
  save_params(out, ckpt.ref_params);
  if (!out) throw Error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::string header;
  std::getline(in, header);
  if (header != kCheckpointHeader) throw ConfigError("bad checkpoint header in " + path);
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  Checkpoint ckpt;
  ckpt.vocab_symbols.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    ckpt.vocab_symbols.push_back(std::move(s));
  }
  if (!in) throw ConfigError("truncated checkpoint: " + path);
  ckpt.params = load_params(in);
  ckpt.ref_params = load_params(in);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> load_transcript(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open transcript file: " + path);
  std::vector<std::string> entries;
  std::string line;
  std::string current;
  bool any = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "---") {
      entries.push_back(current);
      current.clear();
      any = false;
      continue;
    }
    if (!current.empty()) current += "\n";
    current += line;
    any = true;
  }
  if (any || !current.empty()) entries.push_back(current);
  return entries;
}

std::pair<std::string, std::string> lexicon_label_names(const LabelTable& labels) {
  std::string pos = "POSITIVE";
  std::string neg = "NEGATIVE";
  for (const auto& [name, value] : labels.entries) {
    if (value > 0) {
      pos = name;
      break;
    }
  }
  for (const auto& [name, value] : labels.entries) {
    if (value < 0) {
      neg = name;
      break;
    }
  }
  return {pos, neg};
}

struct EpisodeOut {
  Trajectory traj;
  long discarded = 0;
  bool critic_failed = false;
};

}  // namespace

TrainResult train(const RunConfig& config) {
  config.validate();

  const Vocabulary vocab = Vocabulary::load(config.vocab_path);
  const auto env = make_environment(config.env, vocab);

  SamplerConfig sampler = config.sampler;
  if (!config.stop_token_symbol.empty()) {
    if (!vocab.contains(config.stop_token_symbol)) {
      throw ConfigError("stop_token '" + config.stop_token_symbol + "' is not in the vocabulary");
    }
    sampler.stop_token = vocab.index(config.stop_token_symbol);
  }

  PolicyDims dims;
  dims.vocab_size = static_cast<int>(vocab.size());
  dims.embed_dim = config.embed_dim;
  dims.hidden_dim = config.hidden_dim;
  dims.window = config.window;

  PolicyParams params = PolicyParams::init_random(dims, derive_seed(config.seed, 0xA11CE));
  PolicyParams ref_params = clone_frozen(params);
  AdamState adam(params.theta.size());
  KlController kl{config.train.kl_init, config.train.kl_target, config.train.kl_horizon};

  // Critique prompt content and labels.
  CritiquePromptPreset preset = critique_preset_for(config.env.env_name);
  if (!config.labels_preset.empty()) preset.labels = named_label_table(config.labels_preset);
  if (!config.task_description_override.empty()) {
    preset.task_description = config.task_description_override;
  }
  const bool send_reward = config.send_reward_to_critic.value_or(preset.send_reward);

  // With alpha2 = 0 or the extrinsic-only ablation the critic never runs, so
  // both configurations produce identical runs by construction.
  std::optional<Critic> critic;
  auto self_handle = std::shared_ptr<const PolicyParams>(&params, [](const PolicyParams*) {});
  if (config.uses_intrinsic()) {
    const auto [pos_label, neg_label] = lexicon_label_names(preset.labels);
    if (config.critic_backend == "lexicon") {
      if (config.critic_lexicon_path.empty()) throw ConfigError("missing 'critic_lexicon'");
      critic = Critic::lexicon(Lexicon::load(config.critic_lexicon_path), pos_label, neg_label);
    } else if (config.critic_backend == "scripted") {
      if (config.transcript_path.empty()) throw ConfigError("missing 'transcript'");
      critic = Critic::scripted(load_transcript(config.transcript_path), preset.labels);
    } else if (config.critic_backend == "self") {
      if (config.transcript_path.empty()) {
        if (config.remote.base_url.empty()) {
          throw ConfigError("self critic needs a 'transcript' or a 'critic_url'");
        }
        critic = Critic::self_critique_remote(self_handle, config.remote, preset.labels);
      } else {
        critic = Critic::self_critique(self_handle, load_transcript(config.transcript_path),
                                       preset.labels);
      }
    } else {  // remote
      if (config.remote.base_url.empty()) throw ConfigError("missing 'critic_url'");
      critic = Critic::remote(config.remote, preset.labels);
    }
  }
  const bool nondeterministic = critic && !critic->deterministic();

  std::filesystem::create_directories(config.out_dir);
  const std::string curve_path = config.out_dir + "/curve.csv";
  const std::string checkpoint_path = config.out_dir + "/checkpoint.bin";

  std::ofstream curve_out(curve_path);
  if (!curve_out) throw ConfigError("cannot write curve file: " + curve_path);
  if (nondeterministic) curve_out << "# nondeterministic critic backend\n";
  curve_out << kCurveHeader << "\n";

  std::vector<std::string> eval_prompts;
  if (config.eval_every > 0 && !config.eval_prompts_path.empty()) {
    std::ifstream in(config.eval_prompts_path);
    if (!in) throw ConfigError("cannot open eval prompts: " + config.eval_prompts_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) eval_prompts.push_back(line);
    }
  }

  TrainResult result;
  std::atomic<long> critic_failures{0};

  auto rollout_one = [&](std::uint64_t episode_index) -> EpisodeOut {
    EpisodeOut out;
    const std::uint64_t ep_seed = derive_seed(config.seed, episode_index);
    std::mt19937_64 rng(ep_seed);
    const PromptSample sample = env->reset(rng);
    out.traj = generate(sample.prompt, params, sampler, derive_seed(ep_seed, 1));

    std::vector<TokenId> generated;
    generated.reserve(out.traj.length());
    for (const Transition& tr : out.traj.transitions) generated.push_back(tr.action);
    const Detokenized detok = detokenize(generated, vocab);
    const double extrinsic = env->score(detok.text, sample);

    std::vector<double> intrinsic(out.traj.length(), 0.0);
    if (critic) {
      CritiqueRequest request;
      request.task_description = preset.task_description;
      request.steps = preset.steps;
      request.few_shot_examples = preset.few_shot_examples;
      request.output_text = detok.text;
      if (send_reward) request.extrinsic_reward = extrinsic;
      try {
        const auto spans = critic->critique(request);
        const AlignResult aligned = align_spans(detok.text, detok.offsets, spans);
        intrinsic = aligned.intrinsic;
        out.discarded = aligned.discarded_spans;
      } catch (const CriticError& e) {
        out.critic_failed = true;
        ++critic_failures;
        std::cerr << "critic fallback (zero intrinsic rewards): " << e.what() << "\n";
      }
    }
    out.traj.rewards = combine_rewards(std::move(intrinsic), extrinsic, config.train.alpha1,
                                       config.train.alpha2, config.train.ablation);
    return out;
  };

  const long n_updates = config.total_episodes / config.batch_size;
  std::uint64_t episode_index = 0;
  for (long update = 0; update < n_updates; ++update) {
    std::vector<EpisodeOut> episodes(static_cast<std::size_t>(config.batch_size));
    if (config.rollout_threads <= 1) {
      for (int b = 0; b < config.batch_size; ++b) {
        episodes[static_cast<std::size_t>(b)] = rollout_one(episode_index + static_cast<std::uint64_t>(b));
      }
    } else {
      std::atomic<int> cursor{0};
      std::vector<std::future<void>> workers;
      const int n_workers = std::min(config.rollout_threads, config.batch_size);
      for (int w = 0; w < n_workers; ++w) {
        workers.push_back(std::async(std::launch::async, [&]() {
          int b;
          while ((b = cursor.fetch_add(1)) < config.batch_size) {
            episodes[static_cast<std::size_t>(b)] =
                rollout_one(episode_index + static_cast<std::uint64_t>(b));
          }
        }));
      }
      for (auto& w : workers) w.get();
    }
    episode_index += static_cast<std::uint64_t>(config.batch_size);

    std::vector<Trajectory> batch;
    batch.reserve(episodes.size());
    long discarded = 0;
    double sum_extrinsic = 0.0;
    double sum_intrinsic = 0.0;
    for (EpisodeOut& e : episodes) {
      discarded += e.discarded;
      sum_extrinsic += e.traj.rewards.extrinsic;
      for (double r : e.traj.rewards.intrinsic) sum_intrinsic += r;
      batch.push_back(std::move(e.traj));
    }

    const UpdateStats stats = ppo_update(batch, params, ref_params, config.train, adam, kl,
                                         derive_seed(config.seed, 0xBA7C4000ULL + static_cast<std::uint64_t>(update)));
    if (!std::isfinite(stats.mean_reward) || !std::isfinite(stats.policy_loss) ||
        !std::isfinite(stats.value_loss)) {
      throw NumericalError("non-finite statistics at update " + std::to_string(update + 1));
    }

    CurvePoint point;
    point.step = static_cast<int>(update + 1);
    point.mean_reward = stats.mean_reward;
    point.mean_extrinsic = sum_extrinsic / config.batch_size;
    point.mean_intrinsic = sum_intrinsic / config.batch_size;
    point.mean_kl = stats.mean_kl;
    point.discarded_spans = discarded;
    result.curve.push_back(point);
    result.update_stats.push_back(stats);

    curve_out << point.step << ',' << format_double(point.mean_reward) << ','
              << format_double(point.mean_extrinsic) << ',' << format_double(point.mean_intrinsic)
              << ',' << format_double(point.mean_kl) << ',' << point.discarded_spans << "\n";
    curve_out.flush();

    if (config.eval_every > 0 && !eval_prompts.empty() &&
        (update + 1) % config.eval_every == 0) {
      const EvalReport report =
          evaluate(params, ref_params, vocab, *env, eval_prompts, sampler, config.eval_k,
                   config.eval_threshold, derive_seed(config.seed, 0xE7A1000ULL + static_cast<std::uint64_t>(update)));
      std::ofstream eval_out(config.out_dir + "/eval_" + std::to_string(update + 1) + ".json");
      eval_out << report.to_json() << "\n";
    }
  }

  save_checkpoint(checkpoint_path, {vocab.symbols(), params, ref_params});

  result.params = std::move(params);
  result.ref_params = std::move(ref_params);
  if (critic) result.critic_stats = critic->stats();
  result.critic_failures = critic_failures.load();
  result.curve_path = curve_path;
  result.checkpoint_path = checkpoint_path;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double distinct2(const std::vector<std::vector<TokenId>>& sequences) {
  std::set<std::pair<TokenId, TokenId>> unique;
  long total = 0;
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      unique.emplace(seq[i], seq[i + 1]);
      ++total;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["env"] = env;
  j["num_prompts"] = num_prompts;
  j["k"] = k;
  j["mean_score"] = mean_score;
  j["frac_above_threshold"] = frac_above_threshold;
  j["distinct2"] = distinct2;
  j["ref_nll_per_token"] = ref_nll_per_token;
  return j.dump(2);
}

EvalReport evaluate(const PolicyParams& params, const PolicyParams& ref_params,
                    const Vocabulary& vocab, const Environment& env,
                    const std::vector<std::string>& prompt_lines, const SamplerConfig& sampler,
                    int k, double threshold, std::uint64_t seed) {
  if (k < 1) throw ConfigError("eval k must be at least 1");
  EvalReport report;
  report.env = env.name();
  report.k = k;

  double sum_score = 0.0;
  long above = 0;
  long continuations = 0;
  double nll_sum = 0.0;
  long nll_tokens = 0;
  std::vector<std::vector<TokenId>> sequences;

  for (std::size_t i = 0; i < prompt_lines.size(); ++i) {
    const std::string& line = prompt_lines[i];
    std::string prompt_text = line;
    std::string reference;
    if (const std::size_t tab = line.find('\t'); tab != std::string::npos) {
      prompt_text = line.substr(0, tab);
      reference = line.substr(tab + 1);
    }
    PromptSample sample{tokenize(prompt_text, vocab), reference};
    if (sample.prompt.empty()) continue;
    ++report.num_prompts;

    for (int j = 0; j < k; ++j) {
      const Trajectory traj = generate(sample.prompt, params, sampler,
                                       derive_seed(derive_seed(seed, i), static_cast<std::uint64_t>(j)));
      std::vector<TokenId> generated;
      generated.reserve(traj.length());
      for (const Transition& tr : traj.transitions) {
        generated.push_back(tr.action);
        nll_sum -= log_prob_of(tr.state, tr.action, ref_params);
        ++nll_tokens;
      }
      const Detokenized detok = detokenize(generated, vocab);
      const double score = env.score(detok.text, sample);
      sum_score += score;
      if (score > threshold) ++above;
      ++continuations;
      sequences.push_back(std::move(generated));
    }
  }

  if (continuations == 0) throw ConfigError("no usable evaluation prompts");
  report.mean_score = sum_score / static_cast<double>(continuations);
  report.frac_above_threshold = static_cast<double>(above) / static_cast<double>(continuations);
  report.distinct2 = distinct2(sequences);
  report.ref_nll_per_token = nll_tokens > 0 ? nll_sum / static_cast<double>(nll_tokens) : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

double sign_test_p_value(int wins, int n) {
  if (n <= 0) return 1.0;
  // One-sided binomial tail at p = 1/2.
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    double coeff = 1.0;
    for (int i = 0; i < k; ++i) coeff = coeff * static_cast<double>(n - i) / static_cast<double>(i + 1);
    p += coeff * std::pow(0.5, n);
  }
  return std::min(1.0, p);
}

std::string ComparisonReport::to_json() const {
  nlohmann::json j;
  j["threshold"] = threshold;
  j["window"] = window;
  j["runs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < paths.size(); ++i) {
    nlohmann::json run;
    run["path"] = paths[i];
    if (run_steps_to_threshold[i]) {
      run["steps_to_threshold"] = *run_steps_to_threshold[i];
    } else {
      run["steps_to_threshold"] = nullptr;
    }
    j["runs"].push_back(run);
  }
  j["diffs_vs_first"] = diffs_vs_first;
  j["sign_test"] = {{"wins", wins}, {"losses", losses}, {"ties", ties}, {"p_value", p_value}};
  return j.dump(2);
}

ComparisonReport compare_runs(const std::vector<RunCurve>& runs, double threshold, int window,
                              std::optional<std::size_t> split) {
  if (runs.size() < 2) throw ShapeError("compare_runs needs at least two curve files");
  const std::size_t n_points = runs[0].points.size();
  for (const RunCurve& run : runs) {
    if (run.points.size() != n_points) {
      throw ShapeError("curve files have different lengths: " + run.path);
    }
    for (std::size_t t = 0; t < n_points; ++t) {
      if (run.points[t].step != runs[0].points[t].step) {
        throw ShapeError("curve files have misaligned steps: " + run.path);
      }
    }
  }

  ComparisonReport report;
  report.threshold = threshold;
  report.window = window;

  std::vector<std::vector<CurvePoint>> smoothed;
  smoothed.reserve(runs.size());
  for (const RunCurve& run : runs) {
    report.paths.push_back(run.path);
    smoothed.push_back(smooth_curve(run.points, window));
    report.run_steps_to_threshold.push_back(steps_to_threshold(run.points, threshold, window));
  }

  for (std::size_t i = 1; i < runs.size(); ++i) {
    std::vector<double> diff(n_points);
    for (std::size_t t = 0; t < n_points; ++t) {
      diff[t] = smoothed[i][t].mean_reward - smoothed[0][t].mean_reward;
    }
    report.diffs_vs_first.push_back(std::move(diff));
  }

  const std::size_t s = split.value_or(runs.size() / 2);
  if (s >= 1 && 2 * s == runs.size()) {
    for (std::size_t i = 0; i < s; ++i) {
      const auto& a = report.run_steps_to_threshold[i];
      const auto& b = report.run_steps_to_threshold[i + s];
      if (!a && !b) {
        ++report.ties;
      } else if (a && !b) {
        ++report.wins;
      } else if (!a && b) {
        ++report.losses;
      } else if (*a < *b) {
        ++report.wins;
      } else if (*a > *b) {
        ++report.losses;
      } else {
        ++report.ties;
      }
    }
  }
  report.p_value = sign_test_p_value(report.wins, report.wins + report.losses);
  return report;
}

}  // namespace denserl
