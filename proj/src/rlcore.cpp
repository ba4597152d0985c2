#include "denserl/rlcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace denserl {

Ablation parse_ablation(const std::string& name) {
  if (name == "both") return Ablation::kBoth;
  if (name == "extrinsic-only" || name == "extrinsic_only") return Ablation::kExtrinsicOnly;
  if (name == "intrinsic-only" || name == "intrinsic_only") return Ablation::kIntrinsicOnly;
  throw ConfigError("unknown ablation mode: " + name);
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kBoth: return "both";
    case Ablation::kExtrinsicOnly: return "extrinsic-only";
    case Ablation::kIntrinsicOnly: return "intrinsic-only";
  }
  return "both";
}

void TrainConfig::validate() const {
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
  if (lam < 0.0 || lam > 1.0) throw ConfigError("lam must lie in [0, 1]");
  if (!(clip_ratio > 0.0)) throw ConfigError("clip_ratio must be positive");
  if (ppo_epochs < 1) throw ConfigError("ppo_epochs must be at least 1");
  if (minibatch_size < 1) throw ConfigError("minibatch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

std::vector<double> compute_returns(const std::vector<double>& rewards, double gamma) {
  if (rewards.empty()) throw ShapeError("compute_returns requires a non-empty reward sequence");
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

std::vector<double> compute_gae(const std::vector<double>& rewards,
                                const std::vector<double>& values, double terminal_value,
                                double gamma, double lam) {
  if (rewards.empty()) throw ShapeError("compute_gae requires a non-empty reward sequence");
  if (rewards.size() != values.size()) {
    throw ShapeError("compute_gae length mismatch: " + std::to_string(rewards.size()) +
                     " rewards vs " + std::to_string(values.size()) + " values");
  }
  const std::size_t t_len = rewards.size();
  std::vector<double> adv(t_len);
  double next_adv = 0.0;
  double next_value = terminal_value;
  for (std::size_t t = t_len; t-- > 0;) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    next_adv = delta + gamma * lam * next_adv;
    adv[t] = next_adv;
    next_value = values[t];
  }
  return adv;
}

void whiten(std::vector<double>& xs) {
  if (xs.empty()) return;
  const double n = static_cast<double>(xs.size());
  double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double stddev = std::sqrt(var / n);
  if (stddev < 1e-8) {
    std::fill(xs.begin(), xs.end(), 0.0);
    return;
  }
  for (double& x : xs) x = (x - mean) / (stddev + 1e-8);
}

LossGrad ppo_surrogate_loss(std::span<const PolicySample> batch, const PolicyParams& params,
                            double clip_ratio) {
  if (batch.empty()) throw ShapeError("ppo_surrogate_loss requires a non-empty batch");
  LossGrad out;
  out.grad.assign(params.dims.n_params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  PolicyWorkspace ws;
  std::vector<double> dlogits;
  for (const PolicySample& s : batch) {
    if (!std::isfinite(s.advantage)) throw NumericalError("non-finite advantage in PPO batch");
    policy_forward(s.state, params, ws);

    double hi = *std::max_element(ws.logits.begin(), ws.logits.end());
    double lse = 0.0;
    for (double l : ws.logits) lse += std::exp(l - hi);
    lse = hi + std::log(lse);
    const double log_prob = ws.logits[static_cast<std::size_t>(s.action)] - lse;

    const double ratio = std::exp(log_prob - s.old_log_prob);
    const double clipped = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    const double obj_unclipped = ratio * s.advantage;
    const double obj_clipped = clipped * s.advantage;
    out.loss -= inv_n * std::min(obj_unclipped, obj_clipped);

    // Gradient flows through whichever branch the min selects; the clipped
    // branch is constant when clipping binds.
    double coef = 0.0;
    if (obj_unclipped <= obj_clipped) {
      coef = s.advantage * ratio;
    } else if (ratio >= 1.0 - clip_ratio && ratio <= 1.0 + clip_ratio) {
      coef = s.advantage * ratio;
    }
    if (coef == 0.0) continue;

    const double scale = -inv_n * coef;
    dlogits.assign(ws.logits.size(), 0.0);
    double norm = 0.0;
    for (std::size_t a = 0; a < ws.logits.size(); ++a) {
      dlogits[a] = std::exp(ws.logits[a] - lse);
      norm += dlogits[a];
    }
    for (std::size_t a = 0; a < dlogits.size(); ++a) dlogits[a] = -scale * dlogits[a] / norm;
    dlogits[static_cast<std::size_t>(s.action)] += scale;
    policy_backward(params, ws, dlogits, 0.0, out.grad);
  }
  return out;
}

LossGrad value_loss(std::span<const ValueSample> batch, const PolicyParams& params,
                    double clip_value) {
  if (batch.empty()) throw ShapeError("value_loss requires a non-empty batch");
  LossGrad out;
  out.grad.assign(params.dims.n_params(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  PolicyWorkspace ws;
  for (const ValueSample& s : batch) {
    policy_forward(s.state, params, ws);
    const double v = value_from_workspace(params, ws);
    const double v_clipped = std::clamp(v, s.old_value - clip_value, s.old_value + clip_value);
    const double diff = v - s.ret;
    const double diff_clipped = v_clipped - s.ret;
    const double sq = diff * diff;
    const double sq_clipped = diff_clipped * diff_clipped;
    out.loss += 0.5 * inv_n * std::max(sq, sq_clipped);

    double dvalue;
    if (sq >= sq_clipped) {
      dvalue = diff;
    } else {
      const bool inside = v > s.old_value - clip_value && v < s.old_value + clip_value;
      dvalue = inside ? diff_clipped : 0.0;
    }
    if (dvalue == 0.0) continue;
    policy_backward(params, ws, {}, inv_n * dvalue, out.grad);
  }
  return out;
}

double kl_penalty(double action_log_prob_live, double action_log_prob_ref, double beta) {
  return beta * (action_log_prob_live - action_log_prob_ref);
}

KlController kl_controller_update(const KlController& controller, double observed_mean_kl) {
  if (!std::isfinite(observed_mean_kl)) throw NumericalError("non-finite observed KL");
  constexpr double kProportionalGain = 0.1;
  KlController next = controller;
  const double err = std::clamp(observed_mean_kl / controller.target - 1.0, -0.2, 0.2);
  next.beta = std::max(0.0, controller.beta * (1.0 + kProportionalGain * err));
  return next;
}

void adam_step(PolicyParams& params, const std::vector<double>& grad, double learning_rate,
               AdamState& state) {
  if (grad.size() != params.theta.size()) throw ShapeError("gradient size mismatch in adam_step");
  if (state.m.size() != grad.size()) {
    state.m.assign(grad.size(), 0.0);
    state.v.assign(grad.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params.theta[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

UpdateStats ppo_update(const std::vector<Trajectory>& batch, PolicyParams& params,
                       const PolicyParams& ref_params, const TrainConfig& config,
                       AdamState& adam, KlController& kl, std::uint64_t shuffle_seed) {
  if (batch.empty()) throw ShapeError("ppo_update requires a non-empty batch");
  config.validate();

  const std::size_t n_traj = batch.size();
  UpdateStats stats;
  stats.kl_beta = kl.beta;

  // Per-token KL penalty against the frozen reference, then GAE and returns
  // on the penalized rewards.
  std::vector<std::vector<double>> advantages(n_traj);
  std::vector<std::vector<double>> returns(n_traj);
  double sum_kl = 0.0;
  double sum_reward = 0.0;
  for (std::size_t i = 0; i < n_traj; ++i) {
    const Trajectory& traj = batch[i];
    const std::size_t t_len = traj.length();
    if (t_len == 0 || traj.rewards.combined.size() != t_len) {
      throw ShapeError("trajectory rewards not filled before ppo_update");
    }
    std::vector<double> penalized(t_len);
    std::vector<double> values(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
      const Transition& tr = traj.transitions[t];
      const double ref_lp = log_prob_of(tr.state, tr.action, ref_params);
      const double kld = tr.log_prob - ref_lp;
      sum_kl += kld;
      penalized[t] = traj.rewards.combined[t] - kl_penalty(tr.log_prob, ref_lp, kl.beta);
      values[t] = tr.value;
      sum_reward += penalized[t];
    }
    advantages[i] = compute_gae(penalized, values, traj.terminal_value, config.gamma, config.lam);
    returns[i] = compute_returns(penalized, config.gamma);
  }
  stats.mean_kl = sum_kl / static_cast<double>(n_traj);
  stats.mean_reward = sum_reward / static_cast<double>(n_traj);

  // Whiten advantages jointly across every token in the batch.
  std::vector<double> flat;
  for (const auto& adv : advantages) flat.insert(flat.end(), adv.begin(), adv.end());
  whiten(flat);
  std::size_t cursor = 0;
  for (auto& adv : advantages) {
    for (double& a : adv) a = flat[cursor++];
  }

  std::vector<std::size_t> order(n_traj);
  std::iota(order.begin(), order.end(), 0);

  double loss_policy_acc = 0.0;
  double loss_value_acc = 0.0;
  int n_minibatches = 0;
  std::vector<PolicySample> psamples;
  std::vector<ValueSample> vsamples;

  for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t begin = 0; begin < n_traj; begin += static_cast<std::size_t>(config.minibatch_size)) {
      const std::size_t end = std::min(n_traj, begin + static_cast<std::size_t>(config.minibatch_size));
      psamples.clear();
      vsamples.clear();
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t i = order[k];
        const Trajectory& traj = batch[i];
        for (std::size_t t = 0; t < traj.length(); ++t) {
          const Transition& tr = traj.transitions[t];
          psamples.push_back({tr.state, tr.action, tr.log_prob, advantages[i][t]});
          vsamples.push_back({tr.state, returns[i][t], tr.value});
        }
      }

      LossGrad sur = ppo_surrogate_loss(psamples, params, config.clip_ratio);
      LossGrad val = value_loss(vsamples, params, config.clip_value);
      if (!std::isfinite(sur.loss) || !std::isfinite(val.loss)) {
        throw NumericalError("non-finite loss in ppo_update");
      }
      loss_policy_acc += sur.loss;
      loss_value_acc += val.loss;
      ++n_minibatches;

      std::vector<double>& grad = sur.grad;
      for (std::size_t g = 0; g < grad.size(); ++g) grad[g] += config.value_loss_coeff * val.grad[g];
      if (config.freeze_embeddings) {
        std::fill(grad.begin() + static_cast<std::ptrdiff_t>(params.dims.off_embed()),
                  grad.begin() + static_cast<std::ptrdiff_t>(params.dims.off_trunk_w()), 0.0);
      }
      adam_step(params, grad, config.learning_rate, adam);
    }
  }

  stats.policy_loss = loss_policy_acc / std::max(1, n_minibatches);
  stats.value_loss = loss_value_acc / std::max(1, n_minibatches);
  kl = kl_controller_update(kl, stats.mean_kl);
  return stats;
}

}  // namespace denserl
