#ifndef DENSERL_RLCORE_HPP_
#define DENSERL_RLCORE_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "denserl/core.hpp"
#include "denserl/policy.hpp"

namespace denserl {

enum class Ablation { kBoth, kExtrinsicOnly, kIntrinsicOnly };

Ablation parse_ablation(const std::string& name);
std::string to_string(Ablation a);

struct TrainConfig {
  double gamma = 1.0;
  double lam = 0.95;
  double clip_ratio = 0.2;
  double clip_value = 0.2;
  int ppo_epochs = 4;
  int minibatch_size = 8;  // trajectories per minibatch
  double learning_rate = 1e-3;
  double kl_init = 0.1;
  double kl_target = 6.0;
  int kl_horizon = 1;
  double value_loss_coeff = 0.1;
  double alpha1 = 1.0;
  double alpha2 = 0.2;
  Ablation ablation = Ablation::kBoth;
  bool freeze_embeddings = false;

  void validate() const;  // throws ConfigError
};

// ---------------------------------------------------------------------------
// Returns and advantages
// ---------------------------------------------------------------------------

/// G_t = sum_{i>=t} gamma^(i-t) r_i.
std::vector<double> compute_returns(const std::vector<double>& rewards, double gamma);

/// Generalized advantage estimation via the backward recursion
/// A_t = delta_t + gamma*lam*A_{t+1}, delta_t = r_t + gamma*V_{t+1} - V_t,
/// with V_{T+1} = terminal_value.
std::vector<double> compute_gae(const std::vector<double>& rewards,
                                const std::vector<double>& values, double terminal_value,
                                double gamma, double lam);

/// In-place batch whitening: subtract mean, divide by std (+1e-8). A batch
/// with std below 1e-8 comes back all zero.
void whiten(std::vector<double>& xs);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct PolicySample {
  EpisodeState state;
  TokenId action = 0;
  double old_log_prob = 0.0;
  double advantage = 0.0;
};

struct ValueSample {
  EpisodeState state;
  double ret = 0.0;
  double old_value = 0.0;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Negated PPO clipped surrogate, averaged over the batch, with its analytic
/// gradient. Minimizing this maximizes
/// E[min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)].
LossGrad ppo_surrogate_loss(std::span<const PolicySample> batch, const PolicyParams& params,
                            double clip_ratio);

/// Clipped value loss: 0.5 * mean(max((V-G)^2, (clip(V, old-c, old+c)-G)^2)).
LossGrad value_loss(std::span<const ValueSample> batch, const PolicyParams& params,
                    double clip_value);

/// Per-token penalty beta * (log pi_live(a|s) - log pi_ref(a|s)), subtracted
/// from the reward before advantage estimation.
double kl_penalty(double action_log_prob_live, double action_log_prob_ref, double beta);

// ---------------------------------------------------------------------------
// KL controller
// ---------------------------------------------------------------------------

struct KlController {
  double beta = 0.1;
  double target = 6.0;
  int horizon = 1;
};

/// Proportional update beta *= 1 + 0.1 * clip(observed/target - 1, -0.2, 0.2),
/// floored at zero.
KlController kl_controller_update(const KlController& controller, double observed_mean_kl);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(PolicyParams& params, const std::vector<double>& grad, double learning_rate,
               AdamState& state);

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

struct UpdateStats {
  double mean_reward = 0.0;  // batch mean of per-trajectory summed penalized rewards
  double mean_kl = 0.0;      // batch mean of per-trajectory summed log pi_live - log pi_ref
  double kl_beta = 0.0;      // coefficient applied on this update
  double policy_loss = 0.0;
  double value_loss = 0.0;
};

/// One PPO update over a batch of scored trajectories: applies the per-token
/// KL penalty, computes GAE and returns, whitens advantages across the batch,
/// then runs ppo_epochs of minibatch Adam steps on the combined loss. The KL
/// controller is adapted from the observed mean KL afterwards.
UpdateStats ppo_update(const std::vector<Trajectory>& batch, PolicyParams& params,
                       const PolicyParams& ref_params, const TrainConfig& config,
                       AdamState& adam, KlController& kl, std::uint64_t shuffle_seed);

}  // namespace denserl

#endif  // DENSERL_RLCORE_HPP_
