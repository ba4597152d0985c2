#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "denserl/rlcore.hpp"
#include "test_util.hpp"

using namespace denserl;

namespace {

PolicyDims tiny_dims(int vocab) {
  PolicyDims d;
  d.vocab_size = vocab;
  d.embed_dim = 3;
  d.hidden_dim = 4;
  d.window = 2;
  return d;
}

// Explicit double sum from the advantage definition:
// A_t = sum_{t'=t}^{T-1} (gamma*lam)^(t'-t) * (r_t' + gamma*V_{t'+1} - V_t').
std::vector<double> gae_double_sum(const std::vector<double>& rewards,
                                   const std::vector<double>& values, double terminal_value,
                                   double gamma, double lam) {
  const std::size_t t_len = rewards.size();
  std::vector<double> adv(t_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    double weight = 1.0;
    for (std::size_t tp = t; tp < t_len; ++tp) {
      const double next_value = tp + 1 < t_len ? values[tp + 1] : terminal_value;
      adv[t] += weight * (rewards[tp] + gamma * next_value - values[tp]);
      weight *= gamma * lam;
    }
  }
  return adv;
}

}  // namespace

TEST_CASE("compute_returns: undiscounted suffix sums and gamma=0") {
  CHECK(compute_returns({0, 0, 1}, 1.0) == std::vector<double>{1, 1, 1});
  CHECK(compute_returns({1, 1}, 0.0) == std::vector<double>{1, 1});
  CHECK_THROWS_AS(compute_returns({}, 1.0), ShapeError);
}

TEST_CASE("compute_returns matches the brute-force double loop") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> rewards(10);
    for (double& r : rewards) r = testutil::uniform(rng, -2.0, 2.0);
    const double gamma = 0.9;
    const auto got = compute_returns(rewards, gamma);
    for (std::size_t t = 0; t < rewards.size(); ++t) {
      double expect = 0.0;
      for (std::size_t i = t; i < rewards.size(); ++i) {
        expect += std::pow(gamma, static_cast<double>(i - t)) * rewards[i];
      }
      CHECK(std::abs(got[t] - expect) < 1e-12);
    }
  }
}

TEST_CASE("compute_gae reduces to returns with zero values, gamma=lam=1") {
  const std::vector<double> rewards{0.5, -1.0, 2.0, 0.25};
  const std::vector<double> values(4, 0.0);
  const auto adv = compute_gae(rewards, values, 0.0, 1.0, 1.0);
  const auto ret = compute_returns(rewards, 1.0);
  for (std::size_t t = 0; t < rewards.size(); ++t) CHECK(adv[t] == ret[t]);
}

TEST_CASE("compute_gae with lam=0 is the one-step TD residual") {
  const std::vector<double> rewards{1.0, 2.0, 3.0};
  const std::vector<double> values{0.5, -0.25, 1.5};
  const double terminal = 0.75;
  const double gamma = 0.9;
  const auto adv = compute_gae(rewards, values, terminal, gamma, 0.0);
  CHECK(adv[0] == doctest::Approx(rewards[0] + gamma * values[1] - values[0]).epsilon(1e-15));
  CHECK(adv[1] == doctest::Approx(rewards[1] + gamma * values[2] - values[1]).epsilon(1e-15));
  CHECK(adv[2] == doctest::Approx(rewards[2] + gamma * terminal - values[2]).epsilon(1e-15));
}

TEST_CASE("compute_gae equals the explicit double sum on random episodes") {
  std::mt19937_64 rng(17);
  for (int episode = 0; episode < 100; ++episode) {
    const std::size_t t_len = 1 + rng() % 10;
    std::vector<double> rewards(t_len);
    std::vector<double> values(t_len);
    for (double& r : rewards) r = testutil::uniform(rng, -3.0, 3.0);
    for (double& v : values) v = testutil::uniform(rng, -2.0, 2.0);
    const double terminal = testutil::uniform(rng, -1.0, 1.0);
    const double gamma = testutil::uniform(rng, 0.0, 1.0);
    const double lam = testutil::uniform(rng, 0.0, 1.0);

    const auto fast = compute_gae(rewards, values, terminal, gamma, lam);
    const auto slow = gae_double_sum(rewards, values, terminal, gamma, lam);
    for (std::size_t t = 0; t < t_len; ++t) CHECK(std::abs(fast[t] - slow[t]) < 1e-10);
  }
  CHECK_THROWS_AS(compute_gae({1.0}, {0.0, 0.0}, 0.0, 1.0, 1.0), ShapeError);
}

TEST_CASE("whiten centers and scales; constant input maps to zeros") {
  std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
  whiten(xs);
  double mean = 0.0;
  double var = 0.0;
  for (double x : xs) mean += x;
  mean /= 4.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::sqrt(var / 4.0) == doctest::Approx(1.0).epsilon(1e-6));

  std::vector<double> flat{2.5, 2.5, 2.5};
  whiten(flat);
  CHECK(flat == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("ppo surrogate at theta_old equals -mean(advantage)") {
  const PolicyDims dims = tiny_dims(4);
  const auto params = PolicyParams::init_random(dims, 3);
  std::vector<PolicySample> batch;
  std::mt19937_64 rng(11);
  double adv_sum = 0.0;
  for (int i = 0; i < 6; ++i) {
    PolicySample s;
    s.state = testutil::random_state(rng, dims.vocab_size, 3, 2);
    s.action = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(dims.vocab_size));
    s.old_log_prob = log_prob_of(s.state, s.action, params);  // ratio 1
    s.advantage = testutil::uniform(rng, -2.0, 2.0);
    adv_sum += s.advantage;
    batch.push_back(std::move(s));
  }
  const auto lg = ppo_surrogate_loss(batch, params, 0.2);
  CHECK(lg.loss == doctest::Approx(-adv_sum / 6.0).epsilon(1e-12));
}

TEST_CASE("ppo surrogate clip arithmetic") {
  const PolicyDims dims = tiny_dims(4);
  const auto params = PolicyParams::init_random(dims, 9);
  const EpisodeState state{{1, 2}, {}, false};
  const TokenId action = 2;
  const double lp = log_prob_of(state, action, params);

  // ratio 2 with advantage +1: min(2, 1.2) = 1.2
  PolicySample up{state, action, lp - std::log(2.0), 1.0};
  CHECK(ppo_surrogate_loss(std::vector<PolicySample>{up}, params, 0.2).loss ==
        doctest::Approx(-1.2).epsilon(1e-12));

  // ratio 0.5 with advantage -1: min(-0.5, -0.8) = -0.8
  PolicySample down{state, action, lp - std::log(0.5), -1.0};
  CHECK(ppo_surrogate_loss(std::vector<PolicySample>{down}, params, 0.2).loss ==
        doctest::Approx(0.8).epsilon(1e-12));

  PolicySample bad{state, action, lp, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(ppo_surrogate_loss(std::vector<PolicySample>{bad}, params, 0.2), NumericalError);
}

TEST_CASE("ppo surrogate gradient matches central finite differences") {
  const PolicyDims dims = tiny_dims(5);
  std::mt19937_64 rng(23);
  double worst = 0.0;
  for (int point = 0; point < 10; ++point) {
    const auto params = PolicyParams::init_random(dims, 3000 + static_cast<std::uint64_t>(point));
    std::vector<PolicySample> batch;
    for (int i = 0; i < 4; ++i) {
      PolicySample s;
      s.state = testutil::random_state(rng, dims.vocab_size, 3, 2);
      s.action = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(dims.vocab_size));
      // Old log-probs near but not exactly at the current policy keep the
      // ratios away from the clip boundary kinks.
      s.old_log_prob = log_prob_of(s.state, s.action, params) + testutil::uniform(rng, -0.05, 0.05);
      s.advantage = testutil::uniform(rng, -2.0, 2.0);
      batch.push_back(std::move(s));
    }
    const auto got = ppo_surrogate_loss(batch, params, 0.2);
    const auto fd = testutil::finite_diff(params, [&](const PolicyParams& p) {
      return ppo_surrogate_loss(batch, p, 0.2).loss;
    });
    worst = std::max(worst, testutil::max_rel_err(got.grad, fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("value loss: exact fit, clip arithmetic, elementwise oracle") {
  const PolicyDims dims = tiny_dims(4);
  const auto params = PolicyParams::init_random(dims, 29);
  const EpisodeState state{{1, 3}, {2}, false};
  const double v = state_value(state, params);

  // V equals the return and sits inside the clip band.
  ValueSample exact{state, v, v};
  CHECK(value_loss(std::vector<ValueSample>{exact}, params, 0.2).loss == 0.0);

  // V=0netted against old_value=0, G=2, c=0.2: 0.5*max(4,4) = 2.
  auto zeroed = params;
  for (int j = 0; j < dims.hidden_dim; ++j) zeroed.theta[dims.off_value_w() + j] = 0.0;
  zeroed.theta[dims.off_value_b()] = 0.0;
  ValueSample clipped{state, 2.0, 0.0};
  CHECK(value_loss(std::vector<ValueSample>{clipped}, zeroed, 0.2).loss ==
        doctest::Approx(2.0).epsilon(1e-12));

  // Random batch against an independently coded elementwise evaluation.
  std::mt19937_64 rng(31);
  std::vector<ValueSample> batch;
  for (int i = 0; i < 8; ++i) {
    ValueSample s;
    s.state = testutil::random_state(rng, dims.vocab_size, 3, 2);
    s.ret = testutil::uniform(rng, -2.0, 2.0);
    s.old_value = testutil::uniform(rng, -1.0, 1.0);
    batch.push_back(std::move(s));
  }
  const double c = 0.3;
  double expect = 0.0;
  for (const auto& s : batch) {
    const double vi = state_value(s.state, params);
    const double vc = std::clamp(vi, s.old_value - c, s.old_value + c);
    expect += 0.5 * std::max((vi - s.ret) * (vi - s.ret), (vc - s.ret) * (vc - s.ret));
  }
  expect /= static_cast<double>(batch.size());
  CHECK(value_loss(batch, params, c).loss == doctest::Approx(expect).epsilon(1e-12));

  const auto got = value_loss(batch, params, c);
  const auto fd = testutil::finite_diff(
      params, [&](const PolicyParams& p) { return value_loss(batch, p, c).loss; });
  CHECK(testutil::max_rel_err(got.grad, fd) < 1e-4);
}

TEST_CASE("kl penalty arithmetic") {
  CHECK(kl_penalty(-1.7, -1.7, 0.3) == 0.0);
  CHECK(kl_penalty(-0.2, -5.0, 0.0) == 0.0);
  CHECK(kl_penalty(-1.0, -1.5, 0.1) == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("kl controller: fixed point and clipped proportional steps") {
  const KlController ctl{0.2, 6.0, 1};
  CHECK(kl_controller_update(ctl, 6.0).beta == 0.2);
  CHECK(kl_controller_update(ctl, 1e9).beta == doctest::Approx(0.2 * 1.02).epsilon(1e-15));
  CHECK(kl_controller_update(ctl, 0.0).beta == doctest::Approx(0.2 * 0.98).epsilon(1e-15));
  CHECK(kl_controller_update(KlController{0.0, 6.0, 1}, 12.0).beta == 0.0);
  CHECK_THROWS_AS(kl_controller_update(ctl, std::nan("")), NumericalError);
}

TEST_CASE("adam first step moves by roughly lr in the gradient direction") {
  const PolicyDims dims = tiny_dims(3);
  auto params = PolicyParams::init_random(dims, 41);
  const auto before = params.theta;
  std::vector<double> grad(params.theta.size(), 0.0);
  grad[0] = 0.5;
  grad[1] = -2.0;
  AdamState adam(params.theta.size());
  adam_step(params, grad, 1e-3, adam);
  // With fresh moments, m_hat=g and v_hat=g^2, so the step is lr*g/(|g|+eps).
  CHECK(params.theta[0] == doctest::Approx(before[0] - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(params.theta[1] == doctest::Approx(before[1] + 1e-3).epsilon(1e-9));
  CHECK(params.theta[2] == before[2]);
}

namespace {

// Hand-built bandit batch: T=1, fixed prompt, reward favoring token 1.
std::vector<Trajectory> bandit_batch(const PolicyParams& params, int n, double alpha1) {
  std::vector<Trajectory> batch;
  const EpisodeState start{{1}, {}, false};
  for (int i = 0; i < n; ++i) {
    const TokenId action = i % 3 == 0 ? 0 : 1;  // both actions present
    Transition tr;
    tr.state = start;
    tr.action = action;
    tr.next_state = start;
    tr.next_state.generated.push_back(action);
    tr.next_state.done = true;
    tr.log_prob = log_prob_of(start, action, params);
    tr.value = state_value(start, params);

    Trajectory traj;
    traj.transitions.push_back(std::move(tr));
    traj.rewards.intrinsic = {0.0};
    traj.rewards.extrinsic = action == 1 ? 1.0 : 0.0;
    traj.rewards.combined = {alpha1 * traj.rewards.extrinsic};
    batch.push_back(std::move(traj));
  }
  return batch;
}

}  // namespace

TEST_CASE("ppo_update on a bandit raises the rewarded token's probability") {
  PolicyDims dims = tiny_dims(2);
  auto params = PolicyParams::init_random(dims, 47);
  const auto ref = clone_frozen(params);
  const EpisodeState start{{1}, {}, false};
  const double p1_before = action_distribution(start, params, 1.0)[1];

  TrainConfig cfg;
  cfg.gamma = 1.0;
  cfg.lam = 1.0;
  cfg.kl_init = 0.0;  // pure bandit signal
  cfg.learning_rate = 1e-2;
  cfg.ppo_epochs = 1;
  cfg.minibatch_size = 16;

  auto batch = bandit_batch(params, 16, cfg.alpha1);

  // Exact one-step gradient sign oracle: at theta_old all ratios are 1, so
  // d(loss)/d(logit_b[1]) = -mean(A_i * (1[a_i==1] - p1)) which must be
  // negative for whitened advantages favoring token 1.
  std::vector<double> adv;
  for (const auto& traj : batch) adv.push_back(traj.rewards.combined[0]);
  whiten(adv);
  std::vector<PolicySample> samples;
  double expect_lb1 = 0.0;
  const double p1 = action_distribution(start, params, 1.0)[1];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& tr = batch[i].transitions[0];
    samples.push_back({tr.state, tr.action, tr.log_prob, adv[i]});
    const double indicator = tr.action == 1 ? 1.0 : 0.0;
    expect_lb1 += -adv[i] * (indicator - p1) / static_cast<double>(batch.size());
  }
  const auto lg = ppo_surrogate_loss(samples, params, cfg.clip_ratio);
  CHECK(lg.grad[dims.off_logit_b() + 1] == doctest::Approx(expect_lb1).epsilon(1e-10));
  CHECK(expect_lb1 < 0.0);

  AdamState adam(params.theta.size());
  KlController kl{cfg.kl_init, cfg.kl_target, 1};
  ppo_update(batch, params, ref, cfg, adam, kl, 123);
  const double p1_after = action_distribution(start, params, 1.0)[1];
  CHECK(p1_after > p1_before);
}

TEST_CASE("ppo_update with constant advantages only moves the value path") {
  PolicyDims dims = tiny_dims(3);
  auto params = PolicyParams::init_random(dims, 53);
  const auto ref = clone_frozen(params);
  const auto before = params.theta;

  // Identical trajectories: advantages whiten to exactly zero.
  std::vector<Trajectory> batch;
  const EpisodeState start{{2}, {}, false};
  for (int i = 0; i < 4; ++i) {
    Transition tr;
    tr.state = start;
    tr.action = 1;
    tr.next_state = start;
    tr.next_state.generated.push_back(1);
    tr.next_state.done = true;
    tr.log_prob = log_prob_of(start, 1, params);
    tr.value = state_value(start, params);
    Trajectory traj;
    traj.transitions.push_back(std::move(tr));
    traj.rewards.intrinsic = {0.0};
    traj.rewards.extrinsic = 1.0;
    traj.rewards.combined = {1.0};
    batch.push_back(std::move(traj));
  }

  TrainConfig cfg;
  cfg.kl_init = 0.0;
  cfg.ppo_epochs = 1;
  AdamState adam(params.theta.size());
  KlController kl{0.0, 6.0, 1};
  ppo_update(batch, params, ref, cfg, adam, kl, 7);

  // The logit head is untouched by the value loss.
  for (std::size_t i = dims.off_logit_w(); i < dims.off_value_w(); ++i) {
    CHECK(params.theta[i] == before[i]);
  }
  CHECK(params.theta[dims.off_value_b()] != before[dims.off_value_b()]);
}

TEST_CASE("ppo_update is deterministic given identical seeds") {
  PolicyDims dims = tiny_dims(4);
  const auto init = PolicyParams::init_random(dims, 59);
  const auto ref = clone_frozen(init);

  TrainConfig cfg;
  cfg.minibatch_size = 2;
  auto run = [&]() {
    auto params = init;
    AdamState adam(params.theta.size());
    KlController kl{cfg.kl_init, cfg.kl_target, 1};
    std::mt19937_64 rng(3);
    std::vector<Trajectory> batch;
    for (int i = 0; i < 6; ++i) {
      SamplerConfig sampler;
      sampler.max_new_tokens = 4;
      auto traj = generate({1, 2}, params, sampler, 100 + static_cast<std::uint64_t>(i));
      traj.rewards.intrinsic.assign(traj.length(), 0.25);
      traj.rewards.extrinsic = testutil::uniform(rng, -1.0, 1.0);
      traj.rewards.combined.assign(traj.length(), 0.05);
      traj.rewards.combined.back() += traj.rewards.extrinsic;
      batch.push_back(std::move(traj));
    }
    ppo_update(batch, params, ref, cfg, adam, kl, 777);
    return params.theta;
  };

  const auto a = run();
  const auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("monte carlo return matches exact enumeration on the tiny MDP") {
  // |vocab|=2, T=3, fixed prompt; reward 1 when the bigram "b b" appears in
  // the generated text, granted at the final step.
  PolicyDims dims;
  dims.vocab_size = 2;
  dims.embed_dim = 3;
  dims.hidden_dim = 4;
  dims.window = 3;
  const auto params = PolicyParams::init_random(dims, 61);
  const std::vector<TokenId> prompt{1};

  auto scores = [](const std::vector<TokenId>& gen) {
    for (std::size_t i = 0; i + 1 < gen.size(); ++i) {
      if (gen[i] == 1 && gen[i + 1] == 1) return 1.0;
    }
    return 0.0;
  };

  // Exact J by enumerating all 8 trajectories.
  double exact = 0.0;
  for (int bits = 0; bits < 8; ++bits) {
    std::vector<TokenId> gen{static_cast<TokenId>(bits & 1), static_cast<TokenId>((bits >> 1) & 1),
                             static_cast<TokenId>((bits >> 2) & 1)};
    EpisodeState state{prompt, {}, false};
    double prob = 1.0;
    for (TokenId a : gen) {
      prob *= action_distribution(state, params, 1.0)[static_cast<std::size_t>(a)];
      state.generated.push_back(a);
    }
    exact += prob * scores(gen);
  }

  SamplerConfig sampler;
  sampler.min_new_tokens = 3;
  sampler.max_new_tokens = 3;
  const int n = 50000;
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto traj = generate(prompt, params, sampler, derive_seed(404, static_cast<std::uint64_t>(i)));
    std::vector<TokenId> gen;
    for (const auto& tr : traj.transitions) gen.push_back(tr.action);
    const double r = scores(gen);
    sum += r;
    sum_sq += r * r;
  }
  const double mc = sum / n;
  const double var = (sum_sq / n - mc * mc) * n / (n - 1.0);
  const double se = std::sqrt(var / n);
  CHECK(std::abs(mc - exact) <= 3.0 * se);
}

TEST_CASE("config validation rejects bad ranges") {
  TrainConfig cfg;
  cfg.gamma = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.ppo_epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_ablation("extrinsic-only") == Ablation::kExtrinsicOnly);
  CHECK_THROWS_AS(parse_ablation("bogus"), ConfigError);
}
