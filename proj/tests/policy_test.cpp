#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "denserl/policy.hpp"
#include "test_util.hpp"

using namespace denserl;

namespace {

PolicyDims small_dims(int vocab = 6) {
  PolicyDims d;
  d.vocab_size = vocab;
  d.embed_dim = 3;
  d.hidden_dim = 5;
  d.window = 3;
  return d;
}

void zero_block(PolicyParams& p, std::size_t off, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) p.theta[off + i] = 0.0;
}

}  // namespace

TEST_CASE("features pads short contexts and is deterministic") {
  const auto params = PolicyParams::init_random(small_dims(), 7);
  EpisodeState s{{1, 2}, {}, false};
  const auto f1 = features(s, params);
  const auto f2 = features(s, params);
  CHECK(f1 == f2);

  // A prompt shorter than the window behaves like the same prompt preceded
  // by explicit UNK padding.
  EpisodeState padded{{Vocabulary::kUnk, 1, 2}, {}, false};
  CHECK(features(padded, params) == f1);
}

TEST_CASE("features depend only on the last window tokens") {
  const auto params = PolicyParams::init_random(small_dims(), 3);
  EpisodeState a{{5, 1, 2, 3}, {4}, false};
  EpisodeState b{{2, 1, 2, 3}, {4}, false};  // differs outside the window of 3
  CHECK(features(a, params) == features(b, params));

  EpisodeState c{{5, 1, 2, 4}, {4}, false};  // differs inside the window
  CHECK(features(a, params) != features(c, params));
}

TEST_CASE("action_distribution is uniform for a zero logit head") {
  auto params = PolicyParams::init_random(small_dims(), 11);
  const auto& d = params.dims;
  zero_block(params, d.off_logit_w(), static_cast<std::size_t>(d.hidden_dim) * d.vocab_size);
  zero_block(params, d.off_logit_b(), static_cast<std::size_t>(d.vocab_size));

  const EpisodeState s{{1, 2, 3}, {}, false};
  const auto probs = action_distribution(s, params, 1.0);
  for (double p : probs) CHECK(p == doctest::Approx(1.0 / d.vocab_size).epsilon(1e-12));
}

TEST_CASE("action_distribution approaches uniform at high temperature") {
  const auto params = PolicyParams::init_random(small_dims(), 5);
  const EpisodeState s{{2, 4}, {1}, false};
  const auto probs = action_distribution(s, params, 1e6);
  const double uniform = 1.0 / params.dims.vocab_size;
  for (double p : probs) CHECK(std::abs(p - uniform) < 1e-6);
}

TEST_CASE("action_distribution matches a brute-force softmax") {
  PolicyDims dims = small_dims(8);
  const auto params = PolicyParams::init_random(dims, 21);
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const EpisodeState s = testutil::random_state(rng, dims.vocab_size, 4, 4);
    const double temperature = testutil::uniform(rng, 0.3, 3.0);
    const auto probs = action_distribution(s, params, temperature);

    // Independent elementwise exponential-normalize oracle on raw logits.
    PolicyWorkspace ws;
    policy_forward(s, params, ws);
    double denom = 0.0;
    for (double l : ws.logits) denom += std::exp(l / temperature);
    double total = 0.0;
    for (int a = 0; a < dims.vocab_size; ++a) {
      const double expect = std::exp(ws.logits[static_cast<std::size_t>(a)] / temperature) / denom;
      CHECK(probs[static_cast<std::size_t>(a)] == doctest::Approx(expect).epsilon(1e-10));
      CHECK(probs[static_cast<std::size_t>(a)] > 0.0);
      total += probs[static_cast<std::size_t>(a)];
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("log prob of a uniform policy") {
  PolicyDims dims = small_dims(4);
  auto params = PolicyParams::init_random(dims, 2);
  zero_block(params, dims.off_logit_w(), static_cast<std::size_t>(dims.hidden_dim) * dims.vocab_size);
  zero_block(params, dims.off_logit_b(), static_cast<std::size_t>(dims.vocab_size));
  const EpisodeState s{{1}, {}, false};
  const auto lp = log_prob_and_grad(s, 2, params);
  CHECK(lp.log_prob == doctest::Approx(std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("log-prob gradient matches central finite differences") {
  PolicyDims dims = small_dims();
  std::mt19937_64 rng(1234);
  double worst = 0.0;
  for (int point = 0; point < 10; ++point) {
    const auto params = PolicyParams::init_random(dims, 1000 + static_cast<std::uint64_t>(point));
    const EpisodeState s = testutil::random_state(rng, dims.vocab_size, 3, 3);
    const TokenId action = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(dims.vocab_size));

    const auto got = log_prob_and_grad(s, action, params);
    const auto fd = testutil::finite_diff(
        params, [&](const PolicyParams& p) { return log_prob_of(s, action, p); });
    worst = std::max(worst, testutil::max_rel_err(got.grad, fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("score-function identity: expected log-prob gradient is zero") {
  PolicyDims dims = small_dims();
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    const auto params = PolicyParams::init_random(dims, 500 + static_cast<std::uint64_t>(trial));
    const EpisodeState s = testutil::random_state(rng, dims.vocab_size, 3, 2);
    const auto probs = action_distribution(s, params, 1.0);

    std::vector<double> expectation(params.theta.size(), 0.0);
    for (TokenId a = 0; a < dims.vocab_size; ++a) {
      const auto lp = log_prob_and_grad(s, a, params);
      for (std::size_t i = 0; i < expectation.size(); ++i) {
        expectation[i] += probs[static_cast<std::size_t>(a)] * lp.grad[i];
      }
    }
    for (double v : expectation) CHECK(std::abs(v) < 1e-8);
  }
}

TEST_CASE("value head: zeroed head gives zero and identical states agree") {
  PolicyDims dims = small_dims();
  auto params = PolicyParams::init_random(dims, 8);
  zero_block(params, dims.off_value_w(), static_cast<std::size_t>(dims.hidden_dim));
  params.theta[dims.off_value_b()] = 0.0;
  const EpisodeState s{{1, 2}, {3}, false};
  CHECK(state_value(s, params) == 0.0);

  const auto full = PolicyParams::init_random(dims, 9);
  CHECK(state_value(s, full) == state_value(s, full));
}

TEST_CASE("value gradient matches central finite differences") {
  PolicyDims dims = small_dims();
  std::mt19937_64 rng(4321);
  double worst = 0.0;
  for (int point = 0; point < 10; ++point) {
    const auto params = PolicyParams::init_random(dims, 2000 + static_cast<std::uint64_t>(point));
    const EpisodeState s = testutil::random_state(rng, dims.vocab_size, 3, 3);
    const auto got = value_and_grad(s, params);
    const auto fd = testutil::finite_diff(
        params, [&](const PolicyParams& p) { return state_value(s, p); });
    worst = std::max(worst, testutil::max_rel_err(got.grad, fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("generate: bounds, determinism, and T=1") {
  const auto params = PolicyParams::init_random(small_dims(), 31);
  SamplerConfig sampler;
  sampler.max_new_tokens = 1;
  const auto traj = generate({1, 2}, params, sampler, 42);
  CHECK(traj.length() == 1);
  CHECK(traj.transitions.back().next_state.done);
  CHECK(traj.terminal_value == 0.0);
  CHECK(traj.rewards.combined.size() == 1);

  SamplerConfig longer;
  longer.min_new_tokens = 2;
  longer.max_new_tokens = 7;
  longer.top_p = 0.9;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = generate({3, 1}, params, longer, seed);
    CHECK(a.length() >= 2);
    CHECK(a.length() <= 7);
    const auto b = generate({3, 1}, params, longer, seed);
    REQUIRE(a.length() == b.length());
    for (std::size_t t = 0; t < a.length(); ++t) {
      CHECK(a.transitions[t].action == b.transitions[t].action);
      CHECK(a.transitions[t].log_prob == b.transitions[t].log_prob);
      CHECK(a.transitions[t].value == b.transitions[t].value);
    }
  }

  CHECK_THROWS_AS(generate({}, params, sampler, 0), ShapeError);
}

TEST_CASE("generate transitions append one token at a time") {
  const auto params = PolicyParams::init_random(small_dims(), 13);
  SamplerConfig sampler;
  sampler.max_new_tokens = 6;
  const auto traj = generate({2, 5}, params, sampler, 9);
  for (std::size_t t = 0; t < traj.length(); ++t) {
    const Transition& tr = traj.transitions[t];
    CHECK(tr.state.generated.size() == t);
    REQUIRE(tr.next_state.generated.size() == t + 1);
    CHECK(tr.next_state.generated.back() == tr.action);
  }
  CHECK(traj.transitions.back().next_state.done);
}

TEST_CASE("generate concentrates on a near-deterministic token") {
  PolicyDims dims = small_dims(8);
  auto params = PolicyParams::init_random(dims, 55);
  zero_block(params, dims.off_logit_w(), static_cast<std::size_t>(dims.hidden_dim) * dims.vocab_size);
  zero_block(params, dims.off_logit_b(), static_cast<std::size_t>(dims.vocab_size));
  params.theta[dims.off_logit_b() + 3] = 30.0;  // p(3) ~ 1 - 7e-13

  const EpisodeState s{{1}, {}, false};
  const auto probs = action_distribution(s, params, 1.0);
  CHECK(probs[3] >= 1.0 - 1e-12);

  SamplerConfig sampler;
  sampler.max_new_tokens = 1;
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto traj = generate({1}, params, sampler, seed);
    if (traj.transitions[0].action == 3) ++hits;
  }
  CHECK(hits >= 999);
}

TEST_CASE("generate suppresses the stop token before min_new_tokens") {
  PolicyDims dims = small_dims(5);
  auto params = PolicyParams::init_random(dims, 71);
  zero_block(params, dims.off_logit_w(), static_cast<std::size_t>(dims.hidden_dim) * dims.vocab_size);
  zero_block(params, dims.off_logit_b(), static_cast<std::size_t>(dims.vocab_size));
  params.theta[dims.off_logit_b() + 4] = 25.0;  // the stop token dominates

  SamplerConfig sampler;
  sampler.stop_token = 4;
  sampler.min_new_tokens = 3;
  sampler.max_new_tokens = 10;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto traj = generate({1, 2}, params, sampler, seed);
    CHECK(traj.length() == 3);  // held off until min, then stop fires at once
    for (std::size_t t = 0; t + 1 < traj.length(); ++t) CHECK(traj.transitions[t].action != 4);
    CHECK(traj.transitions.back().action == 4);
  }
}

TEST_CASE("clone_frozen is a deep, idempotent copy") {
  auto params = PolicyParams::init_random(small_dims(), 17);
  const auto frozen = clone_frozen(params);
  const auto frozen2 = clone_frozen(frozen);
  CHECK(frozen.theta == frozen2.theta);

  const EpisodeState s{{1, 3}, {}, false};
  const auto live_before = action_distribution(s, params, 1.0);
  const auto clone_before = action_distribution(s, frozen, 1.0);
  double kl = 0.0;
  for (std::size_t a = 0; a < live_before.size(); ++a) {
    kl += live_before[a] * (std::log(live_before[a]) - std::log(clone_before[a]));
  }
  CHECK(kl == 0.0);

  const std::uint64_t sum_before = params_checksum(frozen);
  for (double& t : params.theta) t += 0.5;
  CHECK(params_checksum(frozen) == sum_before);
  CHECK(action_distribution(s, frozen, 1.0) == clone_before);
}

TEST_CASE("parameter serialization round trip is bit-exact") {
  const auto params = PolicyParams::init_random(small_dims(7), 23);
  std::stringstream buffer;
  save_params(buffer, params);
  const auto loaded = load_params(buffer);
  CHECK(loaded.dims == params.dims);
  REQUIRE(loaded.theta.size() == params.theta.size());
  CHECK(std::memcmp(loaded.theta.data(), params.theta.data(),
                    params.theta.size() * sizeof(double)) == 0);

  std::stringstream bad("not a checkpoint");
  CHECK_THROWS_AS(load_params(bad), ConfigError);
}

TEST_CASE("action_distribution stays a distribution for random params") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    PolicyDims dims = small_dims(2 + static_cast<int>(rng() % 10));
    const auto params = PolicyParams::init_random(dims, rng());
    const EpisodeState s = testutil::random_state(rng, dims.vocab_size, 5, 5);
    const auto probs = action_distribution(s, params, testutil::uniform(rng, 0.1, 5.0));
    double total = 0.0;
    for (double p : probs) {
      CHECK(p > 0.0);
      total += p;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}
