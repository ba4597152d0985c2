#include "denserl/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>

namespace denserl {

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void fill_window(const EpisodeState& state, int window, std::vector<TokenId>& out) {
  out.assign(static_cast<std::size_t>(window), Vocabulary::kUnk);
  const auto np = static_cast<long>(state.prompt.size());
  const auto ng = static_cast<long>(state.generated.size());
  long pos = np + ng - 1;
  for (long slot = window - 1; slot >= 0 && pos >= 0; --slot, --pos) {
    out[static_cast<std::size_t>(slot)] =
        pos < np ? state.prompt[static_cast<std::size_t>(pos)]
                 : state.generated[static_cast<std::size_t>(pos - np)];
  }
}

std::vector<double> softmax(const std::vector<double>& logits, double temperature) {
  std::vector<double> probs(logits.size());
  double hi = -std::numeric_limits<double>::infinity();
  for (double l : logits) hi = std::max(hi, l / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] / temperature - hi);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

double log_sum_exp(const std::vector<double>& logits) {
  double hi = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - hi);
  return hi + std::log(sum);
}

}  // namespace

PolicyParams PolicyParams::init_random(const PolicyDims& dims, std::uint64_t seed) {
  PolicyParams p;
  p.dims = dims;
  p.theta.assign(dims.n_params(), 0.0);
  std::mt19937_64 rng(seed);
  auto fill_uniform = [&](std::size_t off, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) p.theta[off + i] = 0.2 * uniform01(rng) - 0.1;
  };
  fill_uniform(dims.off_embed(), static_cast<std::size_t>(dims.vocab_size) * dims.embed_dim);
  fill_uniform(dims.off_trunk_w(), static_cast<std::size_t>(dims.input_dim()) * dims.hidden_dim);
  fill_uniform(dims.off_logit_w(), static_cast<std::size_t>(dims.hidden_dim) * dims.vocab_size);
  fill_uniform(dims.off_value_w(), static_cast<std::size_t>(dims.hidden_dim));
  return p;
}

PolicyParams clone_frozen(const PolicyParams& params) { return params; }

std::uint64_t params_checksum(const PolicyParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix(&params.dims, sizeof(params.dims));
  mix(params.theta.data(), params.theta.size() * sizeof(double));
  return h;
}

namespace {
constexpr char kParamsMagic[8] = {'d', 'r', 'l', 'p', 'a', 'r', 'm', '1'};
}

void save_params(std::ostream& out, const PolicyParams& params) {
  out.write(kParamsMagic, sizeof(kParamsMagic));
  std::uint32_t dims[4] = {
      static_cast<std::uint32_t>(params.dims.vocab_size),
      static_cast<std::uint32_t>(params.dims.embed_dim),
      static_cast<std::uint32_t>(params.dims.hidden_dim),
      static_cast<std::uint32_t>(params.dims.window),
  };
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  std::uint64_t count = params.theta.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(params.theta.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw Error("failed to write policy parameters");
}

PolicyParams load_params(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kParamsMagic, sizeof(magic)) != 0) {
    throw ConfigError("bad policy parameter header");
  }
  std::uint32_t dims[4];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  PolicyParams p;
  p.dims.vocab_size = static_cast<int>(dims[0]);
  p.dims.embed_dim = static_cast<int>(dims[1]);
  p.dims.hidden_dim = static_cast<int>(dims[2]);
  p.dims.window = static_cast<int>(dims[3]);
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in || count != p.dims.n_params()) throw ConfigError("policy parameter count mismatch");
  p.theta.resize(count);
  in.read(reinterpret_cast<char*>(p.theta.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ConfigError("truncated policy parameter block");
  return p;
}

void policy_forward(const EpisodeState& state, const PolicyParams& params, PolicyWorkspace& ws) {
  const auto& d = params.dims;
  fill_window(state, d.window, ws.window);

  ws.input.resize(static_cast<std::size_t>(d.input_dim()));
  for (int w = 0; w < d.window; ++w) {
    const TokenId tok = ws.window[static_cast<std::size_t>(w)];
    for (int k = 0; k < d.embed_dim; ++k) {
      ws.input[static_cast<std::size_t>(w) * d.embed_dim + k] = params.emb(tok, k);
    }
  }

  ws.hidden.assign(static_cast<std::size_t>(d.hidden_dim), 0.0);
  const double* tw = params.theta.data() + d.off_trunk_w();
  for (int i = 0; i < d.input_dim(); ++i) {
    const double xi = ws.input[static_cast<std::size_t>(i)];
    const double* row = tw + static_cast<std::size_t>(i) * d.hidden_dim;
    for (int j = 0; j < d.hidden_dim; ++j) ws.hidden[static_cast<std::size_t>(j)] += xi * row[j];
  }
  for (int j = 0; j < d.hidden_dim; ++j) {
    ws.hidden[static_cast<std::size_t>(j)] = std::tanh(ws.hidden[static_cast<std::size_t>(j)] + params.trunk_b(j));
  }

  ws.logits.assign(static_cast<std::size_t>(d.vocab_size), 0.0);
  const double* lw = params.theta.data() + d.off_logit_w();
  for (int j = 0; j < d.hidden_dim; ++j) {
    const double hj = ws.hidden[static_cast<std::size_t>(j)];
    const double* row = lw + static_cast<std::size_t>(j) * d.vocab_size;
    for (int a = 0; a < d.vocab_size; ++a) ws.logits[static_cast<std::size_t>(a)] += hj * row[a];
  }
  for (int a = 0; a < d.vocab_size; ++a) ws.logits[static_cast<std::size_t>(a)] += params.logit_b(a);
}

double value_from_workspace(const PolicyParams& params, const PolicyWorkspace& ws) {
  const auto& d = params.dims;
  double v = params.value_b();
  for (int j = 0; j < d.hidden_dim; ++j) v += params.value_w(j) * ws.hidden[static_cast<std::size_t>(j)];
  return v;
}

void policy_backward(const PolicyParams& params, const PolicyWorkspace& ws,
                     const std::vector<double>& dlogits, double dvalue,
                     std::vector<double>& grad) {
  const auto& d = params.dims;
  auto& dh = const_cast<PolicyWorkspace&>(ws).dhidden;
  auto& dx = const_cast<PolicyWorkspace&>(ws).dinput;
  dh.assign(static_cast<std::size_t>(d.hidden_dim), 0.0);
  dx.assign(static_cast<std::size_t>(d.input_dim()), 0.0);

  if (!dlogits.empty()) {
    double* glb = grad.data() + d.off_logit_b();
    double* glw = grad.data() + d.off_logit_w();
    const double* lw = params.theta.data() + d.off_logit_w();
    for (int a = 0; a < d.vocab_size; ++a) glb[a] += dlogits[static_cast<std::size_t>(a)];
    for (int j = 0; j < d.hidden_dim; ++j) {
      const double hj = ws.hidden[static_cast<std::size_t>(j)];
      double acc = 0.0;
      double* grow = glw + static_cast<std::size_t>(j) * d.vocab_size;
      const double* row = lw + static_cast<std::size_t>(j) * d.vocab_size;
      for (int a = 0; a < d.vocab_size; ++a) {
        const double dl = dlogits[static_cast<std::size_t>(a)];
        grow[a] += hj * dl;
        acc += row[a] * dl;
      }
      dh[static_cast<std::size_t>(j)] += acc;
    }
  }

  if (dvalue != 0.0) {
    grad[d.off_value_b()] += dvalue;
    double* gvw = grad.data() + d.off_value_w();
    for (int j = 0; j < d.hidden_dim; ++j) {
      gvw[j] += dvalue * ws.hidden[static_cast<std::size_t>(j)];
      dh[static_cast<std::size_t>(j)] += dvalue * params.value_w(j);
    }
  }

  double* gtb = grad.data() + d.off_trunk_b();
  double* gtw = grad.data() + d.off_trunk_w();
  const double* tw = params.theta.data() + d.off_trunk_w();
  for (int j = 0; j < d.hidden_dim; ++j) {
    const double hj = ws.hidden[static_cast<std::size_t>(j)];
    dh[static_cast<std::size_t>(j)] *= 1.0 - hj * hj;  // tanh'
    gtb[j] += dh[static_cast<std::size_t>(j)];
  }
  for (int i = 0; i < d.input_dim(); ++i) {
    const double xi = ws.input[static_cast<std::size_t>(i)];
    double acc = 0.0;
    double* grow = gtw + static_cast<std::size_t>(i) * d.hidden_dim;
    const double* row = tw + static_cast<std::size_t>(i) * d.hidden_dim;
    for (int j = 0; j < d.hidden_dim; ++j) {
      const double dz = dh[static_cast<std::size_t>(j)];
      grow[j] += xi * dz;
      acc += row[j] * dz;
    }
    dx[static_cast<std::size_t>(i)] += acc;
  }

  double* gemb = grad.data() + d.off_embed();
  for (int w = 0; w < d.window; ++w) {
    const TokenId tok = ws.window[static_cast<std::size_t>(w)];
    double* grow = gemb + static_cast<std::size_t>(tok) * d.embed_dim;
    for (int k = 0; k < d.embed_dim; ++k) grow[k] += dx[static_cast<std::size_t>(w) * d.embed_dim + k];
  }
}

std::vector<double> features(const EpisodeState& state, const PolicyParams& params) {
  PolicyWorkspace ws;
  policy_forward(state, params, ws);
  return ws.hidden;
}

std::vector<double> action_distribution(const EpisodeState& state, const PolicyParams& params,
                                        double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  PolicyWorkspace ws;
  policy_forward(state, params, ws);
  return softmax(ws.logits, temperature);
}

LogProbGrad log_prob_and_grad(const EpisodeState& state, TokenId action, const PolicyParams& params) {
  const auto& d = params.dims;
  if (action < 0 || action >= d.vocab_size) throw ShapeError("action out of range");
  PolicyWorkspace ws;
  policy_forward(state, params, ws);

  LogProbGrad out;
  out.log_prob = ws.logits[static_cast<std::size_t>(action)] - log_sum_exp(ws.logits);
  out.grad.assign(d.n_params(), 0.0);

  std::vector<double> dlogits = softmax(ws.logits, 1.0);
  for (double& p : dlogits) p = -p;
  dlogits[static_cast<std::size_t>(action)] += 1.0;
  policy_backward(params, ws, dlogits, 0.0, out.grad);
  return out;
}

double log_prob_of(const EpisodeState& state, TokenId action, const PolicyParams& params) {
  PolicyWorkspace ws;
  policy_forward(state, params, ws);
  return ws.logits[static_cast<std::size_t>(action)] - log_sum_exp(ws.logits);
}

double state_value(const EpisodeState& state, const PolicyParams& params) {
  PolicyWorkspace ws;
  policy_forward(state, params, ws);
  return value_from_workspace(params, ws);
}

ValueGrad value_and_grad(const EpisodeState& state, const PolicyParams& params) {
  PolicyWorkspace ws;
  policy_forward(state, params, ws);
  ValueGrad out;
  out.value = value_from_workspace(params, ws);
  out.grad.assign(params.dims.n_params(), 0.0);
  policy_backward(params, ws, {}, 1.0, out.grad);
  return out;
}

namespace {

// Smallest prefix of the probability-sorted vocabulary whose mass reaches
// top_p, renormalized. Ties break on token index.
TokenId sample_nucleus(const std::vector<double>& probs, double top_p, std::mt19937_64& rng) {
  const std::size_t n = probs.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)]) {
      return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
    }
    return a < b;
  });

  double mass = 0.0;
  std::size_t keep = n;
  for (std::size_t i = 0; i < n; ++i) {
    mass += probs[static_cast<std::size_t>(order[i])];
    if (mass >= top_p - 1e-12) {
      keep = i + 1;
      break;
    }
  }

  double u = uniform01(rng) * mass;
  double cum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    cum += probs[static_cast<std::size_t>(order[i])];
    if (u < cum) return order[i];
  }
  return order[keep - 1];
}

}  // namespace

Trajectory generate(const std::vector<TokenId>& prompt, const PolicyParams& params,
                    const SamplerConfig& sampler, std::uint64_t seed) {
  if (prompt.empty()) throw ShapeError("generate requires a non-empty prompt");
  if (!(sampler.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (sampler.top_p <= 0.0 || sampler.top_p > 1.0) throw ConfigError("top_p must be in (0, 1]");
  if (sampler.min_new_tokens < 1 || sampler.min_new_tokens > sampler.max_new_tokens) {
    throw ConfigError("require 1 <= min_new_tokens <= max_new_tokens");
  }

  std::mt19937_64 rng(seed);
  PolicyWorkspace ws;
  Trajectory traj;
  EpisodeState state{prompt, {}, false};

  while (true) {
    policy_forward(state, params, ws);
    const double value = value_from_workspace(params, ws);
    const double lse = log_sum_exp(ws.logits);

    std::vector<double> probs = softmax(ws.logits, sampler.temperature);
    const int emitted_after = static_cast<int>(state.generated.size()) + 1;
    if (sampler.stop_token && emitted_after < sampler.min_new_tokens) {
      double stop_mass = probs[static_cast<std::size_t>(*sampler.stop_token)];
      probs[static_cast<std::size_t>(*sampler.stop_token)] = 0.0;
      for (double& p : probs) p /= (1.0 - stop_mass);
    }

    const TokenId action = sample_nucleus(probs, sampler.top_p, rng);

    Transition tr;
    tr.state = state;
    tr.action = action;
    tr.log_prob = ws.logits[static_cast<std::size_t>(action)] - lse;
    tr.value = value;

    EpisodeState next = state;
    next.generated.push_back(action);
    const bool hit_stop = sampler.stop_token && action == *sampler.stop_token;
    const bool full = static_cast<int>(next.generated.size()) >= sampler.max_new_tokens;
    next.done = hit_stop || full;
    tr.next_state = next;
    traj.transitions.push_back(std::move(tr));
    state = std::move(next);
    if (state.done) break;
  }

  const std::size_t t_len = traj.transitions.size();
  traj.rewards.intrinsic.assign(t_len, 0.0);
  traj.rewards.combined.assign(t_len, 0.0);
  traj.rewards.extrinsic = 0.0;
  traj.terminal_value = 0.0;
  return traj;
}

}  // namespace denserl
