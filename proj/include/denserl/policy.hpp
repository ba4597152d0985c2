#ifndef DENSERL_POLICY_HPP_
#define DENSERL_POLICY_HPP_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "denserl/core.hpp"

namespace denserl {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Shape of the fixed-window autoregressive policy: the last `window` tokens
/// of (prompt + generated) are embedded, concatenated, and passed through one
/// tanh hidden layer shared by the logit head and the value head.
struct PolicyDims {
  int vocab_size = 0;
  int embed_dim = 16;
  int hidden_dim = 32;
  int window = 4;

  int input_dim() const { return embed_dim * window; }

  std::size_t off_embed() const { return 0; }
  std::size_t off_trunk_w() const {
    return off_embed() + static_cast<std::size_t>(vocab_size) * embed_dim;
  }
  std::size_t off_trunk_b() const {
    return off_trunk_w() + static_cast<std::size_t>(input_dim()) * hidden_dim;
  }
  std::size_t off_logit_w() const { return off_trunk_b() + hidden_dim; }
  std::size_t off_logit_b() const {
    return off_logit_w() + static_cast<std::size_t>(hidden_dim) * vocab_size;
  }
  std::size_t off_value_w() const { return off_logit_b() + vocab_size; }
  std::size_t off_value_b() const { return off_value_w() + hidden_dim; }
  std::size_t n_params() const { return off_value_b() + 1; }

  bool operator==(const PolicyDims&) const = default;
};

/// All parameters live in one flat vector so cloning, optimizer state,
/// finite differencing, and checkpointing operate on a single block.
struct PolicyParams {
  PolicyDims dims;
  std::vector<double> theta;

  /// Embeddings and weights i.i.d. uniform in [-0.1, 0.1], biases zero.
  static PolicyParams init_random(const PolicyDims& dims, std::uint64_t seed);

  double emb(int tok, int k) const { return theta[dims.off_embed() + static_cast<std::size_t>(tok) * dims.embed_dim + k]; }
  double trunk_w(int i, int j) const { return theta[dims.off_trunk_w() + static_cast<std::size_t>(i) * dims.hidden_dim + j]; }
  double trunk_b(int j) const { return theta[dims.off_trunk_b() + j]; }
  double logit_w(int j, int a) const { return theta[dims.off_logit_w() + static_cast<std::size_t>(j) * dims.vocab_size + a]; }
  double logit_b(int a) const { return theta[dims.off_logit_b() + a]; }
  double value_w(int j) const { return theta[dims.off_value_w() + j]; }
  double value_b() const { return theta[dims.off_value_b()]; }
};

/// Deep copy used as the frozen reference for the KL penalty.
PolicyParams clone_frozen(const PolicyParams& params);

/// FNV-1a over the raw parameter bytes; used to assert read-only access.
std::uint64_t params_checksum(const PolicyParams& params);

/// Binary serialization with a version header; round trip is bit-exact.
void save_params(std::ostream& out, const PolicyParams& params);
PolicyParams load_params(std::istream& in);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Scratch buffers for one forward/backward pass; reusable across calls.
struct PolicyWorkspace {
  std::vector<TokenId> window;
  std::vector<double> input;   // window * embed_dim
  std::vector<double> hidden;  // tanh activations
  std::vector<double> logits;  // vocab_size
  std::vector<double> dhidden;
  std::vector<double> dinput;
};

/// Runs the trunk and both heads for one state. Deterministic.
void policy_forward(const EpisodeState& state, const PolicyParams& params, PolicyWorkspace& ws);

double value_from_workspace(const PolicyParams& params, const PolicyWorkspace& ws);

/// Accumulates d(loss)/d(theta) into `grad` given upstream gradients on the
/// logits (may be empty for none) and on the value head output. `ws` must
/// hold the matching forward pass.
void policy_backward(const PolicyParams& params, const PolicyWorkspace& ws,
                     const std::vector<double>& dlogits, double dvalue,
                     std::vector<double>& grad);

// ---------------------------------------------------------------------------
// Public policy operations
// ---------------------------------------------------------------------------

/// Hidden-layer features of a state (trunk output).
std::vector<double> features(const EpisodeState& state, const PolicyParams& params);

/// softmax(logits / temperature) over the vocabulary.
std::vector<double> action_distribution(const EpisodeState& state, const PolicyParams& params,
                                        double temperature);

struct LogProbGrad {
  double log_prob = 0.0;
  std::vector<double> grad;  // d log pi(a|s) / d theta
};

LogProbGrad log_prob_and_grad(const EpisodeState& state, TokenId action, const PolicyParams& params);

double log_prob_of(const EpisodeState& state, TokenId action, const PolicyParams& params);

double state_value(const EpisodeState& state, const PolicyParams& params);

struct ValueGrad {
  double value = 0.0;
  std::vector<double> grad;
};

ValueGrad value_and_grad(const EpisodeState& state, const PolicyParams& params);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SamplerConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int min_new_tokens = 1;
  int max_new_tokens = 20;
  std::optional<TokenId> stop_token;
};

/// Nucleus sampling until stop_token or max_new_tokens. The stop token is
/// suppressed (renormalized away) while emitting it would leave fewer than
/// min_new_tokens. Records the policy's own (temperature-1) log-prob and the
/// value estimate at every step. Deterministic given the seed.
Trajectory generate(const std::vector<TokenId>& prompt, const PolicyParams& params,
                    const SamplerConfig& sampler, std::uint64_t seed);

}  // namespace denserl

#endif  // DENSERL_POLICY_HPP_
