#ifndef DENSERL_REWARD_HPP_
#define DENSERL_REWARD_HPP_

#include <string>
#include <utility>
#include <vector>

#include "denserl/core.hpp"
#include "denserl/rlcore.hpp"

namespace denserl {

/// A critic-identified span: a verbatim quote of the policy output with a
/// label and a signed unit value.
struct SpanAnnotation {
  std::string text;
  std::string label;
  double value = 0.0;
};

struct AlignResult {
  std::vector<double> intrinsic;  // one entry per generated token
  int discarded_spans = 0;        // spans with no occurrence in the output
};

/// Projects span annotations onto per-token intrinsic rewards. Each span is
/// matched at its first case-insensitive verbatim occurrence in output_text;
/// every token whose character range overlaps the match accumulates the
/// span's value. Unmatched spans are dropped and counted, never fatal.
AlignResult align_spans(const std::string& output_text,
                        const std::vector<std::pair<int, int>>& token_offsets,
                        const std::vector<SpanAnnotation>& spans);

/// Weighted combination r_t = alpha1 * r_ex * [t == T-1] + alpha2 * r_in[t].
/// Ablations zero out the respective raw component before weighting.
RewardVector combine_rewards(std::vector<double> intrinsic, double extrinsic, double alpha1,
                             double alpha2, Ablation ablation);

}  // namespace denserl

#endif  // DENSERL_REWARD_HPP_
