#include "denserl/reward.hpp"

#include <algorithm>
#include <cctype>

namespace denserl {

namespace {

std::string lowercase(const std::string& s) {
  std::string out(s.size(), '\0');
  std::transform(s.begin(), s.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

AlignResult align_spans(const std::string& output_text,
                        const std::vector<std::pair<int, int>>& token_offsets,
                        const std::vector<SpanAnnotation>& spans) {
  AlignResult result;
  result.intrinsic.assign(token_offsets.size(), 0.0);

  const std::string haystack = lowercase(output_text);
  for (const SpanAnnotation& span : spans) {
    if (span.text.empty()) {
      ++result.discarded_spans;
      continue;
    }
    const std::size_t pos = haystack.find(lowercase(span.text));
    if (pos == std::string::npos) {
      ++result.discarded_spans;
      continue;
    }
    const int match_start = static_cast<int>(pos);
    const int match_end = match_start + static_cast<int>(span.text.size());
    for (std::size_t t = 0; t < token_offsets.size(); ++t) {
      const auto [tok_start, tok_end] = token_offsets[t];
      if (tok_start < match_end && match_start < tok_end) {
        result.intrinsic[t] += span.value;
      }
    }
  }
  return result;
}

RewardVector combine_rewards(std::vector<double> intrinsic, double extrinsic, double alpha1,
                             double alpha2, Ablation ablation) {
  if (intrinsic.empty()) throw ShapeError("combine_rewards requires at least one token");

  if (ablation == Ablation::kExtrinsicOnly) {
    std::fill(intrinsic.begin(), intrinsic.end(), 0.0);
  } else if (ablation == Ablation::kIntrinsicOnly) {
    extrinsic = 0.0;
  }

  RewardVector rv;
  rv.extrinsic = extrinsic;
  rv.combined.resize(intrinsic.size());
  const std::size_t last = intrinsic.size() - 1;
  for (std::size_t t = 0; t < intrinsic.size(); ++t) {
    rv.combined[t] = alpha2 * intrinsic[t];
  }
  rv.combined[last] += alpha1 * extrinsic;
  rv.intrinsic = std::move(intrinsic);
  return rv;
}

}  // namespace denserl
