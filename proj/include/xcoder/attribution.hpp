#pragma once

#include <string>
#include <vector>

#include "xcoder/crosscoder.hpp"
#include "xcoder/toy_model.hpp"
#include "xcoder/wait_dataset.hpp"

namespace xcoder {

// Linear approximation of per-feature ablation effects: the reasoning
// decoder transposed against the metric gradient, gated elementwise by the
// latent activations. With unit input scales this is exactly
//   mhat = Wdec_R^T grad ⊙ f;
// a trained input scale s_R enters as s_R * Wdec_R, the raw-space effect of
// one latent unit.
Vector approx_attribution(const CrosscoderParams& cc, const Vector& grad,
                          const Vector& f);

struct ExactAblationScore {
  std::size_t feature = 0;
  real value = 0;  // baseline metric minus ablated metric
};

// Exact zero ablation of feature k at the last token, error-preserving: the
// reasoning residual is replaced by reconstruction + reconstruction error,
// which is the identity for the baseline pass and differs by exactly
// f_k * s_R * decR_k when the latent is zeroed.
ExactAblationScore exact_ablation(const ModelPair& pair,
                                  const CrosscoderParams& cc,
                                  std::span<const int> tokens,
                                  const HookPoint& hook, const WaitSet& wait,
                                  std::size_t k);

// All features at once; one baseline pass plus one pass per feature.
Vector exact_ablation_all(const ModelPair& pair, const CrosscoderParams& cc,
                          std::span<const int> tokens, const HookPoint& hook,
                          const WaitSet& wait);

struct AttributionReport {
  std::string dataset_id;
  std::size_t n_examples = 0;
  Vector mean_scores;               // per-feature mean mhat
  std::vector<std::size_t> top;     // descending mean, ties by ascending id
  std::vector<std::size_t> bottom;  // ascending mean over the rest
};

// Per-prefix: encode clean paired activations at the last token, take the
// metric gradient in the reasoning model, apply the linear approximation;
// report per-feature means over the dataset.
AttributionReport attribute_dataset(const ModelPair& pair,
                                    const CrosscoderParams& cc,
                                    const std::vector<WaitPrefix>& prefixes,
                                    std::size_t hook_layer, const WaitSet& wait,
                                    std::size_t top_k = 50,
                                    const std::string& dataset_id = "");

// Stable top/bottom-k selection; ties break toward the lower feature id and
// the bottom list is drawn from features outside the top list, so the two
// are always disjoint. Requires k <= n/2.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> select_top_bottom(
    const Vector& mean_scores, std::size_t k = 50);

// Delimited export: feature_id, mean_mhat, rank (rank 0 = largest mean).
std::string attribution_table(const AttributionReport& report);

}  // namespace xcoder
