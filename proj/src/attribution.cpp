#include "xcoder/attribution.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "xcoder/io_util.hpp"

namespace xcoder {

Vector approx_attribution(const CrosscoderParams& cc, const Vector& grad,
                          const Vector& f) {
  if (grad.size() != cc.d_model || f.size() != cc.d_crosscoder) {
    throw InvalidInputError("approx_attribution: shape mismatch");
  }
  Vector scores(cc.d_crosscoder, 0);
  const real s = cc.input_scale_reasoning;
  for (std::size_t r = 0; r < cc.d_model; ++r) {
    const real* row = cc.dec_reasoning.data.data() + r * cc.d_crosscoder;
    const real gr = grad[r] * s;
    for (std::size_t k = 0; k < cc.d_crosscoder; ++k) {
      scores[k] += gr * row[k];
    }
  }
  for (std::size_t k = 0; k < cc.d_crosscoder; ++k) scores[k] *= f[k];
  return scores;
}

namespace {

struct AblationContext {
  Vector a_base;
  Vector a_reasoning;
  Vector f;
  real baseline_metric = 0;
};

real metric_of_patched(const ModelPair& pair, std::span<const int> tokens,
                       const HookPoint& hook, const WaitSet& wait,
                       const Vector& payload) {
  const Tensor2D logits = patched_forward(pair.reasoning, tokens, hook,
                                          PatchMode::Replace, payload);
  const Vector probs = softmax(Vector(logits.row(logits.rows - 1).begin(),
                                      logits.row(logits.rows - 1).end()));
  return wait_metric(probs, wait);
}

AblationContext make_ablation_context(const ModelPair& pair,
                                      const CrosscoderParams& cc,
                                      std::span<const int> tokens,
                                      const HookPoint& hook,
                                      const WaitSet& wait) {
  if (tokens.empty() || hook.position != tokens.size() - 1) {
    throw InvalidInputError(
        "exact_ablation: tokens must end at the ablation position");
  }
  AblationContext ctx;
  ctx.a_base = capture_residual(pair.base, tokens, hook);
  ctx.a_reasoning = capture_residual(pair.reasoning, tokens, hook);
  ctx.f = encode(cc, ctx.a_base, ctx.a_reasoning);
  // Error-preserving baseline: reconstruction + error == the clean residual.
  ctx.baseline_metric =
      metric_of_patched(pair, tokens, hook, wait, ctx.a_reasoning);
  return ctx;
}

// Payload for do(f_k <- 0): a_R - f_k * s_R * decR_k.
Vector ablated_payload(const CrosscoderParams& cc, const AblationContext& ctx,
                       std::size_t k) {
  Vector payload = ctx.a_reasoning;
  const real w = ctx.f[k] * cc.input_scale_reasoning;
  for (std::size_t r = 0; r < cc.d_model; ++r) {
    payload[r] -= w * cc.dec_reasoning.at(r, k);
  }
  return payload;
}

}  // namespace

ExactAblationScore exact_ablation(const ModelPair& pair,
                                  const CrosscoderParams& cc,
                                  std::span<const int> tokens,
                                  const HookPoint& hook, const WaitSet& wait,
                                  std::size_t k) {
  if (k >= cc.d_crosscoder) {
    throw InvalidInputError("exact_ablation: feature index out of range");
  }
  const AblationContext ctx =
      make_ablation_context(pair, cc, tokens, hook, wait);
  const real ablated =
      metric_of_patched(pair, tokens, hook, wait, ablated_payload(cc, ctx, k));
  return {k, ctx.baseline_metric - ablated};
}

Vector exact_ablation_all(const ModelPair& pair, const CrosscoderParams& cc,
                          std::span<const int> tokens, const HookPoint& hook,
                          const WaitSet& wait) {
  const AblationContext ctx =
      make_ablation_context(pair, cc, tokens, hook, wait);
  Vector scores(cc.d_crosscoder, 0);
  for (std::size_t k = 0; k < cc.d_crosscoder; ++k) {
    if (ctx.f[k] == 0) continue;  // identical passes by construction
    const real ablated = metric_of_patched(pair, tokens, hook, wait,
                                           ablated_payload(cc, ctx, k));
    scores[k] = ctx.baseline_metric - ablated;
  }
  return scores;
}

AttributionReport attribute_dataset(const ModelPair& pair,
                                    const CrosscoderParams& cc,
                                    const std::vector<WaitPrefix>& prefixes,
                                    std::size_t hook_layer, const WaitSet& wait,
                                    std::size_t top_k,
                                    const std::string& dataset_id) {
  if (prefixes.empty()) {
    throw InvalidInputError("attribute_dataset: empty prefix list");
  }
  AttributionReport report;
  report.dataset_id = dataset_id;
  report.n_examples = prefixes.size();
  report.mean_scores.assign(cc.d_crosscoder, 0);

  for (const auto& prefix : prefixes) {
    if (prefix.tokens.empty()) {
      throw InvalidInputError("attribute_dataset: empty prefix tokens for " +
                              prefix.source_id);
    }
    const HookPoint hook{hook_layer, prefix.tokens.size() - 1};
    const Vector a_base = capture_residual(pair.base, prefix.tokens, hook);
    const Vector a_reasoning =
        capture_residual(pair.reasoning, prefix.tokens, hook);
    const Vector f = encode(cc, a_base, a_reasoning);
    const Vector grad =
        wait_metric_residual_gradient(pair.reasoning, prefix.tokens, hook, wait);
    const Vector scores = approx_attribution(cc, grad, f);
    for (std::size_t k = 0; k < cc.d_crosscoder; ++k) {
      report.mean_scores[k] += scores[k];
    }
  }
  const real inv_n = real(1) / real(prefixes.size());
  for (auto& v : report.mean_scores) v *= inv_n;

  std::tie(report.top, report.bottom) =
      select_top_bottom(report.mean_scores, top_k);
  return report;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> select_top_bottom(
    const Vector& mean_scores, std::size_t k) {
  const std::size_t n = mean_scores.size();
  if (k > n / 2) {
    throw InvalidInputError("select_top_bottom: k exceeds half the features");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (mean_scores[a] != mean_scores[b]) {
      return mean_scores[a] > mean_scores[b];
    }
    return a < b;
  });
  std::vector<std::size_t> top(order.begin(),
                               order.begin() + static_cast<std::ptrdiff_t>(k));
  // Bottom k from the remainder, ascending; keeps the lists disjoint even
  // under ties spanning the cut.
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(k),
                                order.end());
  std::sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
    if (mean_scores[a] != mean_scores[b]) {
      return mean_scores[a] < mean_scores[b];
    }
    return a < b;
  });
  std::vector<std::size_t> bottom(
      rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(k));
  return {std::move(top), std::move(bottom)};
}

std::string attribution_table(const AttributionReport& report) {
  std::vector<std::size_t> order(report.mean_scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (report.mean_scores[a] != report.mean_scores[b]) {
      return report.mean_scores[a] > report.mean_scores[b];
    }
    return a < b;
  });
  std::vector<std::size_t> rank(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i;

  std::ostringstream out;
  out << "feature_id\tmean_mhat\trank\n";
  for (std::size_t kf = 0; kf < report.mean_scores.size(); ++kf) {
    out << kf << '\t' << format_real(report.mean_scores[kf]) << '\t'
        << rank[kf] << '\n';
  }
  return out.str();
}

}  // namespace xcoder
