#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xcoder/crosscoder.hpp"

namespace xcoder {

enum class FeatureClass { BaseOnly, Shared, FinetunedOnly, Dead };

const char* feature_class_name(FeatureClass c);

struct ClassThresholds {
  real base_only = 0.1;   // r below this is base-only
  real finetuned_only = 0.9;  // r above this is finetuned-only
};

// Relative decoder norm r = |decR_k| / (|decB_k| + |decR_k|); nullopt (Dead)
// when both column norms are below 1e-12.
std::optional<real> relative_norm(const CrosscoderParams& p, std::size_t k);

FeatureClass classify(std::optional<real> r,
                      ClassThresholds thresholds = {});

struct FeatureNormRecord {
  std::size_t feature = 0;
  std::optional<real> r;
  FeatureClass cls = FeatureClass::Dead;
};

struct NormDiffReport {
  std::vector<FeatureNormRecord> features;  // in subset order
  std::size_t count_base_only = 0;
  std::size_t count_shared = 0;
  std::size_t count_finetuned_only = 0;
  std::size_t count_dead = 0;

  std::size_t live_count() const {
    return count_base_only + count_shared + count_finetuned_only;
  }
  // Fractions over live (non-dead) features; dead ones are reported apart.
  double fraction(FeatureClass c) const;
};

// Per-class histogram over the given feature subset (all features when the
// subset is empty-by-default overload is used).
NormDiffReport class_histogram(const CrosscoderParams& p,
                               const std::vector<std::size_t>& subset,
                               ClassThresholds thresholds = {});
NormDiffReport class_histogram(const CrosscoderParams& p,
                               ClassThresholds thresholds = {});

// Delimited export: feature_id, r, class. Dead features print an empty r.
std::string norm_diff_table(const NormDiffReport& report);

}  // namespace xcoder
