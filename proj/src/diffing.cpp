#include "xcoder/diffing.hpp"

#include <sstream>

#include "xcoder/io_util.hpp"

namespace xcoder {

const char* feature_class_name(FeatureClass c) {
  switch (c) {
    case FeatureClass::BaseOnly: return "base_only";
    case FeatureClass::Shared: return "shared";
    case FeatureClass::FinetunedOnly: return "finetuned_only";
    case FeatureClass::Dead: return "dead";
  }
  return "unknown";
}

std::optional<real> relative_norm(const CrosscoderParams& p, std::size_t k) {
  if (k >= p.d_crosscoder) {
    throw InvalidInputError("relative_norm: feature index out of range");
  }
  const real nb = p.decoder_column_norm(ModelSide::Base, k);
  const real nr = p.decoder_column_norm(ModelSide::Reasoning, k);
  if (nb < real(1e-12) && nr < real(1e-12)) return std::nullopt;
  return nr / (nb + nr);
}

FeatureClass classify(std::optional<real> r, ClassThresholds thresholds) {
  if (!r.has_value()) return FeatureClass::Dead;
  if (*r < 0 || *r > 1) {
    throw InvalidInputError("classify: relative norm outside [0, 1]");
  }
  if (*r < thresholds.base_only) return FeatureClass::BaseOnly;
  if (*r > thresholds.finetuned_only) return FeatureClass::FinetunedOnly;
  return FeatureClass::Shared;
}

double NormDiffReport::fraction(FeatureClass c) const {
  const std::size_t live = live_count();
  if (live == 0) return 0;
  switch (c) {
    case FeatureClass::BaseOnly: return double(count_base_only) / live;
    case FeatureClass::Shared: return double(count_shared) / live;
    case FeatureClass::FinetunedOnly:
      return double(count_finetuned_only) / live;
    case FeatureClass::Dead: break;
  }
  return 0;
}

NormDiffReport class_histogram(const CrosscoderParams& p,
                               const std::vector<std::size_t>& subset,
                               ClassThresholds thresholds) {
  NormDiffReport report;
  report.features.reserve(subset.size());
  for (const std::size_t k : subset) {
    FeatureNormRecord rec;
    rec.feature = k;
    rec.r = relative_norm(p, k);
    rec.cls = classify(rec.r, thresholds);
    switch (rec.cls) {
      case FeatureClass::BaseOnly: ++report.count_base_only; break;
      case FeatureClass::Shared: ++report.count_shared; break;
      case FeatureClass::FinetunedOnly: ++report.count_finetuned_only; break;
      case FeatureClass::Dead: ++report.count_dead; break;
    }
    report.features.push_back(rec);
  }
  return report;
}

NormDiffReport class_histogram(const CrosscoderParams& p,
                               ClassThresholds thresholds) {
  std::vector<std::size_t> all(p.d_crosscoder);
  for (std::size_t k = 0; k < p.d_crosscoder; ++k) all[k] = k;
  return class_histogram(p, all, thresholds);
}

std::string norm_diff_table(const NormDiffReport& report) {
  std::ostringstream out;
  out << "feature_id\tr\tclass\n";
  for (const auto& rec : report.features) {
    out << rec.feature << '\t';
    if (rec.r.has_value()) out << format_real(*rec.r);
    out << '\t' << feature_class_name(rec.cls) << '\n';
  }
  return out.str();
}

}  // namespace xcoder
