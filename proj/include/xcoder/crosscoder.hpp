#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xcoder/activation_store.hpp"
#include "xcoder/numerics.hpp"

namespace xcoder {

enum class ModelSide { Base, Reasoning };

// Paired sparse crosscoder. One shared encoder bias is stored: the paired
// per-model biases enter the encoder pre-activation as a sum, so only the
// sum is identifiable.
//
// input_scale_* are optional per-model normalization factors. Public
// encode/decode operate on raw activations and apply the scales internally;
// with scales of 1 the maps are exactly
//   f  = ReLU(Wenc_B a_B + Wenc_R a_R + b_enc)
//   a' = Wdec_i f + b_dec_i
struct CrosscoderParams {
  std::size_t d_model = 0;
  std::size_t d_crosscoder = 0;
  Tensor2D enc_base;            // d_crosscoder x d_model
  Tensor2D enc_reasoning;       // d_crosscoder x d_model
  Vector enc_bias;              // d_crosscoder
  Tensor2D dec_base;            // d_model x d_crosscoder
  Tensor2D dec_reasoning;       // d_model x d_crosscoder
  Vector dec_bias_base;         // d_model
  Vector dec_bias_reasoning;    // d_model
  real input_scale_base = 1;
  real input_scale_reasoning = 1;

  static CrosscoderParams zeros(std::size_t d_model, std::size_t d_crosscoder);

  const Tensor2D& decoder(ModelSide side) const {
    return side == ModelSide::Base ? dec_base : dec_reasoning;
  }
  real input_scale(ModelSide side) const {
    return side == ModelSide::Base ? input_scale_base : input_scale_reasoning;
  }
  // Euclidean norm of decoder column k on the given side.
  real decoder_column_norm(ModelSide side, std::size_t k) const;
  Vector decoder_column(ModelSide side, std::size_t k) const;

  void check_consistent() const;  // throws InvalidInputError on shape drift
};

// f = ReLU(Wenc_B (a_B/s_B) + Wenc_R (a_R/s_R) + b_enc); entries >= 0.
Vector encode(const CrosscoderParams& p, std::span<const real> a_base,
              std::span<const real> a_reasoning);

// Raw-space reconstruction s_i (Wdec_i f + b_dec_i).
Vector decode(const CrosscoderParams& p, std::span<const real> f,
              ModelSide side);

struct LossBreakdown {
  real total = 0;
  real mse_base = 0;       // unnormalized squared error sum, model B
  real mse_reasoning = 0;  // same, model R
  real sparsity = 0;       // sum_k f_k (|decB_k| + |decR_k|), lambda applied
};

// Training loss at one token pair: reconstruction squared errors in the
// normalized input space plus the decoder-norm-weighted activation penalty,
// scaled by sparsity_coeff.
LossBreakdown loss(const CrosscoderParams& p, std::span<const real> a_base,
                   std::span<const real> a_reasoning, real sparsity_coeff);

struct CrosscoderGrads {
  Tensor2D enc_base;
  Tensor2D enc_reasoning;
  Vector enc_bias;
  Tensor2D dec_base;
  Tensor2D dec_reasoning;
  Vector dec_bias_base;
  Vector dec_bias_reasoning;

  static CrosscoderGrads zeros(std::size_t d_model, std::size_t d_crosscoder);
};

// Analytic gradients of the mean per-example loss over the batch.
// The ReLU subgradient at exactly 0 is taken as 0, and the gradient of a
// zero decoder column's norm is taken as 0; both are pinned so results are
// bit-reproducible. If `active` is given it is OR-ed with the batch's
// per-feature activity mask. Returns the mean loss breakdown.
LossBreakdown loss_gradients(const CrosscoderParams& p, const Tensor2D& base,
                             const Tensor2D& reasoning, real sparsity_coeff,
                             CrosscoderGrads& grads,
                             std::vector<std::uint8_t>* active = nullptr);

struct TrainConfig {
  std::size_t d_crosscoder = 0;
  real sparsity_coeff = 5.0;
  real learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 0;
  bool normalize_activations = false;
  real holdout_fraction = 0.05;
  std::size_t calibration_tokens = 4096;

  void validate() const;
};

struct StepLoss {
  real total = 0;
  real mse_base = 0;
  real mse_reasoning = 0;
  real sparsity = 0;
};

struct TrainReport {
  std::vector<StepLoss> steps;
  real holdout_initial = 0;
  real holdout_final = 0;
  real dead_fraction = 0;    // features inactive over the last epoch
  double wall_clock_seconds = 0;  // informational; never part of artifacts
};

// Seeded Adam over shuffled batches of the manifest's tokens. Holds out the
// trailing fraction of tokens for the before/after loss comparison. Throws
// TrainingError with the failing step if the loss goes non-finite.
std::pair<CrosscoderParams, TrainReport> train(const TrainConfig& config,
                                               const DatasetManifest& data);

// Same, for an already-loaded dataset.
std::pair<CrosscoderParams, TrainReport> train(const TrainConfig& config,
                                               const PairedActivations& data);

// Checkpoint container "XCCK": header (magic, version u32, d_model u32,
// d_crosscoder u32), then f32 LE blocks in the order enc_base,
// enc_reasoning, enc_bias, dec_base, dec_reasoning, dec_bias_base,
// dec_bias_reasoning. Input scales live in a JSON snapshot at <path>.json.
void write_crosscoder(const std::filesystem::path& path,
                      const CrosscoderParams& params);
CrosscoderParams read_crosscoder(const std::filesystem::path& path);

inline constexpr char kCrosscoderMagic[4] = {'X', 'C', 'C', 'K'};
inline constexpr std::uint32_t kCrosscoderVersion = 1;

}  // namespace xcoder
