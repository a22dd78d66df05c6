#include "xcoder/crosscoder.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "xcoder/io_util.hpp"

namespace xcoder {

using nlohmann::json;

CrosscoderParams CrosscoderParams::zeros(std::size_t d_model,
                                         std::size_t d_crosscoder) {
  CrosscoderParams p;
  p.d_model = d_model;
  p.d_crosscoder = d_crosscoder;
  p.enc_base = Tensor2D(d_crosscoder, d_model);
  p.enc_reasoning = Tensor2D(d_crosscoder, d_model);
  p.enc_bias = Vector(d_crosscoder, 0);
  p.dec_base = Tensor2D(d_model, d_crosscoder);
  p.dec_reasoning = Tensor2D(d_model, d_crosscoder);
  p.dec_bias_base = Vector(d_model, 0);
  p.dec_bias_reasoning = Vector(d_model, 0);
  return p;
}

real CrosscoderParams::decoder_column_norm(ModelSide side,
                                           std::size_t k) const {
  const Tensor2D& dec = decoder(side);
  real acc = 0;
  for (std::size_t r = 0; r < dec.rows; ++r) {
    const real v = dec.at(r, k);
    acc += v * v;
  }
  return std::sqrt(acc);
}

Vector CrosscoderParams::decoder_column(ModelSide side, std::size_t k) const {
  if (k >= d_crosscoder) {
    throw InvalidInputError("decoder_column: feature index out of range");
  }
  const Tensor2D& dec = decoder(side);
  Vector col(d_model);
  for (std::size_t r = 0; r < d_model; ++r) col[r] = dec.at(r, k);
  return col;
}

void CrosscoderParams::check_consistent() const {
  if (d_crosscoder == 0) {
    throw InvalidInputError("crosscoder: d_crosscoder must be >= 1");
  }
  const bool ok = enc_base.rows == d_crosscoder && enc_base.cols == d_model &&
                  enc_reasoning.rows == d_crosscoder &&
                  enc_reasoning.cols == d_model &&
                  enc_bias.size() == d_crosscoder &&
                  dec_base.rows == d_model && dec_base.cols == d_crosscoder &&
                  dec_reasoning.rows == d_model &&
                  dec_reasoning.cols == d_crosscoder &&
                  dec_bias_base.size() == d_model &&
                  dec_bias_reasoning.size() == d_model;
  if (!ok) throw InvalidInputError("crosscoder: inconsistent parameter shapes");
}

namespace {

void check_input_dims(const CrosscoderParams& p, std::size_t base_dim,
                      std::size_t reasoning_dim) {
  if (base_dim != p.d_model || reasoning_dim != p.d_model) {
    throw InvalidInputError("crosscoder: activation dim != d_model (" +
                            std::to_string(base_dim) + "/" +
                            std::to_string(reasoning_dim) + " vs " +
                            std::to_string(p.d_model) + ")");
  }
}

// Pre-activation z = Wenc_B nB + Wenc_R nR + b with normalized inputs.
void encode_preact(const CrosscoderParams& p, std::span<const real> a_base,
                   std::span<const real> a_reasoning, Vector& z) {
  const real inv_b = real(1) / p.input_scale_base;
  const real inv_r = real(1) / p.input_scale_reasoning;
  z.assign(p.d_crosscoder, 0);
  for (std::size_t k = 0; k < p.d_crosscoder; ++k) {
    const real* wb = p.enc_base.data.data() + k * p.d_model;
    const real* wr = p.enc_reasoning.data.data() + k * p.d_model;
    real acc = p.enc_bias[k];
    for (std::size_t c = 0; c < p.d_model; ++c) {
      acc += wb[c] * (a_base[c] * inv_b);
    }
    for (std::size_t c = 0; c < p.d_model; ++c) {
      acc += wr[c] * (a_reasoning[c] * inv_r);
    }
    z[k] = acc;
  }
}

// Normalized-space reconstruction Wdec f + b_dec.
Vector decode_normalized(const CrosscoderParams& p, std::span<const real> f,
                         ModelSide side) {
  const Tensor2D& dec = p.decoder(side);
  const Vector& bias =
      side == ModelSide::Base ? p.dec_bias_base : p.dec_bias_reasoning;
  Vector out(p.d_model);
  for (std::size_t r = 0; r < p.d_model; ++r) {
    const real* row = dec.data.data() + r * p.d_crosscoder;
    real acc = bias[r];
    for (std::size_t k = 0; k < p.d_crosscoder; ++k) acc += row[k] * f[k];
    out[r] = acc;
  }
  return out;
}

}  // namespace

Vector encode(const CrosscoderParams& p, std::span<const real> a_base,
              std::span<const real> a_reasoning) {
  check_input_dims(p, a_base.size(), a_reasoning.size());
  Vector z;
  encode_preact(p, a_base, a_reasoning, z);
  for (auto& v : z) v = v > 0 ? v : 0;
  return z;
}

Vector decode(const CrosscoderParams& p, std::span<const real> f,
              ModelSide side) {
  if (f.size() != p.d_crosscoder) {
    throw InvalidInputError("decode: latent dim != d_crosscoder");
  }
  Vector out = decode_normalized(p, f, side);
  const real s = p.input_scale(side);
  if (s != 1) {
    for (auto& v : out) v *= s;
  }
  return out;
}

LossBreakdown loss(const CrosscoderParams& p, std::span<const real> a_base,
                   std::span<const real> a_reasoning, real sparsity_coeff) {
  if (sparsity_coeff < 0) {
    throw InvalidInputError("loss: sparsity coefficient must be >= 0");
  }
  check_input_dims(p, a_base.size(), a_reasoning.size());
  const Vector f = encode(p, a_base, a_reasoning);
  const Vector rec_b = decode_normalized(p, f, ModelSide::Base);
  const Vector rec_r = decode_normalized(p, f, ModelSide::Reasoning);

  LossBreakdown out;
  const real inv_b = real(1) / p.input_scale_base;
  const real inv_r = real(1) / p.input_scale_reasoning;
  for (std::size_t c = 0; c < p.d_model; ++c) {
    const real eb = rec_b[c] - a_base[c] * inv_b;
    const real er = rec_r[c] - a_reasoning[c] * inv_r;
    out.mse_base += eb * eb;
    out.mse_reasoning += er * er;
  }
  for (std::size_t k = 0; k < p.d_crosscoder; ++k) {
    if (f[k] > 0) {
      out.sparsity += f[k] * (p.decoder_column_norm(ModelSide::Base, k) +
                              p.decoder_column_norm(ModelSide::Reasoning, k));
    }
  }
  out.sparsity *= sparsity_coeff;
  out.total = out.mse_base + out.mse_reasoning + out.sparsity;
  return out;
}

CrosscoderGrads CrosscoderGrads::zeros(std::size_t d_model,
                                       std::size_t d_crosscoder) {
  CrosscoderGrads g;
  g.enc_base = Tensor2D(d_crosscoder, d_model);
  g.enc_reasoning = Tensor2D(d_crosscoder, d_model);
  g.enc_bias = Vector(d_crosscoder, 0);
  g.dec_base = Tensor2D(d_model, d_crosscoder);
  g.dec_reasoning = Tensor2D(d_model, d_crosscoder);
  g.dec_bias_base = Vector(d_model, 0);
  g.dec_bias_reasoning = Vector(d_model, 0);
  return g;
}

LossBreakdown loss_gradients(const CrosscoderParams& p, const Tensor2D& base,
                             const Tensor2D& reasoning, real sparsity_coeff,
                             CrosscoderGrads& grads,
                             std::vector<std::uint8_t>* active) {
  if (sparsity_coeff < 0) {
    throw InvalidInputError("loss_gradients: sparsity coefficient must be >= 0");
  }
  if (base.rows != reasoning.rows || base.rows == 0) {
    throw InvalidInputError("loss_gradients: batch blocks misaligned or empty");
  }
  check_input_dims(p, base.cols, reasoning.cols);

  const std::size_t n = base.rows;
  const std::size_t d = p.d_model;
  const std::size_t dc = p.d_crosscoder;
  const real inv_n = real(1) / real(n);
  const real inv_b = real(1) / p.input_scale_base;
  const real inv_r = real(1) / p.input_scale_reasoning;

  grads = CrosscoderGrads::zeros(d, dc);
  LossBreakdown mean_loss;

  // Decoder column norms; the norm gradient of an all-zero column is 0.
  Vector norm_b(dc), norm_r(dc);
  for (std::size_t k = 0; k < dc; ++k) {
    norm_b[k] = p.decoder_column_norm(ModelSide::Base, k);
    norm_r[k] = p.decoder_column_norm(ModelSide::Reasoning, k);
  }

  Vector z, f(dc), dLdf(dc), dLdz(dc);
  Vector nb(d), nr(d), err_b(d), err_r(d);
  for (std::size_t ex = 0; ex < n; ++ex) {
    for (std::size_t c = 0; c < d; ++c) {
      nb[c] = base.at(ex, c) * inv_b;
      nr[c] = reasoning.at(ex, c) * inv_r;
    }
    encode_preact(p, base.row(ex), reasoning.row(ex), z);
    for (std::size_t k = 0; k < dc; ++k) f[k] = z[k] > 0 ? z[k] : 0;
    if (active) {
      for (std::size_t k = 0; k < dc; ++k) {
        if (f[k] > 0) (*active)[k] = 1;
      }
    }

    // err_i = Wdec_i f + b_dec_i - n_i
    for (std::size_t c = 0; c < d; ++c) {
      const real* row_b = p.dec_base.data.data() + c * dc;
      const real* row_r = p.dec_reasoning.data.data() + c * dc;
      real acc_b = p.dec_bias_base[c];
      real acc_r = p.dec_bias_reasoning[c];
      for (std::size_t k = 0; k < dc; ++k) {
        acc_b += row_b[k] * f[k];
        acc_r += row_r[k] * f[k];
      }
      err_b[c] = acc_b - nb[c];
      err_r[c] = acc_r - nr[c];
    }

    real sq_b = 0, sq_r = 0, sp = 0;
    for (std::size_t c = 0; c < d; ++c) {
      sq_b += err_b[c] * err_b[c];
      sq_r += err_r[c] * err_r[c];
    }
    for (std::size_t k = 0; k < dc; ++k) {
      if (f[k] > 0) sp += f[k] * (norm_b[k] + norm_r[k]);
    }
    mean_loss.mse_base += sq_b * inv_n;
    mean_loss.mse_reasoning += sq_r * inv_n;
    mean_loss.sparsity += sparsity_coeff * sp * inv_n;

    // dL/df_k = 2 decB_k . err_b + 2 decR_k . err_r + lambda (|decB_k|+|decR_k|)
    for (std::size_t k = 0; k < dc; ++k) {
      dLdf[k] = sparsity_coeff * (norm_b[k] + norm_r[k]);
    }
    for (std::size_t c = 0; c < d; ++c) {
      const real* row_b = p.dec_base.data.data() + c * dc;
      const real* row_r = p.dec_reasoning.data.data() + c * dc;
      const real two_eb = 2 * err_b[c];
      const real two_er = 2 * err_r[c];
      for (std::size_t k = 0; k < dc; ++k) {
        dLdf[k] += two_eb * row_b[k] + two_er * row_r[k];
      }
    }
    // ReLU mask; the subgradient at exactly 0 is 0.
    for (std::size_t k = 0; k < dc; ++k) dLdz[k] = z[k] > 0 ? dLdf[k] : 0;

    // Decoder gradients: 2 err_i f^T plus the norm penalty direction.
    for (std::size_t c = 0; c < d; ++c) {
      real* gb = grads.dec_base.data.data() + c * dc;
      real* gr = grads.dec_reasoning.data.data() + c * dc;
      const real* row_b = p.dec_base.data.data() + c * dc;
      const real* row_r = p.dec_reasoning.data.data() + c * dc;
      const real two_eb = 2 * err_b[c] * inv_n;
      const real two_er = 2 * err_r[c] * inv_n;
      for (std::size_t k = 0; k < dc; ++k) {
        real gbk = two_eb * f[k];
        real grk = two_er * f[k];
        if (f[k] > 0) {
          const real w = sparsity_coeff * f[k] * inv_n;
          if (norm_b[k] > 0) gbk += w * row_b[k] / norm_b[k];
          if (norm_r[k] > 0) grk += w * row_r[k] / norm_r[k];
        }
        gb[k] += gbk;
        gr[k] += grk;
      }
    }
    for (std::size_t c = 0; c < d; ++c) {
      grads.dec_bias_base[c] += 2 * err_b[c] * inv_n;
      grads.dec_bias_reasoning[c] += 2 * err_r[c] * inv_n;
    }

    // Encoder gradients through the pre-activation.
    for (std::size_t k = 0; k < dc; ++k) {
      const real gz = dLdz[k] * inv_n;
      if (gz == 0) continue;
      real* gb = grads.enc_base.data.data() + k * d;
      real* gr = grads.enc_reasoning.data.data() + k * d;
      for (std::size_t c = 0; c < d; ++c) {
        gb[c] += gz * nb[c];
        gr[c] += gz * nr[c];
      }
      grads.enc_bias[k] += gz;
    }
  }

  mean_loss.total =
      mean_loss.mse_base + mean_loss.mse_reasoning + mean_loss.sparsity;
  return mean_loss;
}

void TrainConfig::validate() const {
  if (d_crosscoder == 0) {
    throw InvalidInputError("train config: d_crosscoder must be >= 1");
  }
  if (sparsity_coeff < 0) {
    throw InvalidInputError("train config: sparsity coefficient must be >= 0");
  }
  if (max_steps == 0) throw InvalidInputError("train config: step budget is 0");
  if (batch_size == 0) throw InvalidInputError("train config: batch size is 0");
  if (holdout_fraction < 0 || holdout_fraction >= 1) {
    throw InvalidInputError("train config: holdout fraction outside [0, 1)");
  }
}

namespace {

// Fixed block order shared by the optimizer and the checkpoint format.
template <typename Params, typename Fn>
void for_each_block(Params& p, Fn&& fn) {
  fn(p.enc_base.data);
  fn(p.enc_reasoning.data);
  fn(p.enc_bias);
  fn(p.dec_base.data);
  fn(p.dec_reasoning.data);
  fn(p.dec_bias_base);
  fn(p.dec_bias_reasoning);
}

real mean_loss_over(const CrosscoderParams& p, const PairedActivations& data,
                    std::uint64_t begin, std::uint64_t end, real lambda) {
  if (end <= begin) return 0;
  real acc = 0;
  for (std::uint64_t i = begin; i < end; ++i) {
    acc += loss(p, data.base.row(static_cast<std::size_t>(i)),
                data.reasoning.row(static_cast<std::size_t>(i)), lambda)
               .total;
  }
  return acc / real(end - begin);
}

}  // namespace

std::pair<CrosscoderParams, TrainReport> train(const TrainConfig& config,
                                               const DatasetManifest& data) {
  return train(config, load_dataset(data, /*with_metadata=*/false));
}

std::pair<CrosscoderParams, TrainReport> train(const TrainConfig& config,
                                               const PairedActivations& data) {
  config.validate();
  if (data.n_tokens() == 0) {
    throw InvalidInputError("train: empty dataset");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = data.d_model;
  const std::size_t dc = config.d_crosscoder;

  // Holdout = trailing fraction in manifest order.
  const std::uint64_t n = data.n_tokens();
  std::uint64_t n_holdout =
      static_cast<std::uint64_t>(std::floor(double(n) * config.holdout_fraction));
  if (n_holdout >= n) n_holdout = 0;
  const std::uint64_t n_train = n - n_holdout;

  // Optional per-model normalization by the calibration batch's mean norm.
  const std::uint64_t n_calib =
      std::min<std::uint64_t>(n_train, config.calibration_tokens);
  real scale_b = 1, scale_r = 1;
  if (config.normalize_activations && n_calib > 0) {
    real acc_b = 0, acc_r = 0;
    for (std::uint64_t i = 0; i < n_calib; ++i) {
      acc_b += norm(data.base.row(static_cast<std::size_t>(i)));
      acc_r += norm(data.reasoning.row(static_cast<std::size_t>(i)));
    }
    scale_b = acc_b / real(n_calib);
    scale_r = acc_r / real(n_calib);
    if (!(scale_b > 0)) scale_b = 1;
    if (!(scale_r > 0)) scale_r = 1;
  }

  RngState rng(config.seed);
  CrosscoderParams params = CrosscoderParams::zeros(d, dc);
  params.input_scale_base = scale_b;
  params.input_scale_reasoning = scale_r;
  const real init_scale = real(1) / std::sqrt(real(d));
  for (auto& v : params.enc_base.data) v = real(rng.normal()) * init_scale;
  for (auto& v : params.enc_reasoning.data) v = real(rng.normal()) * init_scale;
  for (auto& v : params.dec_base.data) v = real(rng.normal()) * init_scale;
  for (auto& v : params.dec_reasoning.data) v = real(rng.normal()) * init_scale;
  // Decoder biases start at the calibration batch's mean normalized activation.
  if (n_calib > 0) {
    for (std::uint64_t i = 0; i < n_calib; ++i) {
      axpy(real(1) / (real(n_calib) * scale_b),
           data.base.row(static_cast<std::size_t>(i)), params.dec_bias_base);
      axpy(real(1) / (real(n_calib) * scale_r),
           data.reasoning.row(static_cast<std::size_t>(i)),
           params.dec_bias_reasoning);
    }
  }

  AdamConfig adam_cfg;
  adam_cfg.learning_rate = config.learning_rate;
  std::vector<AdamState> opt;
  for_each_block(params, [&](Vector& block) {
    opt.emplace_back(block.size(), adam_cfg);
  });

  TrainReport report;
  report.steps.reserve(config.max_steps);
  report.holdout_initial =
      mean_loss_over(params, data, n_train, n, config.sparsity_coeff);

  // The trainer sees raw activations; gradients normalize through the
  // params' input scales, so no dataset copy is needed.
  std::vector<std::uint8_t> active(dc, 0);
  CrosscoderGrads grads = CrosscoderGrads::zeros(d, dc);
  std::vector<Vector*> param_blocks, grad_blocks;
  for_each_block(params, [&](Vector& b) { param_blocks.push_back(&b); });
  for_each_block(grads, [&](Vector& b) { grad_blocks.push_back(&b); });

  std::size_t step = 0;
  while (step < config.max_steps) {
    std::fill(active.begin(), active.end(), 0);  // per-epoch activity
    BatchStream epoch(data, config.batch_size, &rng, 0, n_train);
    while (auto batch = epoch.next()) {
      const LossBreakdown l = loss_gradients(
          params, batch->base, batch->reasoning, config.sparsity_coeff, grads,
          &active);
      if (!std::isfinite(l.total)) {
        throw TrainingError("training loss diverged", static_cast<long>(step));
      }
      for (std::size_t i = 0; i < param_blocks.size(); ++i) {
        adam_step(*param_blocks[i], *grad_blocks[i], opt[i]);
      }
      report.steps.push_back({l.total, l.mse_base, l.mse_reasoning, l.sparsity});
      if (++step >= config.max_steps) break;
    }
  }

  std::size_t dead = 0;
  for (auto a : active) dead += a == 0 ? 1 : 0;
  report.dead_fraction = real(dead) / real(dc);
  report.holdout_final =
      mean_loss_over(params, data, n_train, n, config.sparsity_coeff);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return {std::move(params), std::move(report)};
}

void write_crosscoder(const std::filesystem::path& path,
                      const CrosscoderParams& params) {
  params.check_consistent();
  auto out = open_binary_out(path);
  out.write(kCrosscoderMagic, 4);
  write_le<std::uint32_t>(out, kCrosscoderVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.d_model));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.d_crosscoder));
  for_each_block(params,
                 [&](const Vector& block) { write_f32_block(out, block); });
  if (!out) throw StorageError("write failed: " + path.string());
  out.close();

  json snapshot{{"d_model", params.d_model},
                {"d_crosscoder", params.d_crosscoder},
                {"input_scale_base", params.input_scale_base},
                {"input_scale_reasoning", params.input_scale_reasoning}};
  std::filesystem::path side = path;
  side += ".json";
  write_text_file(side, snapshot.dump(2) + "\n");
}

CrosscoderParams read_crosscoder(const std::filesystem::path& path) {
  auto in = open_binary_in(path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCrosscoderMagic, 4) != 0) {
    throw FormatError("not a crosscoder checkpoint (bad magic): " +
                      path.string());
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCrosscoderVersion) {
    throw FormatError("unsupported crosscoder checkpoint version " +
                      std::to_string(version));
  }
  const auto d = read_le<std::uint32_t>(in);
  const auto dc = read_le<std::uint32_t>(in);
  CrosscoderParams params = CrosscoderParams::zeros(d, dc);
  try {
    for_each_block(params, [&](Vector& block) {
      read_f32_block(in, block.size(), block);
    });
  } catch (const CorruptionError& e) {
    throw CorruptionError(std::string(e.what()) + " in " + path.string());
  }

  std::filesystem::path side = path;
  side += ".json";
  try {
    const json snapshot = json::parse(read_text_file(side));
    params.input_scale_base = snapshot.at("input_scale_base").get<real>();
    params.input_scale_reasoning =
        snapshot.at("input_scale_reasoning").get<real>();
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint snapshot " + side.string() + ": " +
                      e.what());
  }
  for_each_block(params, [&](const Vector& block) {
    require_finite(block, "crosscoder checkpoint");
  });
  return params;
}

}  // namespace xcoder
