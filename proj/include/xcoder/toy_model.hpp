#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xcoder/numerics.hpp"

namespace xcoder {

// Byte-level tokenizer over a fixed 64-character alphabet plus one dedicated
// token per wait surface form, so the wait-token set is well defined without
// subword ambiguity. Encoding is greedy longest-match, left to right.
class ToyTokenizer {
 public:
  ToyTokenizer();

  std::vector<int> encode(const std::string& text) const;
  std::string decode(std::span<const int> tokens) const;
  const std::string& token_text(int id) const;
  int vocab_size() const { return static_cast<int>(pieces_.size()); }

  const std::vector<int>& wait_token_ids() const { return wait_ids_; }
  static const std::vector<std::string>& wait_surface_forms();

 private:
  std::vector<std::string> pieces_;   // id -> text
  std::vector<int> wait_ids_;
  int char_ids_[256];
};

// Token ids realizing the wait surface forms.
struct WaitSet {
  std::vector<int> ids;  // sorted, unique

  bool contains(int id) const;
  static WaitSet from_tokenizer(const ToyTokenizer& tok);
};

struct ToyConfig {
  std::uint32_t vocab_size = 68;
  std::uint32_t d_model = 32;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 128;
  std::uint32_t max_seq = 512;
  double rms_eps = 1e-6;

  std::uint32_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct LayerParams {
  Vector attn_norm_gain;  // d_model
  Tensor2D wq, wk, wv, wo;  // d_model x d_model
  Vector mlp_norm_gain;   // d_model
  Tensor2D w1;            // d_ff x d_model
  Vector b1;              // d_ff
  Tensor2D w2;            // d_model x d_ff
  Vector b2;              // d_model
};

// Pre-norm decoder-only transformer: RMSNorm, causal attention, SiLU MLP,
// learned absolute positions, final RMSNorm before the unembedding.
struct ToyTransformerParams {
  ToyConfig config;
  Tensor2D embedding;      // vocab x d_model
  Tensor2D positional;     // max_seq x d_model
  std::vector<LayerParams> layers;
  Vector final_norm_gain;  // d_model
  Tensor2D unembedding;    // vocab x d_model

  static ToyTransformerParams zeros(const ToyConfig& cfg);
};

ToyTransformerParams random_toy_model(const ToyConfig& cfg,
                                      std::uint64_t seed);

// Residual stream position: immediately after block `layer`.
struct HookPoint {
  std::size_t layer = 0;
  std::size_t position = 0;
};

enum class PatchMode { Replace, Add };

// Mutates the residual row of `position` right after the hook layer's block.
using ResidualHook =
    std::function<void(std::size_t position, std::span<real> residual)>;

// Everything the metric-gradient backward pass needs from a clean forward.
struct ForwardTrace {
  std::vector<Tensor2D> resid_in;  // per layer: T x d_model residual inputs
  std::vector<Tensor2D> keys;      // per layer: T x d_model
  std::vector<Tensor2D> values;    // per layer: T x d_model
  Tensor2D resid_final;            // T x d_model, after the last block
};

// Full causal forward pass; returns per-position logits (T x vocab).
// With a hook, the residual after block `hook_layer` is passed to it for
// every position before upper layers consume it.
Tensor2D forward(const ToyTransformerParams& p, std::span<const int> tokens,
                 int hook_layer = -1, const ResidualHook& hook = nullptr,
                 ForwardTrace* trace = nullptr);

// Residual stream value at the hook point of a clean pass.
Vector capture_residual(const ToyTransformerParams& p,
                        std::span<const int> tokens, const HookPoint& hook);

// Forward with the hook-point residual replaced by / incremented with
// `payload` at the hook position only.
Tensor2D patched_forward(const ToyTransformerParams& p,
                         std::span<const int> tokens, const HookPoint& hook,
                         PatchMode mode, std::span<const real> payload);

Vector next_token_distribution(const ToyTransformerParams& p,
                               std::span<const int> tokens);

// Total next-token probability mass on the wait set.
real wait_metric(const Vector& probs, const WaitSet& wait);

// Exact reverse-mode gradient of wait_metric(next_token_distribution(...))
// with respect to the residual stream at (hook.layer, last token). Only the
// blocks above the hook participate; the hook position must be the final
// token of the sequence.
Vector wait_metric_residual_gradient(const ToyTransformerParams& p,
                                     std::span<const int> tokens,
                                     const HookPoint& hook,
                                     const WaitSet& wait);

struct SamplingConfig {
  double temperature = 0.6;
  double top_p = 0.95;
  std::size_t max_tokens = 200;
  std::uint64_t seed = 0;
};

// One draw from `probs` after temperature and nucleus truncation.
// temperature <= 0 is the greedy limit (argmax, lowest id on ties).
int sample_token(const Vector& probs, double temperature, double top_p,
                 RngState& rng);

struct GenerateResult {
  std::vector<int> tokens;         // generated continuation only
  std::vector<real> metric_trace;  // wait metric before each sampled token
};

// Seeded autoregressive sampling. When `steer` is set it is applied to the
// residual at `hook_layer` for every position >= steer_start (default: the
// last prompt token) in every pass, prompt processing included.
GenerateResult generate(const ToyTransformerParams& p,
                        std::span<const int> prompt,
                        const SamplingConfig& sampling,
                        const WaitSet* metric_set = nullptr,
                        int hook_layer = -1,
                        const ResidualHook& steer = nullptr,
                        std::optional<std::size_t> steer_start = std::nullopt);

// Next-token distribution of the carrier prompt with the residual at
// (hook_layer, insert_position) replaced by `vector`.
Vector patchscope(const ToyTransformerParams& p,
                  std::span<const int> carrier_prompt, std::size_t hook_layer,
                  std::span<const real> vector, std::size_t insert_position);

// Model checkpoint "XTOY": magic, version u32, config words, f64 rms_eps,
// then f32 LE blocks in declaration order.
void write_toy_model(const std::filesystem::path& path,
                     const ToyTransformerParams& params);
ToyTransformerParams read_toy_model(const std::filesystem::path& path);

inline constexpr char kToyMagic[4] = {'X', 'T', 'O', 'Y'};
inline constexpr std::uint32_t kToyVersion = 1;

// Base/finetuned stand-in pair; the tokenizer is fixed by construction.
struct ModelPair {
  ToyTransformerParams base;
  ToyTransformerParams reasoning;
  ToyTokenizer tokenizer;
  std::size_t hook_layer = 2;
};

// Base drawn at `seed`; reasoning = base plus a small seeded weight
// perturbation, so the two streams stay correlated like a finetune.
ModelPair random_model_pair(const ToyConfig& cfg, std::uint64_t seed,
                            real finetune_scale = 0.05);

// Pair manifest JSON next to two XTOY checkpoints.
void write_model_pair(const std::filesystem::path& json_path,
                      const ModelPair& pair);
ModelPair read_model_pair(const std::filesystem::path& json_path);

// Analytic test fixture: every block above the hook layer is the identity
// (zeroed output projections), the reasoning model injects a data-dependent
// multiple of `promote_direction` into the hook-layer residual, and the
// designated wait token reads out promote minus suppress through the
// unembedding. Gradients, ablations and steering all have closed forms.
struct LinearBypassFixture {
  ModelPair pair;
  Vector promote_direction;   // unit norm
  Vector suppress_direction;  // unit norm, orthogonal to promote
  int wait_token = 0;         // the targeted wait token id
  real readout_gain = 0;      // unembedding coefficient on the directions
};

LinearBypassFixture make_linear_bypass_pair(std::uint64_t seed);

}  // namespace xcoder
