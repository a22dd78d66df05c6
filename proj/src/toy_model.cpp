#include "xcoder/toy_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "xcoder/io_util.hpp"

namespace xcoder {

using nlohmann::json;

namespace {

// 64 single-character pieces; every other character is rejected.
constexpr std::string_view kAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ .!?,=012345";

const std::vector<std::string> kWaitForms = {"Wait", " Wait", " wait", "wait"};

}  // namespace

ToyTokenizer::ToyTokenizer() {
  std::fill(std::begin(char_ids_), std::end(char_ids_), -1);
  for (const char c : kAlphabet) {
    char_ids_[static_cast<unsigned char>(c)] =
        static_cast<int>(pieces_.size());
    pieces_.push_back(std::string(1, c));
  }
  for (const auto& form : kWaitForms) {
    wait_ids_.push_back(static_cast<int>(pieces_.size()));
    pieces_.push_back(form);
  }
}

const std::vector<std::string>& ToyTokenizer::wait_surface_forms() {
  return kWaitForms;
}

std::vector<int> ToyTokenizer::encode(const std::string& text) const {
  // Greedy longest match; the space-prefixed forms are checked first.
  static constexpr std::size_t kMatchOrder[4] = {1, 2, 0, 3};
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (const std::size_t w : kMatchOrder) {
      const std::string& form = kWaitForms[w];
      if (text.compare(i, form.size(), form) == 0) {
        out.push_back(wait_ids_[w]);
        i += form.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const int id = char_ids_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      throw InvalidInputError("tokenizer: character not in alphabet: '" +
                              std::string(1, text[i]) + "'");
    }
    out.push_back(id);
    ++i;
  }
  return out;
}

std::string ToyTokenizer::decode(std::span<const int> tokens) const {
  std::string out;
  for (const int id : tokens) out += token_text(id);
  return out;
}

const std::string& ToyTokenizer::token_text(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw InvalidInputError("tokenizer: token id out of range: " +
                            std::to_string(id));
  }
  return pieces_[id];
}

bool WaitSet::contains(int id) const {
  return std::binary_search(ids.begin(), ids.end(), id);
}

WaitSet WaitSet::from_tokenizer(const ToyTokenizer& tok) {
  WaitSet w;
  w.ids = tok.wait_token_ids();
  std::sort(w.ids.begin(), w.ids.end());
  return w;
}

void ToyConfig::validate() const {
  if (vocab_size < 4) throw InvalidInputError("toy config: vocab_size < 4");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw InvalidInputError("toy config: d_model must divide into n_heads");
  }
  if (n_layers == 0) throw InvalidInputError("toy config: n_layers == 0");
  if (max_seq == 0) throw InvalidInputError("toy config: max_seq == 0");
}

ToyTransformerParams ToyTransformerParams::zeros(const ToyConfig& cfg) {
  cfg.validate();
  ToyTransformerParams p;
  p.config = cfg;
  p.embedding = Tensor2D(cfg.vocab_size, cfg.d_model);
  p.positional = Tensor2D(cfg.max_seq, cfg.d_model);
  p.layers.resize(cfg.n_layers);
  for (auto& layer : p.layers) {
    layer.attn_norm_gain = Vector(cfg.d_model, 1);
    layer.wq = Tensor2D(cfg.d_model, cfg.d_model);
    layer.wk = Tensor2D(cfg.d_model, cfg.d_model);
    layer.wv = Tensor2D(cfg.d_model, cfg.d_model);
    layer.wo = Tensor2D(cfg.d_model, cfg.d_model);
    layer.mlp_norm_gain = Vector(cfg.d_model, 1);
    layer.w1 = Tensor2D(cfg.d_ff, cfg.d_model);
    layer.b1 = Vector(cfg.d_ff, 0);
    layer.w2 = Tensor2D(cfg.d_model, cfg.d_ff);
    layer.b2 = Vector(cfg.d_model, 0);
  }
  p.final_norm_gain = Vector(cfg.d_model, 1);
  p.unembedding = Tensor2D(cfg.vocab_size, cfg.d_model);
  return p;
}

ToyTransformerParams random_toy_model(const ToyConfig& cfg,
                                      std::uint64_t seed) {
  ToyTransformerParams p = ToyTransformerParams::zeros(cfg);
  RngState rng(seed);
  const real s = real(1) / std::sqrt(real(cfg.d_model));
  // Values are rounded through f32 so checkpoints are value-exact.
  auto fill = [&](Tensor2D& t) {
    for (auto& v : t.data) v = real(float(real(rng.normal()) * s));
  };
  fill(p.embedding);
  fill(p.positional);
  for (auto& layer : p.layers) {
    fill(layer.wq);
    fill(layer.wk);
    fill(layer.wv);
    fill(layer.wo);
    fill(layer.w1);
    fill(layer.w2);
  }
  fill(p.unembedding);
  return p;
}

namespace {

void check_tokens(const ToyTransformerParams& p, std::span<const int> tokens) {
  if (tokens.empty()) {
    throw InvalidInputError("toy model: empty token sequence");
  }
  if (tokens.size() > p.config.max_seq) {
    throw InvalidInputError("toy model: sequence length " +
                            std::to_string(tokens.size()) +
                            " exceeds max_seq " +
                            std::to_string(p.config.max_seq));
  }
  for (const int t : tokens) {
    if (t < 0 || t >= static_cast<int>(p.config.vocab_size)) {
      throw InvalidInputError("toy model: token id out of range: " +
                              std::to_string(t));
    }
  }
}

void rmsnorm(std::span<const real> x, const Vector& gain, double eps,
             Vector& out) {
  double ms = 0;
  for (const real v : x) ms += double(v) * double(v);
  const double r = std::sqrt(ms / double(x.size()) + eps);
  out.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = gain[i] * real(x[i] / r);
  }
}

// dL/dx for y = gain .* x / rms(x).
void rmsnorm_backward(std::span<const real> x, const Vector& gain, double eps,
                      std::span<const real> dy, Vector& dx) {
  const std::size_t d = x.size();
  double ms = 0;
  for (const real v : x) ms += double(v) * double(v);
  const double r = std::sqrt(ms / double(d) + eps);
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += gain[i] * dy[i] * x[i];
  dx.resize(d);
  const double r3 = r * r * r;
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] = real(gain[i] * dy[i] / r - x[i] * s / (double(d) * r3));
  }
}

inline double silu(double u) { return u / (1.0 + std::exp(-u)); }
inline double silu_grad(double u) {
  const double sg = 1.0 / (1.0 + std::exp(-u));
  return sg * (1.0 + u * (1.0 - sg));
}

// y = W x (+ bias), explicit row-major loops with fixed order.
void affine(const Tensor2D& w, std::span<const real> x, const Vector* bias,
            Vector& out) {
  out.resize(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const real* row = w.data.data() + r * w.cols;
    real acc = bias ? (*bias)[r] : real(0);
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

void affine_transposed(const Tensor2D& w, std::span<const real> x,
                       Vector& out) {
  out.assign(w.cols, 0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const real* row = w.data.data() + r * w.cols;
    const real xr = x[r];
    for (std::size_t c = 0; c < w.cols; ++c) out[c] += xr * row[c];
  }
}

// One block at one position. keys/values carry rows for positions <= j;
// row j is written here before attention reads it. The same routine backs
// both the full and the incremental forward, so the two are bit-identical.
void layer_step(const LayerParams& lp, const ToyConfig& cfg,
                std::span<const real> resid_in, Tensor2D& keys,
                Tensor2D& values, std::size_t j, Vector& resid_out) {
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(double(hd));

  Vector n1;
  rmsnorm(resid_in, lp.attn_norm_gain, cfg.rms_eps, n1);
  Vector q;
  affine(lp.wq, n1, nullptr, q);
  Vector kj, vj;
  affine(lp.wk, n1, nullptr, kj);
  affine(lp.wv, n1, nullptr, vj);
  std::copy(kj.begin(), kj.end(), keys.row(j).begin());
  std::copy(vj.begin(), vj.end(), values.row(j).begin());

  Vector attn(d, 0);
  Vector scores(j + 1), probs;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t jp = 0; jp <= j; ++jp) {
      const real* krow = keys.data.data() + jp * d + off;
      double acc = 0;
      for (std::size_t c = 0; c < hd; ++c) acc += q[off + c] * krow[c];
      scores[jp] = real(acc * scale);
    }
    probs = softmax(scores);
    for (std::size_t jp = 0; jp <= j; ++jp) {
      const real* vrow = values.data.data() + jp * d + off;
      const real a = probs[jp];
      for (std::size_t c = 0; c < hd; ++c) attn[off + c] += a * vrow[c];
    }
  }
  Vector attn_out;
  affine(lp.wo, attn, nullptr, attn_out);

  Vector mid(d);
  for (std::size_t c = 0; c < d; ++c) mid[c] = resid_in[c] + attn_out[c];

  Vector n2;
  rmsnorm(mid, lp.mlp_norm_gain, cfg.rms_eps, n2);
  Vector u;
  affine(lp.w1, n2, &lp.b1, u);
  for (auto& x : u) x = real(silu(x));
  Vector mlp;
  affine(lp.w2, u, &lp.b2, mlp);

  resid_out.resize(d);
  for (std::size_t c = 0; c < d; ++c) resid_out[c] = mid[c] + mlp[c];
}

void final_logits(const ToyTransformerParams& p, std::span<const real> resid,
                  Vector& logits) {
  Vector n;
  rmsnorm(resid, p.final_norm_gain, p.config.rms_eps, n);
  affine(p.unembedding, n, nullptr, logits);
}

}  // namespace

Tensor2D forward(const ToyTransformerParams& p, std::span<const int> tokens,
                 int hook_layer, const ResidualHook& hook,
                 ForwardTrace* trace) {
  check_tokens(p, tokens);
  if (hook_layer >= static_cast<int>(p.config.n_layers)) {
    throw InvalidInputError("forward: hook layer out of range");
  }
  const std::size_t T = tokens.size();
  const std::size_t d = p.config.d_model;
  const std::size_t L = p.config.n_layers;

  if (trace) {
    trace->resid_in.assign(L, Tensor2D(T, d));
    trace->keys.assign(L, Tensor2D(T, d));
    trace->values.assign(L, Tensor2D(T, d));
    trace->resid_final = Tensor2D(T, d);
  }

  Tensor2D resid(T, d);
  for (std::size_t j = 0; j < T; ++j) {
    const real* emb = p.embedding.data.data() + std::size_t(tokens[j]) * d;
    const real* pos = p.positional.data.data() + j * d;
    for (std::size_t c = 0; c < d; ++c) resid.at(j, c) = emb[c] + pos[c];
  }

  std::vector<Tensor2D> local_keys, local_values;
  Tensor2D* keys_store = nullptr;
  Tensor2D* values_store = nullptr;
  if (!trace) {
    local_keys.assign(L, Tensor2D(T, d));
    local_values.assign(L, Tensor2D(T, d));
  }

  Vector out_row;
  for (std::size_t l = 0; l < L; ++l) {
    keys_store = trace ? &trace->keys[l] : &local_keys[l];
    values_store = trace ? &trace->values[l] : &local_values[l];
    if (trace) trace->resid_in[l] = resid;
    for (std::size_t j = 0; j < T; ++j) {
      layer_step(p.layers[l], p.config, resid.row(j), *keys_store,
                 *values_store, j, out_row);
      std::copy(out_row.begin(), out_row.end(), resid.row(j).begin());
      if (hook && static_cast<int>(l) == hook_layer) {
        hook(j, resid.row(j));
      }
    }
  }
  if (trace) trace->resid_final = resid;

  Tensor2D logits(T, p.config.vocab_size);
  Vector row;
  for (std::size_t j = 0; j < T; ++j) {
    final_logits(p, resid.row(j), row);
    std::copy(row.begin(), row.end(), logits.row(j).begin());
  }
  return logits;
}

Vector capture_residual(const ToyTransformerParams& p,
                        std::span<const int> tokens, const HookPoint& hook) {
  if (hook.position >= tokens.size() || hook.layer >= p.config.n_layers) {
    throw InvalidInputError("capture_residual: hook out of range");
  }
  Vector captured;
  forward(p, tokens, static_cast<int>(hook.layer),
          [&](std::size_t pos, std::span<real> resid) {
            if (pos == hook.position) {
              captured.assign(resid.begin(), resid.end());
            }
          });
  return captured;
}

Tensor2D patched_forward(const ToyTransformerParams& p,
                         std::span<const int> tokens, const HookPoint& hook,
                         PatchMode mode, std::span<const real> payload) {
  if (payload.size() != p.config.d_model) {
    throw InvalidInputError("patched_forward: payload dim != d_model");
  }
  if (hook.position >= tokens.size() || hook.layer >= p.config.n_layers) {
    throw InvalidInputError("patched_forward: hook out of range");
  }
  return forward(p, tokens, static_cast<int>(hook.layer),
                 [&](std::size_t pos, std::span<real> resid) {
                   if (pos != hook.position) return;
                   if (mode == PatchMode::Replace) {
                     std::copy(payload.begin(), payload.end(), resid.begin());
                   } else {
                     for (std::size_t c = 0; c < resid.size(); ++c) {
                       resid[c] += payload[c];
                     }
                   }
                 });
}

Vector next_token_distribution(const ToyTransformerParams& p,
                               std::span<const int> tokens) {
  const Tensor2D logits = forward(p, tokens);
  return softmax(
      Vector(logits.row(logits.rows - 1).begin(), logits.row(logits.rows - 1).end()));
}

real wait_metric(const Vector& probs, const WaitSet& wait) {
  real m = 0;
  for (const int id : wait.ids) {
    if (id < 0 || id >= static_cast<int>(probs.size())) {
      throw InvalidInputError("wait_metric: wait token id out of range");
    }
    m += probs[std::size_t(id)];
  }
  return m;
}

namespace {

// Backward through one block, position t only; everything at other
// positions is constant for a perturbation of position t's input.
void layer_backward_at(const LayerParams& lp, const ToyConfig& cfg,
                       const Tensor2D& resid_in_all, const Tensor2D& keys,
                       const Tensor2D& values, std::size_t t,
                       std::span<const real> d_out, Vector& d_in) {
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(double(hd));
  const auto x_in = resid_in_all.row(t);

  // Recompute the position's forward internals from the cached inputs.
  Vector n1;
  rmsnorm(x_in, lp.attn_norm_gain, cfg.rms_eps, n1);
  Vector q;
  affine(lp.wq, n1, nullptr, q);

  std::vector<Vector> head_probs(heads);
  Vector attn(d, 0);
  {
    Vector scores(t + 1);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t jp = 0; jp <= t; ++jp) {
        const real* krow = keys.data.data() + jp * d + off;
        double acc = 0;
        for (std::size_t c = 0; c < hd; ++c) acc += q[off + c] * krow[c];
        scores[jp] = real(acc * scale);
      }
      head_probs[h] = softmax(scores);
      for (std::size_t jp = 0; jp <= t; ++jp) {
        const real* vrow = values.data.data() + jp * d + off;
        const real a = head_probs[h][jp];
        for (std::size_t c = 0; c < hd; ++c) attn[off + c] += a * vrow[c];
      }
    }
  }
  Vector attn_out;
  affine(lp.wo, attn, nullptr, attn_out);
  Vector mid(d);
  for (std::size_t c = 0; c < d; ++c) mid[c] = x_in[c] + attn_out[c];
  Vector n2;
  rmsnorm(mid, lp.mlp_norm_gain, cfg.rms_eps, n2);
  Vector u;
  affine(lp.w1, n2, &lp.b1, u);

  // MLP backward: x_out = mid + W2 silu(u) + b2.
  Vector dh;
  affine_transposed(lp.w2, d_out, dh);
  for (std::size_t i = 0; i < dh.size(); ++i) {
    dh[i] = real(dh[i] * silu_grad(u[i]));
  }
  Vector dn2;
  affine_transposed(lp.w1, dh, dn2);
  Vector dmid;
  rmsnorm_backward(mid, lp.mlp_norm_gain, cfg.rms_eps, dn2, dmid);
  for (std::size_t c = 0; c < d; ++c) dmid[c] += d_out[c];

  // Attention backward: only q_t, k_t, v_t depend on x_in at position t.
  Vector dconcat;
  affine_transposed(lp.wo, dmid, dconcat);
  Vector dq(d, 0), dk_t(d, 0), dv_t(d, 0);
  Vector dalpha(t + 1);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Vector& probs = head_probs[h];
    for (std::size_t c = 0; c < hd; ++c) {
      dv_t[off + c] = probs[t] * dconcat[off + c];
    }
    double inner = 0;
    for (std::size_t jp = 0; jp <= t; ++jp) {
      const real* vrow = values.data.data() + jp * d + off;
      double acc = 0;
      for (std::size_t c = 0; c < hd; ++c) acc += dconcat[off + c] * vrow[c];
      dalpha[jp] = real(acc);
      inner += probs[jp] * acc;
    }
    for (std::size_t jp = 0; jp <= t; ++jp) {
      const double ds = probs[jp] * (dalpha[jp] - inner);
      const real* krow = keys.data.data() + jp * d + off;
      for (std::size_t c = 0; c < hd; ++c) {
        dq[off + c] += real(ds * scale * krow[c]);
      }
      if (jp == t) {
        for (std::size_t c = 0; c < hd; ++c) {
          dk_t[off + c] += real(ds * scale * q[off + c]);
        }
      }
    }
  }
  Vector dn1(d, 0), tmp;
  affine_transposed(lp.wq, dq, tmp);
  for (std::size_t c = 0; c < d; ++c) dn1[c] += tmp[c];
  affine_transposed(lp.wk, dk_t, tmp);
  for (std::size_t c = 0; c < d; ++c) dn1[c] += tmp[c];
  affine_transposed(lp.wv, dv_t, tmp);
  for (std::size_t c = 0; c < d; ++c) dn1[c] += tmp[c];

  rmsnorm_backward(x_in, lp.attn_norm_gain, cfg.rms_eps, dn1, d_in);
  for (std::size_t c = 0; c < d; ++c) d_in[c] += dmid[c];
}

}  // namespace

Vector wait_metric_residual_gradient(const ToyTransformerParams& p,
                                     std::span<const int> tokens,
                                     const HookPoint& hook,
                                     const WaitSet& wait) {
  check_tokens(p, tokens);
  const std::size_t t = tokens.size() - 1;
  if (hook.position != t) {
    throw InvalidInputError(
        "wait_metric_residual_gradient: hook position must be the last token");
  }
  if (hook.layer >= p.config.n_layers) {
    throw InvalidInputError("wait_metric_residual_gradient: hook layer out of range");
  }

  ForwardTrace trace;
  const Tensor2D logits = forward(p, tokens, -1, nullptr, &trace);
  const Vector probs =
      softmax(Vector(logits.row(t).begin(), logits.row(t).end()));
  const real metric = wait_metric(probs, wait);

  // dM/dlogit_v = p_v ([v in wait] - M)
  Vector dlogits(p.config.vocab_size);
  for (std::size_t v = 0; v < dlogits.size(); ++v) {
    const real ind = wait.contains(static_cast<int>(v)) ? real(1) : real(0);
    dlogits[v] = probs[v] * (ind - metric);
  }

  Vector dn;
  affine_transposed(p.unembedding, dlogits, dn);
  Vector grad;
  rmsnorm_backward(trace.resid_final.row(t), p.final_norm_gain,
                   p.config.rms_eps, dn, grad);

  Vector next;
  for (std::size_t l = p.config.n_layers; l-- > hook.layer + 1;) {
    layer_backward_at(p.layers[l], p.config, trace.resid_in[l], trace.keys[l],
                      trace.values[l], t, grad, next);
    grad.swap(next);
  }
  return grad;
}

int sample_token(const Vector& probs, double temperature, double top_p,
                 RngState& rng) {
  if (probs.empty()) throw InvalidInputError("sample_token: empty distribution");
  if (temperature <= 0) {
    // Greedy limit; ties resolve to the lowest id.
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[best]) best = i;
    }
    return static_cast<int>(best);
  }
  // softmax(z/T) == renormalized p^(1/T)
  std::vector<double> w(probs.size());
  double sum = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    w[i] = std::pow(double(probs[i]), 1.0 / temperature);
    sum += w[i];
  }
  for (auto& v : w) v /= sum;

  // Nucleus: smallest prefix of the (prob desc, id asc) order covering top_p.
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (w[a] != w[b]) return w[a] > w[b];
    return a < b;
  });
  double kept = 0;
  std::size_t cut = 0;
  while (cut < order.size()) {
    kept += w[order[cut]];
    ++cut;
    if (kept >= top_p) break;
  }
  const double u = rng.uniform() * kept;
  double acc = 0;
  for (std::size_t i = 0; i < cut; ++i) {
    acc += w[order[i]];
    if (u < acc) return static_cast<int>(order[i]);
  }
  return static_cast<int>(order[cut - 1]);
}

GenerateResult generate(const ToyTransformerParams& p,
                        std::span<const int> prompt,
                        const SamplingConfig& sampling, const WaitSet* wait,
                        int hook_layer, const ResidualHook& steer,
                        std::optional<std::size_t> steer_start) {
  check_tokens(p, prompt);
  if (prompt.size() + sampling.max_tokens > p.config.max_seq) {
    throw InvalidInputError("generate: prompt plus budget exceeds max_seq");
  }
  const std::size_t d = p.config.d_model;
  const std::size_t L = p.config.n_layers;
  const std::size_t capacity = prompt.size() + sampling.max_tokens;
  const std::size_t start =
      steer_start.value_or(prompt.size() - 1);

  // Incremental pass with cached keys/values; per-(layer, position)
  // arithmetic is layer_step, identical to the full forward.
  std::vector<Tensor2D> keys(L, Tensor2D(capacity, d));
  std::vector<Tensor2D> values(L, Tensor2D(capacity, d));
  std::size_t pos = 0;
  Vector resid(d), out_row, logits;

  auto step = [&](int token) {
    const real* emb = p.embedding.data.data() + std::size_t(token) * d;
    const real* ppos = p.positional.data.data() + pos * d;
    for (std::size_t c = 0; c < d; ++c) resid[c] = emb[c] + ppos[c];
    for (std::size_t l = 0; l < L; ++l) {
      layer_step(p.layers[l], p.config, resid, keys[l], values[l], pos,
                 out_row);
      resid.swap(out_row);
      if (steer && static_cast<int>(l) == hook_layer && pos >= start) {
        steer(pos, resid);
      }
    }
    final_logits(p, resid, logits);
    ++pos;
  };

  for (const int tok : prompt) step(tok);

  GenerateResult result;
  RngState rng(sampling.seed);
  for (std::size_t i = 0; i < sampling.max_tokens; ++i) {
    const Vector probs = softmax(logits);
    if (wait) result.metric_trace.push_back(wait_metric(probs, *wait));
    const int tok = sample_token(probs, sampling.temperature, sampling.top_p, rng);
    result.tokens.push_back(tok);
    if (i + 1 < sampling.max_tokens) step(tok);
  }
  return result;
}

Vector patchscope(const ToyTransformerParams& p,
                  std::span<const int> carrier_prompt, std::size_t hook_layer,
                  std::span<const real> vector, std::size_t insert_position) {
  const Tensor2D logits =
      patched_forward(p, carrier_prompt, HookPoint{hook_layer, insert_position},
                      PatchMode::Replace, vector);
  return softmax(Vector(logits.row(logits.rows - 1).begin(),
                        logits.row(logits.rows - 1).end()));
}

namespace {

template <typename Params, typename Fn>
void for_each_toy_block(Params& p, Fn&& fn) {
  fn(p.embedding.data);
  fn(p.positional.data);
  for (auto& layer : p.layers) {
    fn(layer.attn_norm_gain);
    fn(layer.wq.data);
    fn(layer.wk.data);
    fn(layer.wv.data);
    fn(layer.wo.data);
    fn(layer.mlp_norm_gain);
    fn(layer.w1.data);
    fn(layer.b1);
    fn(layer.w2.data);
    fn(layer.b2);
  }
  fn(p.final_norm_gain);
  fn(p.unembedding.data);
}

}  // namespace

void write_toy_model(const std::filesystem::path& path,
                     const ToyTransformerParams& params) {
  params.config.validate();
  auto out = open_binary_out(path);
  out.write(kToyMagic, 4);
  write_le<std::uint32_t>(out, kToyVersion);
  write_le<std::uint32_t>(out, params.config.vocab_size);
  write_le<std::uint32_t>(out, params.config.d_model);
  write_le<std::uint32_t>(out, params.config.n_layers);
  write_le<std::uint32_t>(out, params.config.n_heads);
  write_le<std::uint32_t>(out, params.config.d_ff);
  write_le<std::uint32_t>(out, params.config.max_seq);
  write_le<double>(out, params.config.rms_eps);
  for_each_toy_block(params,
                     [&](const Vector& block) { write_f32_block(out, block); });
  if (!out) throw StorageError("write failed: " + path.string());
}

ToyTransformerParams read_toy_model(const std::filesystem::path& path) {
  auto in = open_binary_in(path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kToyMagic, 4) != 0) {
    throw FormatError("not a toy model checkpoint (bad magic): " +
                      path.string());
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kToyVersion) {
    throw FormatError("unsupported toy checkpoint version " +
                      std::to_string(version));
  }
  ToyConfig cfg;
  cfg.vocab_size = read_le<std::uint32_t>(in);
  cfg.d_model = read_le<std::uint32_t>(in);
  cfg.n_layers = read_le<std::uint32_t>(in);
  cfg.n_heads = read_le<std::uint32_t>(in);
  cfg.d_ff = read_le<std::uint32_t>(in);
  cfg.max_seq = read_le<std::uint32_t>(in);
  cfg.rms_eps = read_le<double>(in);
  ToyTransformerParams params = ToyTransformerParams::zeros(cfg);
  try {
    for_each_toy_block(params, [&](Vector& block) {
      read_f32_block(in, block.size(), block);
    });
  } catch (const CorruptionError& e) {
    throw CorruptionError(std::string(e.what()) + " in " + path.string());
  }
  for_each_toy_block(params, [&](const Vector& block) {
    require_finite(block, "toy model checkpoint");
  });
  return params;
}

ModelPair random_model_pair(const ToyConfig& cfg, std::uint64_t seed,
                            real finetune_scale) {
  ModelPair pair;
  pair.base = random_toy_model(cfg, seed);
  pair.reasoning = pair.base;
  pair.hook_layer = cfg.n_layers / 2;
  RngState rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const real s = finetune_scale / std::sqrt(real(cfg.d_model));
  for_each_toy_block(pair.reasoning, [&](Vector& block) {
    for (auto& v : block) v = real(float(v + real(rng.normal()) * s));
  });
  return pair;
}

void write_model_pair(const std::filesystem::path& json_path,
                      const ModelPair& pair) {
  const auto dir = json_path.parent_path();
  write_toy_model(dir / "base.xtoy", pair.base);
  write_toy_model(dir / "reasoning.xtoy", pair.reasoning);
  json doc{{"base", "base.xtoy"},
           {"reasoning", "reasoning.xtoy"},
           {"hook_layer", pair.hook_layer},
           {"tokenizer", "toy-v1"}};
  write_text_file(json_path, doc.dump(2) + "\n");
}

ModelPair read_model_pair(const std::filesystem::path& json_path) {
  json doc;
  try {
    doc = json::parse(read_text_file(json_path));
  } catch (const json::exception& e) {
    throw FormatError("bad model pair manifest " + json_path.string() + ": " +
                      e.what());
  }
  ModelPair pair;
  const auto dir = json_path.parent_path();
  try {
    pair.base = read_toy_model(dir / doc.at("base").get<std::string>());
    pair.reasoning =
        read_toy_model(dir / doc.at("reasoning").get<std::string>());
    pair.hook_layer = doc.at("hook_layer").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError("model pair manifest field error: " +
                      std::string(e.what()));
  }
  if (pair.base.config.vocab_size != pair.reasoning.config.vocab_size ||
      pair.base.config.d_model != pair.reasoning.config.d_model) {
    throw ValidationError("model pair members disagree on vocab or d_model");
  }
  if (pair.base.config.vocab_size !=
      static_cast<std::uint32_t>(pair.tokenizer.vocab_size())) {
    throw ValidationError("model pair vocab does not match the tokenizer");
  }
  return pair;
}

LinearBypassFixture make_linear_bypass_pair(std::uint64_t seed) {
  ToyConfig cfg;  // defaults: V=68, d=32, 4 layers, hook after block 2
  LinearBypassFixture fx;
  fx.pair.base = random_toy_model(cfg, seed);
  fx.pair.hook_layer = cfg.n_layers / 2;

  // Blocks above the hook become exact identities.
  for (std::size_t l = fx.pair.hook_layer + 1; l < cfg.n_layers; ++l) {
    auto& layer = fx.pair.base.layers[l];
    std::fill(layer.wo.data.begin(), layer.wo.data.end(), real(0));
    std::fill(layer.w2.data.begin(), layer.w2.data.end(), real(0));
    std::fill(layer.b2.begin(), layer.b2.end(), real(0));
  }

  // Orthonormal planted directions.
  RngState rng(seed ^ 0x517cc1b727220a95ULL);
  const std::size_t d = cfg.d_model;
  Vector u(d), w(d);
  for (auto& v : u) v = real(rng.normal());
  const real un = norm(u);
  for (auto& v : u) v /= un;
  for (auto& v : w) v = real(rng.normal());
  const real proj = dot(w, u);
  for (std::size_t c = 0; c < d; ++c) w[c] -= proj * u[c];
  const real wn = norm(w);
  for (auto& v : w) v /= wn;
  fx.promote_direction = u;
  fx.suppress_direction = w;

  // The first wait form reads out promote - suppress; every other
  // unembedding row is projected off both directions so the planted
  // channels touch exactly one logit.
  ToyTokenizer tok;
  fx.wait_token = tok.wait_token_ids()[0];
  fx.readout_gain = 3;
  Tensor2D& unemb = fx.pair.base.unembedding;
  for (std::size_t v = 0; v < unemb.rows; ++v) {
    auto row = unemb.row(v);
    const real cu = dot({row.data(), d}, u);
    const real cw = dot({row.data(), d}, w);
    for (std::size_t c = 0; c < d; ++c) {
      row[c] -= cu * u[c] + cw * w[c];
    }
  }
  for (std::size_t c = 0; c < d; ++c) {
    unemb.at(std::size_t(fx.wait_token), c) =
        fx.readout_gain * (u[c] - w[c]);
  }

  // Reasoning member: identical weights except a rank-1 injection at the
  // hook layer that writes a data-dependent multiple of the promote
  // direction into the residual stream.
  fx.pair.reasoning = fx.pair.base;
  auto& inject_layer = fx.pair.reasoning.layers[fx.pair.hook_layer];
  for (std::size_t c = 0; c < d; ++c) {
    inject_layer.w2.at(c, 0) += u[c];
  }
  return fx;
}

}  // namespace xcoder
