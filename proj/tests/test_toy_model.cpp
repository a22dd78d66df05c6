#include <doctest.h>

#include <cmath>
#include <map>

#include "test_util.hpp"
#include "toy_oracles.hpp"
#include "xcoder/io_util.hpp"
#include "xcoder/toy_model.hpp"

using namespace xcoder;
using namespace xcoder::testing;

namespace {

ToyConfig small_config() {
  ToyConfig cfg;
  cfg.max_seq = 64;
  return cfg;
}

}  // namespace

TEST_SUITE("toy_model") {

TEST_CASE("tokenizer maps wait forms to dedicated ids") {
  ToyTokenizer tok;
  CHECK(tok.vocab_size() == 68);
  const auto& wait_ids = tok.wait_token_ids();
  REQUIRE(wait_ids.size() == 4);
  CHECK(tok.token_text(wait_ids[0]) == "Wait");
  CHECK(tok.token_text(wait_ids[1]) == " Wait");
  CHECK(tok.token_text(wait_ids[2]) == " wait");
  CHECK(tok.token_text(wait_ids[3]) == "wait");

  const auto ids = tok.encode("Wait wait");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == wait_ids[0]);
  CHECK(ids[1] == wait_ids[2]);  // " wait"
  CHECK(tok.decode(ids) == "Wait wait");

  // Greedy encoding keeps round trips exact on alphabet text.
  for (const std::string text :
       {std::string("I think x=2. Wait, no"), std::string("abc wait def"),
        std::string("so we Wait and wait"), std::string("W4 wait")}) {
    CHECK(tok.decode(tok.encode(text)) == text);
  }
  CHECK_THROWS_AS(tok.encode("tab\there"), InvalidInputError);
}

TEST_CASE("waitset membership") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  REQUIRE(w.ids.size() == 4);
  for (const int id : tok.wait_token_ids()) CHECK(w.contains(id));
  CHECK_FALSE(w.contains(tok.encode("a")[0]));
}

TEST_CASE("forward shape and causality") {
  const auto p = random_toy_model(small_config(), 3);
  ToyTokenizer tok;
  const auto one = tok.encode("a");
  const Tensor2D logits1 = forward(p, one);
  CHECK(logits1.rows == 1);
  CHECK(logits1.cols == 68);

  const auto prompt = tok.encode("abc de");
  const Tensor2D base_logits = forward(p, prompt);
  auto longer = prompt;
  longer.push_back(tok.encode("f")[0]);
  const Tensor2D ext_logits = forward(p, longer);
  // Earlier positions are bit-identical under appended tokens.
  for (std::size_t j = 0; j < prompt.size(); ++j) {
    for (std::size_t v = 0; v < 68; ++v) {
      CHECK(base_logits.at(j, v) == ext_logits.at(j, v));
    }
  }
}

TEST_CASE("forward rejects bad tokens and empty input") {
  const auto p = random_toy_model(small_config(), 4);
  CHECK_THROWS_AS(forward(p, std::vector<int>{}), InvalidInputError);
  CHECK_THROWS_AS(forward(p, std::vector<int>{999}), InvalidInputError);
  CHECK_THROWS_AS(forward(p, std::vector<int>{-1}), InvalidInputError);
}

TEST_CASE("patch identities are bit-exact") {
  const auto p = random_toy_model(small_config(), 5);
  ToyTokenizer tok;
  const auto prompt = tok.encode("some text here");
  const HookPoint hook{2, prompt.size() - 1};

  const Tensor2D clean = forward(p, prompt);
  const Vector zero(p.config.d_model, 0);
  const Tensor2D added = patched_forward(p, prompt, hook, PatchMode::Add, zero);
  CHECK(added.data == clean.data);

  const Vector captured = capture_residual(p, prompt, hook);
  const Tensor2D replaced =
      patched_forward(p, prompt, hook, PatchMode::Replace, captured);
  CHECK(replaced.data == clean.data);
}

TEST_CASE("patched forward changes downstream logits only") {
  const auto p = random_toy_model(small_config(), 6);
  ToyTokenizer tok;
  const auto prompt = tok.encode("before after");
  const HookPoint hook{1, 3};
  Vector payload(p.config.d_model, real(0.5));
  const Tensor2D clean = forward(p, prompt);
  const Tensor2D patched =
      patched_forward(p, prompt, hook, PatchMode::Add, payload);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t v = 0; v < 68; ++v) {
      CHECK(clean.at(j, v) == patched.at(j, v));
    }
  }
  bool changed = false;
  for (std::size_t v = 0; v < 68; ++v) {
    if (clean.at(3, v) != patched.at(3, v)) changed = true;
  }
  CHECK(changed);
}

TEST_CASE("next token distribution is a probability vector matching softmax") {
  const auto p = random_toy_model(small_config(), 7);
  ToyTokenizer tok;
  const auto prompt = tok.encode("hello world");
  const Vector probs = next_token_distribution(p, prompt);
  real sum = 0;
  for (const real v : probs) {
    CHECK(v >= 0);
    sum += v;
  }
  CHECK(std::fabs(sum - 1) <= 1e-12);

  // Composition oracle: naive softmax over the final forward row.
  const Tensor2D logits = forward(p, prompt);
  const auto last = logits.row(logits.rows - 1);
  double mx = last[0];
  for (const real v : last) mx = std::max(mx, double(v));
  double z = 0;
  std::vector<double> want(last.size());
  for (std::size_t v = 0; v < last.size(); ++v) {
    want[v] = std::exp(double(last[v]) - mx);
    z += want[v];
  }
  std::size_t argmax_logits = 0, argmax_probs = 0;
  for (std::size_t v = 0; v < last.size(); ++v) {
    CHECK(std::fabs(probs[v] - want[v] / z) < 1e-12);
    if (last[v] > last[argmax_logits]) argmax_logits = v;
    if (probs[v] > probs[argmax_probs]) argmax_probs = v;
  }
  CHECK(argmax_logits == argmax_probs);
}

TEST_CASE("wait metric uniform and complete cases") {
  Vector uniform(64, real(1) / 64);
  WaitSet w;
  w.ids = {3, 17, 40, 63};
  CHECK(wait_metric(uniform, w) == doctest::Approx(4.0 / 64).epsilon(1e-14));

  WaitSet all;
  for (int i = 0; i < 64; ++i) all.ids.push_back(i);
  CHECK(wait_metric(uniform, all) == doctest::Approx(1.0).epsilon(1e-14));

  RngState rng(8);
  Vector logits(64);
  for (auto& v : logits) v = real(rng.normal());
  const Vector probs = softmax(logits);
  double indexed = 0;
  for (const int id : w.ids) indexed += probs[std::size_t(id)];
  CHECK(wait_metric(probs, w) == doctest::Approx(indexed).epsilon(1e-14));
}

TEST_CASE("metric gradient of a constant metric is zero") {
  const auto p = random_toy_model(small_config(), 9);
  ToyTokenizer tok;
  WaitSet all;
  for (int i = 0; i < tok.vocab_size(); ++i) all.ids.push_back(i);
  const auto prompt = tok.encode("abc");
  const Vector g = wait_metric_residual_gradient(
      p, prompt, HookPoint{2, prompt.size() - 1}, all);
  for (const real v : g) CHECK(std::fabs(v) < 1e-14);
}

TEST_CASE("metric gradient matches finite differences") {
  ToyTokenizer tok;
  const WaitSet wait = WaitSet::from_tokenizer(tok);
  RngState rng(10);
  for (int trial = 0; trial < 4; ++trial) {
    const auto p = random_toy_model(small_config(), 50 + trial);
    const auto prompt = random_prompt(rng, tok, 4 + rng.uniform_index(6));
    const HookPoint hook{2, prompt.size() - 1};
    const Vector analytic = wait_metric_residual_gradient(p, prompt, hook, wait);
    const Vector fd = metric_gradient_fd(p, prompt, hook, wait);
    CHECK(vector_rel_err(analytic, fd) < 1e-4);

    // Directional derivative probe along a random direction.
    Vector dir(p.config.d_model);
    for (auto& v : dir) v = real(rng.normal());
    const real dn = norm(dir);
    for (auto& v : dir) v /= dn;
    const Vector a = capture_residual(p, prompt, hook);
    const double eps = 1e-5;
    Vector plus = a, minus = a;
    axpy(real(eps), dir, plus);
    axpy(real(-eps), dir, minus);
    const double fd_dir = (metric_at_residual(p, prompt, hook, wait, plus) -
                           metric_at_residual(p, prompt, hook, wait, minus)) /
                          (2 * eps);
    const double an_dir = dot(analytic, dir);
    CHECK(std::fabs(fd_dir - an_dir) /
              std::max({std::fabs(fd_dir), std::fabs(an_dir), 1e-8}) <
          1e-4);
  }
}

TEST_CASE("metric gradient requires the last token") {
  const auto p = random_toy_model(small_config(), 11);
  ToyTokenizer tok;
  const WaitSet wait = WaitSet::from_tokenizer(tok);
  const auto prompt = tok.encode("abcd");
  CHECK_THROWS_AS(
      wait_metric_residual_gradient(p, prompt, HookPoint{2, 1}, wait),
      InvalidInputError);
}

TEST_CASE("linear bypass gradient matches the closed-form oracle") {
  const auto fx = make_linear_bypass_pair(12);
  ToyTokenizer tok;
  const WaitSet wait = WaitSet::from_tokenizer(tok);
  const auto prompt = tok.encode("check this");
  const HookPoint hook{fx.pair.hook_layer, prompt.size() - 1};

  const Vector analytic =
      wait_metric_residual_gradient(fx.pair.reasoning, prompt, hook, wait);
  const Vector resid = capture_residual(fx.pair.reasoning, prompt, hook);
  const Vector oracle = bypass_gradient_oracle(fx.pair.reasoning, resid, wait);
  CHECK(vector_rel_err(analytic, oracle) < 1e-12);

  // The planted promote direction dominates the gradient's alignment.
  const real along = dot(analytic, fx.promote_direction);
  CHECK(along > 0);
}

TEST_CASE("generate greedy limit and determinism") {
  const auto p = random_toy_model(small_config(), 13);
  ToyTokenizer tok;
  const auto prompt = tok.encode("go");
  SamplingConfig greedy{0.0, 1.0, 12, 99};
  const auto r1 = generate(p, prompt, greedy);
  REQUIRE(r1.tokens.size() == 12);
  // Greedy equals repeated argmax of the next-token distribution.
  std::vector<int> ctx = prompt;
  for (const int tok_id : r1.tokens) {
    const Vector probs = next_token_distribution(p, ctx);
    std::size_t best = 0;
    for (std::size_t v = 1; v < probs.size(); ++v) {
      if (probs[v] > probs[best]) best = v;
    }
    CHECK(int(best) == tok_id);
    ctx.push_back(tok_id);
  }

  SamplingConfig stochastic{0.9, 0.95, 20, 1234};
  const auto a = generate(p, prompt, stochastic);
  const auto b = generate(p, prompt, stochastic);
  CHECK(a.tokens == b.tokens);
  stochastic.seed = 1235;
  const auto c = generate(p, prompt, stochastic);
  CHECK(a.tokens != c.tokens);

  SamplingConfig empty{0.6, 0.95, 0, 7};
  CHECK(generate(p, prompt, empty).tokens.empty());
}

TEST_CASE("sampling frequencies match the distribution within 3 sigma") {
  const auto p = random_toy_model(small_config(), 14);
  ToyTokenizer tok;
  const auto prompt = tok.encode("sample me");
  const Vector probs = next_token_distribution(p, prompt);
  const int n = 10000;
  RngState rng(4242);
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) {
    counts[sample_token(probs, 1.0, 1.0, rng)]++;
  }
  for (std::size_t v = 0; v < probs.size(); ++v) {
    const double expect = n * double(probs[v]);
    if (expect < 5) continue;  // normal approximation needs mass
    const double sigma = std::sqrt(n * double(probs[v]) * (1 - probs[v]));
    CHECK(std::fabs(counts[int(v)] - expect) <= 3 * sigma + 1);
  }
}

TEST_CASE("patchscope identities and direction steering") {
  const auto p = random_toy_model(small_config(), 15);
  ToyTokenizer tok;
  const auto carrier = tok.encode("carrier prompt x");
  const std::size_t pos = carrier.size() - 1;

  const Vector clean_resid = capture_residual(p, carrier, HookPoint{2, pos});
  const Vector clean_dist = next_token_distribution(p, carrier);
  const Vector same = patchscope(p, carrier, 2, clean_resid, pos);
  CHECK(same == clean_dist);  // bit-exact self patch

  const Vector zero(p.config.d_model, 0);
  const Vector zeroed = patchscope(p, carrier, 2, zero, pos);
  CHECK(zeroed != clean_dist);
}

TEST_CASE("patchscope on the bypass fixture decodes unembedding rows") {
  const auto fx = make_linear_bypass_pair(16);
  ToyTokenizer tok;
  const auto carrier = tok.encode("abc def gh");
  const std::size_t pos = carrier.size() - 1;
  const auto& p = fx.pair.reasoning;
  for (const int target : {5, 30, 61}) {
    Vector payload(p.config.d_model);
    for (std::size_t c = 0; c < payload.size(); ++c) {
      payload[c] = real(10) * p.unembedding.at(std::size_t(target), c);
    }
    const Vector dist = patchscope(p, carrier, fx.pair.hook_layer, payload, pos);
    std::size_t best = 0;
    for (std::size_t v = 1; v < dist.size(); ++v) {
      if (dist[v] > dist[best]) best = v;
    }
    CHECK(int(best) == target);
  }
}

TEST_CASE("steer hook applies from the last prompt token onward") {
  const auto p = random_toy_model(small_config(), 17);
  ToyTokenizer tok;
  const auto prompt = tok.encode("steer");
  SamplingConfig cfg{0.0, 1.0, 6, 5};

  // Adding zero through the hook leaves generation token-identical.
  const auto clean = generate(p, prompt, cfg);
  const auto zero_steer = generate(
      p, prompt, cfg, nullptr, 2,
      [](std::size_t, std::span<real>) { /* add nothing */ }, std::nullopt);
  CHECK(clean.tokens == zero_steer.tokens);

  // A large perturbation changes the continuation.
  const auto pushed = generate(
      p, prompt, cfg, nullptr, 2,
      [&](std::size_t, std::span<real> r) {
        for (auto& v : r) v += real(2.5);
      },
      std::nullopt);
  CHECK(clean.tokens != pushed.tokens);
}

TEST_CASE("generate matches full forward bit-exactly") {
  // The incremental path must agree with the layerwise full pass.
  const auto p = random_toy_model(small_config(), 18);
  ToyTokenizer tok;
  const auto prompt = tok.encode("exact check");
  SamplingConfig cfg{0.0, 1.0, 8, 0};
  const auto gen = generate(p, prompt, cfg);
  std::vector<int> ctx = prompt;
  for (const int t : gen.tokens) ctx.push_back(t);
  const Tensor2D full = forward(p, ctx);
  // Replaying greedily over full logits reproduces the same tokens.
  for (std::size_t i = 0; i < gen.tokens.size(); ++i) {
    const auto row = full.row(prompt.size() - 1 + i);
    std::size_t best = 0;
    for (std::size_t v = 1; v < row.size(); ++v) {
      if (row[v] > row[best]) best = v;
    }
    CHECK(int(best) == gen.tokens[i]);
  }
}

TEST_CASE("toy checkpoint round trips byte-identically") {
  TempDir tmp("toy_ckpt");
  const auto p = random_toy_model(small_config(), 19);
  const auto p1 = tmp / "m.xtoy";
  const auto p2 = tmp / "m2.xtoy";
  write_toy_model(p1, p);
  const auto loaded = read_toy_model(p1);
  CHECK(loaded.config.d_model == p.config.d_model);
  CHECK(loaded.config.rms_eps == p.config.rms_eps);
  write_toy_model(p2, loaded);
  CHECK(read_text_file(p1) == read_text_file(p2));

  auto bytes = read_text_file(p1);
  bytes[2] = 'z';
  write_text_file(p1, bytes);
  CHECK_THROWS_AS(read_toy_model(p1), FormatError);
}

TEST_CASE("model pair round trips and validates") {
  TempDir tmp("toy_pair");
  const auto pair = random_model_pair(small_config(), 20);
  const auto path = tmp / "pair.json";
  write_model_pair(path, pair);
  const auto loaded = read_model_pair(path);
  CHECK(loaded.base.embedding.data == pair.base.embedding.data);
  CHECK(loaded.reasoning.layers[1].wq.data == pair.reasoning.layers[1].wq.data);
  CHECK(loaded.hook_layer == pair.hook_layer);
  // The reasoning member is a perturbation, not a copy.
  CHECK(loaded.base.layers[0].wq.data != loaded.reasoning.layers[0].wq.data);
}

TEST_CASE("linear bypass fixture has identity blocks above the hook") {
  const auto fx = make_linear_bypass_pair(21);
  ToyTokenizer tok;
  const auto prompt = tok.encode("identity probe");
  const HookPoint hook{fx.pair.hook_layer, prompt.size() - 1};
  const Vector resid = capture_residual(fx.pair.base, prompt, hook);
  // Upper blocks are identities, so patching the hook residual with any
  // vector v makes the final residual equal v itself; probe via logits.
  RngState rng(22);
  Vector v(fx.pair.base.config.d_model);
  for (auto& x : v) x = real(rng.normal());
  const Tensor2D logits =
      patched_forward(fx.pair.base, prompt, hook, PatchMode::Replace, v);
  Vector n;
  Vector expect;
  {
    // final rmsnorm + unembedding applied to v directly
    const auto& p = fx.pair.base;
    double ms = 0;
    for (const real x : v) ms += double(x) * double(x);
    const double r = std::sqrt(ms / double(v.size()) + p.config.rms_eps);
    expect.assign(p.config.vocab_size, 0);
    for (std::size_t vv = 0; vv < expect.size(); ++vv) {
      double acc = 0;
      for (std::size_t c = 0; c < v.size(); ++c) {
        acc += p.unembedding.at(vv, c) * (p.final_norm_gain[c] * v[c] / r);
      }
      expect[vv] = real(acc);
    }
  }
  const auto last = logits.row(logits.rows - 1);
  for (std::size_t vv = 0; vv < expect.size(); ++vv) {
    CHECK(last[vv] == doctest::Approx(expect[vv]).epsilon(1e-10));
  }

  // Reasoning member differs from base exactly along the promote direction
  // at the hook point.
  const Vector resid_r = capture_residual(fx.pair.reasoning, prompt, hook);
  Vector diff(resid.size());
  for (std::size_t c = 0; c < resid.size(); ++c) diff[c] = resid_r[c] - resid[c];
  const real along = dot(diff, fx.promote_direction);
  Vector residual_component = diff;
  axpy(-along, fx.promote_direction, residual_component);
  CHECK(norm(residual_component) < 1e-10);
}

}  // TEST_SUITE
