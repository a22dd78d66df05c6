#include <doctest.h>

#include <cmath>

#include "synthetic.hpp"
#include "test_util.hpp"
#include "xcoder/crosscoder.hpp"

using namespace xcoder;
using namespace xcoder::testing;

namespace {

// Low-rank paired data: both streams are linear images of a shared
// 3-dimensional latent draw.
DatasetManifest write_lowrank_dataset(const std::filesystem::path& dir,
                                      std::size_t d_model, std::size_t n,
                                      std::uint64_t seed) {
  RngState rng(seed);
  Tensor2D mix_b(d_model, 3), mix_r(d_model, 3);
  for (auto& v : mix_b.data) v = real(rng.normal());
  for (auto& v : mix_r.data) v = real(rng.normal());
  Tensor2D base(n, d_model), reasoning(n, d_model);
  std::vector<TokenMetadata> meta(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector c(3);
    for (auto& v : c) v = real(rng.normal());
    for (std::size_t r = 0; r < d_model; ++r) {
      real vb = 0, vr = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        vb += mix_b.at(r, j) * c[j];
        vr += mix_r.at(r, j) * c[j];
      }
      base.at(i, r) = vb;
      reasoning.at(i, r) = vr;
    }
    meta[i] = {i, 0, 0, ""};
  }
  std::filesystem::create_directories(dir);
  const auto p = dir / "lowrank.xcas";
  write_shard(p, base, reasoning, meta);
  return build_manifest({p}, 0, "b", "r", dir);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("lambda zero on low-rank data drives holdout mse below 1%") {
  TempDir tmp("train_lowrank");
  const auto manifest = write_lowrank_dataset(tmp.path(), 8, 4096, 5);

  TrainConfig cfg;
  cfg.d_crosscoder = 16;  // >= 2 * d_model
  cfg.sparsity_coeff = 0;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 64;
  cfg.max_steps = 3000;
  cfg.seed = 7;
  auto [params, report] = train(cfg, manifest);

  CHECK(report.holdout_final < 0.01 * report.holdout_initial);
  for (const Vector* block :
       {&params.enc_base.data, &params.dec_reasoning.data}) {
    CHECK(all_finite(*block));
  }
  CHECK(report.steps.size() == 3000);
}

TEST_CASE("fixed seed reproduces the training trajectory bit-exactly") {
  TempDir tmp("train_repro");
  const auto manifest = write_lowrank_dataset(tmp.path(), 6, 512, 9);
  TrainConfig cfg;
  cfg.d_crosscoder = 8;
  cfg.sparsity_coeff = 0.5;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 32;
  cfg.max_steps = 60;
  cfg.seed = 123;

  auto [p1, r1] = train(cfg, manifest);
  auto [p2, r2] = train(cfg, manifest);
  CHECK(p1.enc_base.data == p2.enc_base.data);
  CHECK(p1.dec_reasoning.data == p2.dec_reasoning.data);
  CHECK(p1.dec_bias_base == p2.dec_bias_base);
  REQUIRE(r1.steps.size() == r2.steps.size());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].total == r2.steps[i].total);
    CHECK(r1.steps[i].sparsity == r2.steps[i].sparsity);
  }
  CHECK(r1.dead_fraction == r2.dead_fraction);
  CHECK(r1.holdout_final == r2.holdout_final);
}

TEST_CASE("divergence raises a training error with the step index") {
  TempDir tmp("train_diverge");
  const auto manifest = write_lowrank_dataset(tmp.path(), 6, 256, 11);
  TrainConfig cfg;
  cfg.d_crosscoder = 8;
  cfg.sparsity_coeff = 0;
  cfg.learning_rate = 1e80;
  cfg.batch_size = 32;
  cfg.max_steps = 50;
  cfg.seed = 1;
  CHECK_THROWS_AS(train(cfg, manifest), TrainingError);
}

TEST_CASE("invalid configs are rejected") {
  TrainConfig cfg;
  cfg.d_crosscoder = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
  cfg.d_crosscoder = 8;
  cfg.sparsity_coeff = -1;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
  cfg.sparsity_coeff = 1;
  cfg.max_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
}

TEST_CASE("planted dictionary at reduced scale is recovered") {
  // Smaller instance of the recovery benchmark so the unit suite stays fast.
  TempDir tmp("train_planted_small");
  RngState dict_rng(31);
  const auto dict = make_planted_dictionary(16, 24, 0, 0, dict_rng);
  const auto manifest =
      write_planted_dataset(tmp.path(), dict, 16384, 2, 33);

  TrainConfig cfg;
  cfg.d_crosscoder = 48;
  cfg.sparsity_coeff = 0.1;
  cfg.learning_rate = 2e-3;
  cfg.batch_size = 64;
  cfg.max_steps = 6000;
  cfg.seed = 35;
  auto [params, report] = train(cfg, manifest);

  const auto matches = greedy_match_atoms(dict, params, ModelSide::Reasoning);
  std::size_t recovered = 0;
  for (const auto& m : matches) {
    if (m.abs_cos >= 0.9) ++recovered;
  }
  // Expect most atoms found; the full-scale bound lives in the acceptance suite.
  CHECK(recovered >= 20);
  CHECK(report.holdout_final < report.holdout_initial);
}

}  // TEST_SUITE
