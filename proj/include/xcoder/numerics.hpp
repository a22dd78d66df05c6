#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "xcoder/errors.hpp"

namespace xcoder {

// Scalar type for all in-memory math. 64-bit by default; -DXCODER_REAL32
// switches bulk values to 32-bit. Disk formats are 32-bit regardless.
#ifdef XCODER_REAL32
using real = float;
#else
using real = double;
#endif

using Vector = std::vector<real>;

// Dense row-major matrix.
struct Tensor2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<real> data;

  Tensor2D() = default;
  Tensor2D(std::size_t r, std::size_t c, real fill = 0)
      : rows(r), cols(c), data(r * c, fill) {}

  real& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  real at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<real> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const real> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }

  std::size_t size() const { return data.size(); }
};

// Counter-style seeded generator. Identical seed + call sequence gives an
// identical output sequence; distributions are implemented here rather than
// taken from <random> so the stream does not depend on the standard library.
class RngState {
 public:
  explicit RngState(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare value is part of the stream.
  double normal();

  // Uniform integer in [0, n), rejection sampled (no modulo bias).
  std::size_t uniform_index(std::size_t n);

  // Seeded Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0;
};

// Adam with bias correction over one flat parameter block.
struct AdamConfig {
  real learning_rate = 1e-3;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real epsilon = 1e-8;
};

struct AdamState {
  long step = 0;
  std::vector<real> m;  // first moment, same shape as the parameter block
  std::vector<real> v;  // second moment
  AdamConfig config;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig cfg)
      : m(n, 0), v(n, 0), config(cfg) {}
};

// In-place update of `params`; throws InvalidInputError on shape mismatch.
void adam_step(std::span<real> params, std::span<const real> grads,
               AdamState& state);

// a[m x k] * b[k x n], fixed left-to-right summation over k.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// a[m x n] * x[n] and a^T * x respectively.
Vector matvec(const Tensor2D& a, const Vector& x);
Vector matvec_transposed(const Tensor2D& a, const Vector& x);

Vector relu(const Vector& x);

// Max-subtracted stable softmax; result sums to 1 and is nonnegative.
Vector softmax(const Vector& logits);

real dot(std::span<const real> a, std::span<const real> b);
real norm(std::span<const real> a);  // Euclidean

// y += alpha * x
void axpy(real alpha, std::span<const real> x, std::span<real> y);

bool all_finite(std::span<const real> a);
void require_finite(std::span<const real> a, const char* what);

}  // namespace xcoder
