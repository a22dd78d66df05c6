#include "xcoder/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xcoder {

double RngState::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on two fresh uniforms; u1 is kept away from zero.
  double u1 = 0;
  do {
    u1 = uniform();
  } while (u1 <= 0);
  const double u2 = uniform();
  const double mag = std::sqrt(-2.0 * std::log(u1));
  const double two_pi = 6.283185307179586476925286766559;
  spare_ = mag * std::sin(two_pi * u2);
  has_spare_ = true;
  return mag * std::cos(two_pi * u2);
}

std::size_t RngState::uniform_index(std::size_t n) {
  if (n == 0) throw InvalidInputError("uniform_index: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

std::vector<std::size_t> RngState::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::swap(p[i - 1], p[uniform_index(i)]);
  }
  return p;
}

void adam_step(std::span<real> params, std::span<const real> grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw InvalidInputError("adam_step: parameter/gradient/state size mismatch");
  }
  state.step += 1;
  const real b1 = state.config.beta1;
  const real b2 = state.config.beta2;
  const real corr1 = real(1) - std::pow(b1, real(state.step));
  const real corr2 = real(1) - std::pow(b2, real(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const real g = grads[i];
    state.m[i] = b1 * state.m[i] + (real(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (real(1) - b2) * g * g;
    const real mhat = state.m[i] / corr1;
    const real vhat = state.v[i] / corr2;
    params[i] -= state.config.learning_rate * mhat /
                 (std::sqrt(vhat) + state.config.epsilon);
  }
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols != b.rows) {
    throw InvalidInputError("matmul: inner dimensions differ (" +
                            std::to_string(a.cols) + " vs " +
                            std::to_string(b.rows) + ")");
  }
  Tensor2D out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      real acc = 0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += a.at(i, k) * b.at(k, j);
      }
      out.at(i, j) = acc;
    }
  }
  return out;
}

Vector matvec(const Tensor2D& a, const Vector& x) {
  if (a.cols != x.size()) {
    throw InvalidInputError("matvec: dimension mismatch");
  }
  Vector out(a.rows, 0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    out[i] = dot(a.row(i), x);
  }
  return out;
}

Vector matvec_transposed(const Tensor2D& a, const Vector& x) {
  if (a.rows != x.size()) {
    throw InvalidInputError("matvec_transposed: dimension mismatch");
  }
  Vector out(a.cols, 0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const real xi = x[i];
    const real* row = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < a.cols; ++j) out[j] += xi * row[j];
  }
  return out;
}

Vector relu(const Vector& x) {
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : 0;
  return out;
}

Vector softmax(const Vector& logits) {
  Vector out(logits.size());
  if (logits.empty()) return out;
  const real mx = *std::max_element(logits.begin(), logits.end());
  real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

real dot(std::span<const real> a, std::span<const real> b) {
  real acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

real norm(std::span<const real> a) { return std::sqrt(dot(a, a)); }

void axpy(real alpha, std::span<const real> x, std::span<real> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const real> a) {
  for (real v : a) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_finite(std::span<const real> a, const char* what) {
  if (!all_finite(a)) {
    throw NumericalError(std::string(what) + ": non-finite value");
  }
}

}  // namespace xcoder
