// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/rng.hpp"

namespace cdmoe {

/// Dense row-major float32 array. The only value carrier in the engine;
/// shapes are checked at operation boundaries, not per element access.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw ShapeError("Tensor: data length does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t dim : s) n *= dim;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  static Tensor full(std::vector<std::size_t> s, float value) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<float>(n, value));
  }

  /// Gaussian init, mean 0.
  static Tensor randn(std::vector<std::size_t> s, Rng& rng,
                      float stddev = 1.0f) {
    std::size_t n = numel_of(s);
    std::vector<float> d(n);
    for (auto& v : d) v = static_cast<float>(rng.next_normal()) * stddev;
    return Tensor(std::move(s), std::move(d));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 0 : shape[1]; }

  float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  float at(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline void require_matrix(const Tensor& t, const char* who) {
  if (t.rank() != 2)
    throw ShapeError(std::string(who) + ": expected a rank-2 tensor");
}

/// C = A(m x k) * B(k x n). Plain ikj loop; all matrices here are tiny.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape[0], k = a.shape[1];
  if (b.shape[0] != k)
    throw ShapeError("matmul: inner dimensions " + std::to_string(k) + " vs " +
                     std::to_string(b.shape[0]));
  const std::size_t n = b.shape[1];
  Tensor c = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data.data() + i * k;
    float* crow = c.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      const float* brow = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// y = x(1 x k) * W(k x n) as raw pointers; the hot path of every forward.
inline void matvec(const float* x, const float* w, std::size_t k,
                   std::size_t n, float* out) {
  std::fill(out, out + n, 0.0f);
  for (std::size_t p = 0; p < k; ++p) {
    const float xv = x[p];
    if (xv == 0.0f) continue;
    const float* wrow = w + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xv * wrow[j];
  }
}

/// Max-subtracted softmax over a flat vector.
inline Tensor softmax(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("softmax: empty input");
  Tensor out = Tensor::zeros(x.shape);
  const float mx = *std::max_element(x.data.begin(), x.data.end());
  float sum = 0.0f;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    out.data[i] = std::exp(x.data[i] - mx);
    sum += out.data[i];
  }
  const float inv = 1.0f / sum;
  for (auto& v : out.data) v *= inv;
  return out;
}

/// Indices of the k largest entries, ordered by decreasing value with
/// ties broken toward the lowest index. Deterministic by construction.
inline std::vector<std::size_t> topk_indices(const Tensor& x, std::size_t k) {
  const std::size_t n = x.numel();
  if (k < 1 || k > n)
    throw ArgumentError("topk_indices: k=" + std::to_string(k) +
                        " out of range for n=" + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k),
                    idx.end(), [&](std::size_t a, std::size_t b) {
                      if (x.data[a] != x.data[b]) return x.data[a] > x.data[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

/// All eigenvalues of a symmetric matrix, ascending. Cyclic Jacobi in
/// double precision: sweep all (p,q) pairs, rotate away the off-diagonal,
/// stop when the off-diagonal Frobenius norm drops below 1e-9 (relative
/// to the matrix norm) or after 100 sweeps.
inline Tensor symmetric_eigenvalues(const Tensor& m) {
  require_matrix(m, "symmetric_eigenvalues");
  const std::size_t n = m.shape[0];
  if (m.shape[1] != n) throw ShapeError("symmetric_eigenvalues: not square");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::fabs(m.at(i, j) - m.at(j, i)) > 1e-6f)
        throw ArgumentError("symmetric_eigenvalues: matrix is not symmetric "
                            "within 1e-6");

  std::vector<double> a(n * n);
  double fro = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    a[i] = static_cast<double>(m.data[i]);
    fro += a[i] * a[i];
  }
  fro = std::sqrt(fro);
  const double tol = 1e-9 * std::max(1.0, fro);

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
  };

  for (int sweep = 0; sweep < 100 && off_norm() >= tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p];
        const double aqq = a[q * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i * n + p];
          const double aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i];
          const double aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
      }
    }
  }

  std::vector<float> eig(n);
  for (std::size_t i = 0; i < n; ++i)
    eig[i] = static_cast<float>(a[i * n + i]);
  std::sort(eig.begin(), eig.end());
  return Tensor({n}, std::move(eig));
}

inline double trace(const Tensor& m) {
  require_matrix(m, "trace");
  if (m.shape[0] != m.shape[1]) throw ShapeError("trace: not square");
  double t = 0.0;
  for (std::size_t i = 0; i < m.shape[0]; ++i) t += m.at(i, i);
  return t;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

} // namespace cdmoe
