// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/tensor.hpp"

namespace cdmoe {

/// A discrete probability distribution: nonnegative, sums to 1 within 1e-6.
struct ProbVector {
  std::vector<float> p;

  static ProbVector from(std::vector<float> values) {
    double sum = 0.0;
    for (float v : values) {
      if (!(v >= 0.0f))
        throw ArgumentError("ProbVector: negative or non-finite entry");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6)
      throw ArgumentError("ProbVector: entries sum to " + std::to_string(sum));
    ProbVector out;
    out.p = std::move(values);
    return out;
  }

  /// Normalizes arbitrary nonnegative weights into a distribution.
  static ProbVector normalized(const std::vector<float>& weights) {
    double sum = 0.0;
    for (float v : weights) sum += v;
    if (!(sum > 0.0)) throw ArgumentError("ProbVector: zero total mass");
    std::vector<float> out(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i)
      out[i] = static_cast<float>(weights[i] / sum);
    return from(std::move(out));
  }

  std::size_t size() const { return p.size(); }
};

enum class DivergenceKind { JS, KL };

namespace detail {

// KL in nats, accumulated in double; v is clamped to eps where u has mass
// but v has none, u-zero terms contribute nothing.
inline double kl_floats(const float* u, const float* v, std::size_t n) {
  constexpr double eps = 1e-12;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (u[i] <= 0.0f) continue;
    const double denom = v[i] > 0.0f ? (double)v[i] : eps;
    acc += (double)u[i] * std::log((double)u[i] / denom);
  }
  return acc;
}

// JS as the literal mixture composition; the mixture is formed at the same
// float precision as the inputs so the expansion identity is exact.
inline double js_floats(const float* u, const float* v, std::size_t n,
                        std::vector<float>& mix_scratch) {
  mix_scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    mix_scratch[i] = 0.5f * (u[i] + v[i]);
  return 0.5 * (kl_floats(u, mix_scratch.data(), n) +
                kl_floats(v, mix_scratch.data(), n));
}

// Row softmax computed in double with max subtraction, emitted as float32
// probabilities (the precision every divergence here is defined over).
inline void softmax_row(const float* x, std::size_t n, float* out) {
  double mx = -1e300;
  for (std::size_t i = 0; i < n; ++i)
    mx = std::max(mx, static_cast<double>(x[i]));
  std::vector<double> e(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = std::exp(static_cast<double>(x[i]) - mx);
    sum += e[i];
  }
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<float>(e[i] / sum);
}

} // namespace detail

/// KL(u, v) = sum_j u_j ln(u_j / v_j), in nats.
inline double kl_divergence(const ProbVector& u, const ProbVector& v) {
  if (u.size() != v.size())
    throw ShapeError("kl_divergence: length mismatch");
  return detail::kl_floats(u.p.data(), v.p.data(), u.size());
}

/// JS(u, v) = (KL(u, m) + KL(v, m)) / 2 with m the even mixture.
/// Symmetric, zero iff u == v, bounded by ln 2.
inline double js_divergence(const ProbVector& u, const ProbVector& v) {
  if (u.size() != v.size())
    throw ShapeError("js_divergence: length mismatch");
  std::vector<float> mix;
  return detail::js_floats(u.p.data(), v.p.data(), u.size(), mix);
}

/// Divergence between two stacks of states with identical shape [T x n].
/// Each row is softmax-normalized along n (hidden dim for layer outputs,
/// vocab dim for logits), the row divergence is taken, and the mean over
/// rows is returned.
inline double output_divergence(const Tensor& ref_states,
                                const Tensor& cand_states,
                                DivergenceKind kind) {
  if (!ref_states.same_shape(cand_states))
    throw ShapeError("output_divergence: shape mismatch");
  require_matrix(ref_states, "output_divergence");
  const std::size_t rows = ref_states.shape[0];
  const std::size_t n = ref_states.shape[1];
  if (rows == 0) throw ShapeError("output_divergence: no rows");

  std::vector<float> pu(n), pv(n), mix;
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    detail::softmax_row(ref_states.data.data() + r * n, n, pu.data());
    detail::softmax_row(cand_states.data.data() + r * n, n, pv.data());
    acc += kind == DivergenceKind::JS
               ? detail::js_floats(pu.data(), pv.data(), n, mix)
               : detail::kl_floats(pu.data(), pv.data(), n);
  }
  return acc / static_cast<double>(rows);
}

/// Mean next-token cross-entropy in nats over logits [T x vocab] against
/// targets tokens[1..T-1], accumulated in double.
inline double cross_entropy_nats(const Tensor& logits,
                                 const std::vector<int>& tokens) {
  require_matrix(logits, "cross_entropy_nats");
  if (tokens.size() < 2)
    throw ArgumentError("cross_entropy_nats: need at least 2 tokens");
  if (logits.shape[0] != tokens.size())
    throw ShapeError("cross_entropy_nats: logits rows != token count");
  const std::size_t vocab = logits.shape[1];
  double acc = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const float* row = logits.data.data() + t * vocab;
    const int target = tokens[t + 1];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab)
      throw ArgumentError("cross_entropy_nats: target token out of range");
    double mx = -1e300;
    for (std::size_t j = 0; j < vocab; ++j)
      mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j)
      sum += std::exp(static_cast<double>(row[j]) - mx);
    acc -= static_cast<double>(row[static_cast<std::size_t>(target)]) - mx -
           std::log(sum);
  }
  return acc / static_cast<double>(tokens.size() - 1);
}

/// exp(mean next-token cross-entropy in nats). Needs at least 2 tokens.
inline double perplexity(const std::vector<int>& tokens, const MoEModel& model,
                         const LayerOverlay* overlay = nullptr) {
  if (tokens.size() < 2)
    throw ArgumentError("perplexity: sequence shorter than 2 tokens");
  const Tensor logits = model_forward(model, tokens, nullptr, overlay);
  return std::exp(cross_entropy_nats(logits, tokens));
}

/// Mean over calibration samples of |PPL(model) - PPL(reference)|;
/// the layer-selection loss for the perplexity metric.
inline double ppl_delta_loss(const MoEModel& ref_model,
                             const MoEModel& cand_model,
                             const std::vector<std::vector<int>>& calibration,
                             const LayerOverlay* cand_overlay = nullptr) {
  if (calibration.empty())
    throw ArgumentError("ppl_delta_loss: empty calibration set");
  double acc = 0.0;
  for (const auto& seq : calibration)
    acc += std::fabs(perplexity(seq, cand_model, cand_overlay) -
                     perplexity(seq, ref_model));
  return acc / static_cast<double>(calibration.size());
}

} // namespace cdmoe
