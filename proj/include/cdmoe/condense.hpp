// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/params.hpp"

namespace cdmoe {

/// Fixed gate: total gate mass over the calibration tokens that activated
/// the expert, divided by that activation count (the mean active gate).
inline double fixed_gate(const GateStats& stats, int expert_index) {
  if (expert_index < 0 ||
      (std::size_t)expert_index >= stats.num_experts())
    throw ArgumentError("fixed_gate: expert index out of range");
  const auto count = stats.activation_count[(std::size_t)expert_index];
  if (count <= 0)
    throw NeverActivatedError(
        "fixed_gate: expert " + std::to_string(expert_index) +
        " never activated on the calibration data");
  return stats.gate_sum[(std::size_t)expert_index] / (double)count;
}

/// Builds a condensed layer from a routed one: the listed experts are kept
/// with their calibration-averaged gates, shared experts are copied, the
/// router is dropped. The source layer is untouched.
///
/// never_activated_fallback, when set, substitutes that gate value for
/// experts with no calibration activations instead of raising.
inline CondensedLayer condense_layer(
    const RoutedMoELayer& layer, const std::vector<int>& keep,
    const GateStats& stats, int origin = -1,
    std::optional<double> never_activated_fallback = std::nullopt) {
  layer.validate();
  if (stats.num_experts() != layer.num_experts())
    throw ArgumentError("condense_layer: stats cover " +
                        std::to_string(stats.num_experts()) +
                        " experts, layer has " +
                        std::to_string(layer.num_experts()));
  std::set<int> seen;
  for (int idx : keep) {
    if (idx < 0 || (std::size_t)idx >= layer.num_experts())
      throw ArgumentError("condense_layer: expert index " +
                          std::to_string(idx) + " out of range");
    if (!seen.insert(idx).second)
      throw ArgumentError("condense_layer: duplicate expert index " +
                          std::to_string(idx));
  }
  CondensedLayer out;
  out.origin = origin;
  out.kept_gates = Tensor::zeros({keep.size()});
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const int idx = keep[j];
    double gate;
    if (stats.activation_count[(std::size_t)idx] > 0) {
      gate = fixed_gate(stats, idx);
    } else if (never_activated_fallback.has_value()) {
      gate = *never_activated_fallback;
    } else {
      throw NeverActivatedError("condense_layer: kept expert " +
                                std::to_string(idx) +
                                " never activated on calibration data");
    }
    out.kept_experts.push_back(layer.experts[(std::size_t)idx]);
    out.kept_indices.push_back(idx);
    out.kept_gates.data[j] = (float)gate;
  }
  out.shared = layer.shared;
  return out;
}

/// Returns a copy of the model with the given block's routed layer
/// replaced by the condensed layer.
inline MoEModel with_condensed_block(const MoEModel& model, int block,
                                     CondensedLayer condensed) {
  if (block < 0 || (std::size_t)block >= model.num_blocks())
    throw ArgumentError("with_condensed_block: block index out of range");
  MoEModel out = model;
  out.blocks[(std::size_t)block].layer = std::move(condensed);
  return out;
}

// ---------------------------------------------------------------------
// Parameter / FLOP accounting
// ---------------------------------------------------------------------

struct CostReport {
  std::int64_t total_params = 0;
  std::int64_t original_total_params = 0;
  std::int64_t active_params_per_token = 0;
  std::int64_t original_active_params_per_token = 0;
  double memory_ratio = 1.0;           // current / original storage
  std::int64_t flops_per_token = 0;    // 2 * matmul params touched per token
  std::int64_t original_flops_per_token = 0;
  double speedup_estimate = 1.0;       // original flops / current flops
  std::optional<double> measured_tokens_per_second;
};

namespace detail {

inline std::int64_t expert_param_count(const ModelConfig& c) {
  return 3LL * c.hidden_size * c.expert_inner;
}

// matmul weights touched per token inside one block's layers
inline std::int64_t routed_layer_matmul_params(const ModelConfig& c) {
  return (std::int64_t)c.num_routing_experts * c.hidden_size + // router dots
         ((std::int64_t)c.k_active + c.num_shared_experts) *
             expert_param_count(c);
}

inline std::int64_t condensed_layer_matmul_params(const ModelConfig& c,
                                                  std::int64_t kept) {
  return (kept + c.num_shared_experts) * expert_param_count(c);
}

inline std::int64_t attn_matmul_params(const ModelConfig& c) {
  return c.attention_enabled ? 4LL * c.hidden_size * c.hidden_size : 0;
}

} // namespace detail

/// Matmul params touched by one token in the model as currently condensed.
inline std::int64_t matmul_params_per_token(const MoEModel& model) {
  const ModelConfig& c = model.config;
  std::int64_t total = 0;
  for (const auto& block : model.blocks) {
    total += detail::attn_matmul_params(c);
    if (is_routed(block.layer)) {
      total += detail::routed_layer_matmul_params(c);
    } else {
      total += detail::condensed_layer_matmul_params(
          c, (std::int64_t)std::get<CondensedLayer>(block.layer).num_kept());
    }
  }
  total += (std::int64_t)c.hidden_size * c.vocab_size; // lm head
  return total;
}

/// Matmul params per token of the same config fully routed.
inline std::int64_t original_matmul_params_per_token(const ModelConfig& c) {
  return (std::int64_t)c.num_blocks *
             (detail::attn_matmul_params(c) +
              detail::routed_layer_matmul_params(c)) +
         (std::int64_t)c.hidden_size * c.vocab_size;
}

/// Stored parameter count of the fully routed architecture for a config.
inline std::int64_t original_total_params(const ModelConfig& c) {
  const std::int64_t d = c.hidden_size;
  std::int64_t base = (std::int64_t)c.vocab_size * d +   // token embedding
                      (std::int64_t)c.max_seq_len * d +  // position embedding
                      d +                                // output norm
                      d * c.vocab_size;                  // lm head
  std::int64_t per_block =
      2 * d +                       // the two norm vectors
      4 * d * d +                   // attention projections
      (std::int64_t)c.num_routing_experts * d + // centroids
      ((std::int64_t)c.num_routing_experts + c.num_shared_experts) *
          detail::expert_param_count(c);
  return base + (std::int64_t)c.num_blocks * per_block;
}

/// Exact parameter and FLOP accounting from tensor shapes. memory_ratio
/// compares against the fully routed architecture of the model's config.
inline CostReport cost_report(
    const MoEModel& model,
    std::optional<double> measured_tokens_per_second = std::nullopt) {
  const ModelConfig& c = model.config;
  CostReport report;
  for (const auto& ref : named_params(model))
    report.total_params += (std::int64_t)ref.tensor->numel();
  report.original_total_params = original_total_params(c);
  report.memory_ratio =
      (double)report.total_params / (double)report.original_total_params;

  const std::int64_t d = c.hidden_size;
  std::int64_t active = 2 * d; // token + position embedding rows
  for (const auto& block : model.blocks) {
    active += 2 * d + detail::attn_matmul_params(c);
    if (is_routed(block.layer)) {
      active += detail::routed_layer_matmul_params(c);
    } else {
      const auto& cl = std::get<CondensedLayer>(block.layer);
      active += detail::condensed_layer_matmul_params(
                    c, (std::int64_t)cl.num_kept()) +
                (std::int64_t)cl.num_kept(); // fixed gates
    }
  }
  active += d + d * c.vocab_size; // output norm + head
  report.active_params_per_token = active;
  report.original_active_params_per_token =
      2 * d + (std::int64_t)c.num_blocks *
                  (2 * d + detail::attn_matmul_params(c) +
                   detail::routed_layer_matmul_params(c)) +
      d + d * c.vocab_size;

  report.flops_per_token = 2 * matmul_params_per_token(model);
  report.original_flops_per_token = 2 * original_matmul_params_per_token(c);
  report.speedup_estimate =
      (double)report.original_flops_per_token / (double)report.flops_per_token;
  report.measured_tokens_per_second = measured_tokens_per_second;
  return report;
}

} // namespace cdmoe
