// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cdmoe/model.hpp"

namespace cdmoe {

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
};

namespace detail {

template <typename ModelT, typename RefT>
std::vector<RefT> named_params_impl(ModelT& model) {
  std::vector<RefT> out;
  auto add = [&](std::string name, auto& t) {
    out.push_back(RefT{std::move(name), &t});
  };
  add("token_embedding", model.token_embedding);
  add("position_embedding", model.position_embedding);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& block = model.blocks[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    add(prefix + "attn_norm", block.attn_norm);
    add(prefix + "attn.wq", block.attn.wq);
    add(prefix + "attn.wk", block.attn.wk);
    add(prefix + "attn.wv", block.attn.wv);
    add(prefix + "attn.wo", block.attn.wo);
    add(prefix + "moe_norm", block.moe_norm);
    std::visit(
        [&](auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, RoutedMoELayer>) {
            add(prefix + "moe.centroids", layer.centroids);
            for (std::size_t i = 0; i < layer.experts.size(); ++i) {
              const std::string ep =
                  prefix + "moe.experts." + std::to_string(i) + ".";
              add(ep + "w_gate", layer.experts[i].w_gate);
              add(ep + "w_up", layer.experts[i].w_up);
              add(ep + "w_down", layer.experts[i].w_down);
            }
            for (std::size_t s = 0; s < layer.shared.size(); ++s) {
              const std::string sp =
                  prefix + "moe.shared." + std::to_string(s) + ".";
              add(sp + "w_gate", layer.shared[s].w_gate);
              add(sp + "w_up", layer.shared[s].w_up);
              add(sp + "w_down", layer.shared[s].w_down);
            }
          } else {
            add(prefix + "moe.kept_gates", layer.kept_gates);
            for (std::size_t j = 0; j < layer.kept_experts.size(); ++j) {
              const std::string kp =
                  prefix + "moe.kept." + std::to_string(j) + ".";
              add(kp + "w_gate", layer.kept_experts[j].w_gate);
              add(kp + "w_up", layer.kept_experts[j].w_up);
              add(kp + "w_down", layer.kept_experts[j].w_down);
            }
            for (std::size_t s = 0; s < layer.shared.size(); ++s) {
              const std::string sp =
                  prefix + "moe.shared." + std::to_string(s) + ".";
              add(sp + "w_gate", layer.shared[s].w_gate);
              add(sp + "w_up", layer.shared[s].w_up);
              add(sp + "w_down", layer.shared[s].w_down);
            }
          }
        },
        block.layer);
  }
  add("output_norm", model.output_norm);
  add("lm_head", model.lm_head);
  return out;
}

} // namespace detail

/// Canonical name -> tensor listing; the order defines checkpoint layout.
inline std::vector<ParamRef> named_params(MoEModel& model) {
  return detail::named_params_impl<MoEModel, ParamRef>(model);
}

inline std::vector<ConstParamRef> named_params(const MoEModel& model) {
  return detail::named_params_impl<const MoEModel, ConstParamRef>(model);
}

/// True when the tensor lives inside a condensed MoE sublayer; these are
/// the only trainable tensors during lightweight fine-tuning.
inline bool is_condensed_layer_param(const MoEModel& model,
                                     const std::string& name,
                                     bool include_fixed_gates = true) {
  if (name.rfind("blocks.", 0) != 0) return false;
  const std::size_t dot = name.find('.', 7);
  if (dot == std::string::npos) return false;
  const std::size_t block = std::stoul(name.substr(7, dot - 7));
  if (block >= model.blocks.size()) return false;
  if (is_routed(model.blocks[block].layer)) return false;
  const std::string rest = name.substr(dot + 1);
  if (rest.rfind("moe.", 0) != 0) return false;
  if (!include_fixed_gates && rest == "moe.kept_gates") return false;
  return true;
}

} // namespace cdmoe
