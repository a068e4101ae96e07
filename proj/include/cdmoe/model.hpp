// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/rng.hpp"
#include "cdmoe/tensor.hpp"

namespace cdmoe {

constexpr float kRmsNormEps = 1e-5f;

struct ModelConfig {
  int vocab_size = 256;
  int hidden_size = 32;     // d
  int expert_inner = 32;    // f
  int num_blocks = 4;
  int num_routing_experts = 16; // N
  int num_shared_experts = 1;   // S
  int k_active = 2;             // K
  int max_seq_len = 64;
  bool attention_enabled = true;
  // Gate values are raw top-K softmax scores by default; this switches to
  // the renormalized variant where the selected scores are rescaled to
  // sum to 1.
  bool renormalize_gates = false;

  void validate() const {
    std::string problems;
    auto need = [&](bool ok, const char* msg) {
      if (!ok) problems += std::string("  - ") + msg + "\n";
    };
    need(vocab_size > 0, "vocab_size must be positive");
    need(hidden_size > 0, "hidden_size must be positive");
    need(expert_inner > 0, "expert_inner must be positive");
    need(num_blocks > 0, "num_blocks must be positive");
    need(num_routing_experts > 0, "num_routing_experts must be positive");
    need(num_shared_experts >= 1, "num_shared_experts must be >= 1");
    need(k_active >= 1, "k_active must be >= 1");
    need(k_active <= num_routing_experts,
         "k_active must be <= num_routing_experts");
    need(max_seq_len > 0, "max_seq_len must be positive");
    if (!problems.empty())
      throw ConfigError("invalid ModelConfig:\n" + problems);
  }
};

/// Gated feed-forward expert: E(x) = (silu(x W_gate) * (x W_up)) W_down.
struct ExpertMLP {
  Tensor w_gate; // [d x f]
  Tensor w_up;   // [d x f]
  Tensor w_down; // [f x d]

  static ExpertMLP init(int d, int f, Rng& rng, float stddev) {
    ExpertMLP e;
    e.w_gate = Tensor::randn({(std::size_t)d, (std::size_t)f}, rng, stddev);
    e.w_up = Tensor::randn({(std::size_t)d, (std::size_t)f}, rng, stddev);
    e.w_down = Tensor::randn({(std::size_t)f, (std::size_t)d}, rng, stddev);
    return e;
  }

  std::size_t hidden() const { return w_gate.shape[0]; }
  std::size_t inner() const { return w_gate.shape[1]; }

  /// Pure function of the input row.
  void forward(const float* x, float* out) const {
    const std::size_t d = hidden(), f = inner();
    std::vector<float> a(f), b(f);
    matvec(x, w_gate.data.data(), d, f, a.data());
    matvec(x, w_up.data.data(), d, f, b.data());
    for (std::size_t i = 0; i < f; ++i) a[i] = silu(a[i]) * b[i];
    matvec(a.data(), w_down.data.data(), f, d, out);
  }

  std::vector<float> forward(const std::vector<float>& x) const {
    std::vector<float> out(hidden());
    forward(x.data(), out.data());
    return out;
  }
};

/// Routed MoE layer: N routing experts behind a centroid router plus
/// always-on shared experts.
struct RoutedMoELayer {
  std::vector<ExpertMLP> experts;  // E_1..E_N
  std::vector<ExpertMLP> shared;   // always active, outputs summed
  Tensor centroids;                // [N x d], row i is e_i
  int k_active = 1;                // K
  bool renormalize_gates = false;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t hidden() const { return centroids.shape[1]; }

  void validate() const {
    if (experts.empty()) throw ArgumentError("RoutedMoELayer: no experts");
    if (shared.empty())
      throw ArgumentError("RoutedMoELayer: at least one shared expert");
    if (centroids.rank() != 2 || centroids.shape[0] != experts.size())
      throw ShapeError("RoutedMoELayer: centroid rows != expert count");
    if (k_active < 1 || (std::size_t)k_active > experts.size())
      throw ArgumentError("RoutedMoELayer: k_active out of range");
  }
};

/// Dense condensed layer: kept experts with fixed gates, router removed.
/// kept_experts may be empty (shared-only condensation).
struct CondensedLayer {
  std::vector<ExpertMLP> kept_experts;
  Tensor kept_gates;              // [|kept|], fixed gate per kept expert
  std::vector<int> kept_indices;  // original routing-expert indices
  std::vector<ExpertMLP> shared;
  int origin = -1;                // block index of the source routed layer

  std::size_t num_kept() const { return kept_experts.size(); }
};

using MoELayer = std::variant<RoutedMoELayer, CondensedLayer>;

inline bool is_routed(const MoELayer& layer) {
  return std::holds_alternative<RoutedMoELayer>(layer);
}

struct AttentionParams {
  Tensor wq, wk, wv, wo; // each [d x d]
};

struct TransformerBlock {
  Tensor attn_norm; // [d]
  AttentionParams attn;
  Tensor moe_norm;  // [d]
  MoELayer layer;
};

struct MoEModel {
  ModelConfig config;
  Tensor token_embedding;    // [vocab x d]
  Tensor position_embedding; // [max_seq_len x d]
  std::vector<TransformerBlock> blocks;
  Tensor output_norm; // [d]
  Tensor lm_head;     // [d x vocab]

  std::size_t num_blocks() const { return blocks.size(); }
};

/// Per-expert calibration statistics feeding the fixed-gate average.
struct GateStats {
  std::vector<std::int64_t> activation_count;
  std::vector<double> gate_sum;
  std::int64_t total_tokens = 0;

  explicit GateStats(std::size_t num_experts = 0)
      : activation_count(num_experts, 0), gate_sum(num_experts, 0.0) {}

  std::size_t num_experts() const { return activation_count.size(); }

  void merge(const GateStats& other) {
    if (other.num_experts() != num_experts())
      throw ShapeError("GateStats::merge: expert count mismatch");
    for (std::size_t i = 0; i < num_experts(); ++i) {
      activation_count[i] += other.activation_count[i];
      gate_sum[i] += other.gate_sum[i];
    }
    total_tokens += other.total_tokens;
  }
};

inline MoEModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  MoEModel m;
  m.config = config;
  Rng rng(seed);
  const auto d = (std::size_t)config.hidden_size;
  const auto f = config.expert_inner;
  const float w_std = 0.08f;
  const float centroid_std = 1.0f / std::sqrt((float)config.hidden_size);

  m.token_embedding =
      Tensor::randn({(std::size_t)config.vocab_size, d}, rng, w_std);
  m.position_embedding =
      Tensor::randn({(std::size_t)config.max_seq_len, d}, rng, w_std);
  for (int b = 0; b < config.num_blocks; ++b) {
    TransformerBlock block;
    block.attn_norm = Tensor::full({d}, 1.0f);
    block.attn.wq = Tensor::randn({d, d}, rng, w_std);
    block.attn.wk = Tensor::randn({d, d}, rng, w_std);
    block.attn.wv = Tensor::randn({d, d}, rng, w_std);
    block.attn.wo = Tensor::randn({d, d}, rng, w_std);
    block.moe_norm = Tensor::full({d}, 1.0f);
    RoutedMoELayer layer;
    layer.k_active = config.k_active;
    layer.renormalize_gates = config.renormalize_gates;
    layer.centroids = Tensor::randn(
        {(std::size_t)config.num_routing_experts, d}, rng, centroid_std);
    for (int i = 0; i < config.num_routing_experts; ++i)
      layer.experts.push_back(ExpertMLP::init((int)d, f, rng, w_std));
    for (int s = 0; s < config.num_shared_experts; ++s)
      layer.shared.push_back(ExpertMLP::init((int)d, f, rng, w_std));
    block.layer = std::move(layer);
    m.blocks.push_back(std::move(block));
  }
  m.output_norm = Tensor::full({d}, 1.0f);
  m.lm_head = Tensor::randn({d, (std::size_t)config.vocab_size}, rng, w_std);
  return m;
}

inline void rmsnorm(const float* x, const float* weight, std::size_t d,
                    float* out) {
  double ss = 0.0;
  for (std::size_t i = 0; i < d; ++i) ss += (double)x[i] * (double)x[i];
  const float inv =
      1.0f / std::sqrt((float)(ss / (double)d) + kRmsNormEps);
  for (std::size_t i = 0; i < d; ++i) out[i] = x[i] * inv * weight[i];
}

/// Router scores s_t = softmax(x_t . e_i over i). The exp-sum is
/// accumulated in decreasing-score order, which makes the result invariant
/// under expert permutations (same values, same addition order).
inline Tensor gate_scores(const Tensor& x_t, const RoutedMoELayer& layer) {
  const std::size_t d = layer.hidden();
  if (x_t.numel() != d) throw ShapeError("gate_scores: x_t length != d");
  const std::size_t n = layer.num_experts();
  Tensor dots = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) {
    const float* e = layer.centroids.data.data() + i * d;
    float acc = 0.0f;
    for (std::size_t j = 0; j < d; ++j) acc += x_t.data[j] * e[j];
    dots.data[i] = acc;
  }
  std::vector<std::size_t> order = topk_indices(dots, n); // full desc sort
  Tensor s = Tensor::zeros({n});
  const float mx = dots.data[order[0]];
  float sum = 0.0f;
  for (std::size_t idx : order) {
    s.data[idx] = std::exp(dots.data[idx] - mx);
    sum += s.data[idx];
  }
  const float inv = 1.0f / sum;
  for (auto& v : s.data) v *= inv;
  return s;
}

struct RoutedForwardResult {
  Tensor h;     // [d]
  Tensor gates; // [N], exactly K nonzero
};

namespace detail {

/// Sum of gated expert outputs plus shared experts, without the residual.
/// Selected experts are accumulated in decreasing-gate order.
inline void expert_contrib_routed(const float* x, const RoutedMoELayer& layer,
                                  const Tensor& gates,
                                  const std::vector<std::size_t>& selected,
                                  float* out) {
  const std::size_t d = layer.hidden();
  std::fill(out, out + d, 0.0f);
  std::vector<float> buf(d);
  for (std::size_t idx : selected) {
    layer.experts[idx].forward(x, buf.data());
    const float g = gates.data[idx];
    for (std::size_t j = 0; j < d; ++j) out[j] += g * buf[j];
  }
  for (const auto& sh : layer.shared) {
    sh.forward(x, buf.data());
    for (std::size_t j = 0; j < d; ++j) out[j] += buf[j];
  }
}

inline void expert_contrib_condensed(const float* x,
                                     const CondensedLayer& layer, float* out) {
  const std::size_t d =
      layer.shared.empty() ? layer.kept_experts[0].hidden()
                           : layer.shared[0].hidden();
  std::fill(out, out + d, 0.0f);
  std::vector<float> buf(d);
  for (std::size_t j = 0; j < layer.kept_experts.size(); ++j) {
    layer.kept_experts[j].forward(x, buf.data());
    const float g = layer.kept_gates.data[j];
    for (std::size_t q = 0; q < d; ++q) out[q] += g * buf[q];
  }
  for (const auto& sh : layer.shared) {
    sh.forward(x, buf.data());
    for (std::size_t q = 0; q < d; ++q) out[q] += buf[q];
  }
}

} // namespace detail

/// One token through a routed layer: h_t = sum_i g_i E_i(x_t) + shared
/// contributions + x_t, with g the top-K mask of the softmax scores.
inline RoutedForwardResult routed_forward(const Tensor& x_t,
                                          const RoutedMoELayer& layer) {
  layer.validate();
  const std::size_t d = layer.hidden();
  if (x_t.numel() != d) throw ShapeError("routed_forward: x_t length != d");
  Tensor s = gate_scores(x_t, layer);
  const std::vector<std::size_t> selected =
      topk_indices(s, (std::size_t)layer.k_active);
  Tensor gates = Tensor::zeros({layer.num_experts()});
  if (layer.renormalize_gates) {
    float denom = 0.0f;
    for (std::size_t idx : selected) denom += s.data[idx];
    for (std::size_t idx : selected) gates.data[idx] = s.data[idx] / denom;
  } else {
    for (std::size_t idx : selected) gates.data[idx] = s.data[idx];
  }
  RoutedForwardResult result;
  result.h = Tensor::zeros({d});
  detail::expert_contrib_routed(x_t.data.data(), layer, gates, selected,
                                result.h.data.data());
  for (std::size_t j = 0; j < d; ++j) result.h.data[j] += x_t.data[j];
  result.gates = std::move(gates);
  return result;
}

/// One token through a condensed layer: every kept expert fires with its
/// fixed gate, no routing.
inline Tensor condensed_forward(const Tensor& x_t,
                                const CondensedLayer& layer) {
  const std::size_t d = x_t.numel();
  Tensor h = Tensor::zeros({d});
  if (layer.kept_experts.empty() && layer.shared.empty()) {
    h.data = x_t.data;
    return h;
  }
  detail::expert_contrib_condensed(x_t.data.data(), layer, h.data.data());
  for (std::size_t j = 0; j < d; ++j) h.data[j] += x_t.data[j];
  return h;
}

/// Per-block activations captured during a forward pass, for calibration
/// and selection consumers.
struct ForwardTrace {
  // normalized input fed to each block's MoE sublayer, [T x d] per block
  std::vector<Tensor> moe_inputs;
  // routed_forward / condensed_forward outputs, [T x d] per block
  std::vector<Tensor> layer_outputs;
  // gate values per token, [T x N] per block (empty for condensed blocks)
  std::vector<Tensor> gates;
};

/// Condensed layers substituted for routed ones during evaluation, without
/// touching the model. Keyed by block index.
struct LayerOverlay {
  std::unordered_map<int, const CondensedLayer*> layers;

  const CondensedLayer* find(int block) const {
    auto it = layers.find(block);
    return it == layers.end() ? nullptr : it->second;
  }
};

/// Full forward pass: token + position embedding, per block a causal
/// single-head attention sublayer (optional) and the MoE sublayer, then
/// the output norm and LM head. Returns next-token logits [T x vocab].
inline Tensor model_forward(const MoEModel& model,
                            const std::vector<int>& tokens,
                            ForwardTrace* trace = nullptr,
                            const LayerOverlay* overlay = nullptr) {
  const auto& cfg = model.config;
  const std::size_t d = (std::size_t)cfg.hidden_size;
  const std::size_t T = tokens.size();
  if (T > (std::size_t)cfg.max_seq_len)
    throw ArgumentError("model_forward: sequence longer than max_seq_len");
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw ArgumentError("model_forward: token id out of range: " +
                          std::to_string(id));
  if (trace) {
    trace->moe_inputs.assign(model.num_blocks(), Tensor::zeros({T, d}));
    trace->layer_outputs.assign(model.num_blocks(), Tensor::zeros({T, d}));
    trace->gates.clear();
    trace->gates.resize(model.num_blocks());
  }
  Tensor logits = Tensor::zeros({T, (std::size_t)cfg.vocab_size});
  if (T == 0) return logits;

  // residual stream x, [T x d]
  Tensor x = Tensor::zeros({T, d});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x.at(t, j) = model.token_embedding.at((std::size_t)tokens[t], j) +
                   model.position_embedding.at(t, j);

  std::vector<float> normed(d), contrib(d);
  const float inv_sqrt_d = 1.0f / std::sqrt((float)d);

  for (std::size_t b = 0; b < model.num_blocks(); ++b) {
    const TransformerBlock& block = model.blocks[b];

    if (cfg.attention_enabled) {
      Tensor q = Tensor::zeros({T, d}), k = Tensor::zeros({T, d}),
             v = Tensor::zeros({T, d});
      for (std::size_t t = 0; t < T; ++t) {
        rmsnorm(x.data.data() + t * d, block.attn_norm.data.data(), d,
                normed.data());
        matvec(normed.data(), block.attn.wq.data.data(), d, d,
               q.data.data() + t * d);
        matvec(normed.data(), block.attn.wk.data.data(), d, d,
               k.data.data() + t * d);
        matvec(normed.data(), block.attn.wv.data.data(), d, d,
               v.data.data() + t * d);
      }
      std::vector<float> scores(T), ctx(d), attn_out(d);
      for (std::size_t t = 0; t < T; ++t) {
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          float dot = 0.0f;
          for (std::size_t j = 0; j < d; ++j)
            dot += q.at(t, j) * k.at(u, j);
          scores[u] = dot * inv_sqrt_d;
          mx = std::max(mx, scores[u]);
        }
        float denom = 0.0f;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - mx);
          denom += scores[u];
        }
        std::fill(ctx.begin(), ctx.end(), 0.0f);
        for (std::size_t u = 0; u <= t; ++u) {
          const float p = scores[u] / denom;
          for (std::size_t j = 0; j < d; ++j) ctx[j] += p * v.at(u, j);
        }
        matvec(ctx.data(), block.attn.wo.data.data(), d, d, attn_out.data());
        for (std::size_t j = 0; j < d; ++j) x.at(t, j) += attn_out[j];
      }
    }

    const CondensedLayer* override_layer =
        overlay ? overlay->find((int)b) : nullptr;
    const bool routed = override_layer == nullptr && is_routed(block.layer);
    const RoutedMoELayer* routed_layer =
        routed ? &std::get<RoutedMoELayer>(block.layer) : nullptr;
    const CondensedLayer* condensed_layer =
        override_layer ? override_layer
        : routed       ? nullptr
                       : &std::get<CondensedLayer>(block.layer);
    if (trace && routed)
      trace->gates[b] = Tensor::zeros({T, routed_layer->num_experts()});

    Tensor x_row = Tensor::zeros({d});
    for (std::size_t t = 0; t < T; ++t) {
      rmsnorm(x.data.data() + t * d, block.moe_norm.data.data(), d,
              x_row.data.data());
      if (trace)
        std::copy(x_row.data.begin(), x_row.data.end(),
                  trace->moe_inputs[b].data.begin() + t * d);
      if (routed) {
        RoutedForwardResult rf = routed_forward(x_row, *routed_layer);
        for (std::size_t j = 0; j < d; ++j)
          contrib[j] = rf.h.data[j] - x_row.data[j];
        if (trace) {
          std::copy(rf.h.data.begin(), rf.h.data.end(),
                    trace->layer_outputs[b].data.begin() + t * d);
          std::copy(rf.gates.data.begin(), rf.gates.data.end(),
                    trace->gates[b].data.begin() +
                        t * routed_layer->num_experts());
        }
      } else {
        Tensor h = condensed_forward(x_row, *condensed_layer);
        for (std::size_t j = 0; j < d; ++j)
          contrib[j] = h.data[j] - x_row.data[j];
        if (trace)
          std::copy(h.data.begin(), h.data.end(),
                    trace->layer_outputs[b].data.begin() + t * d);
      }
      for (std::size_t j = 0; j < d; ++j) x.at(t, j) += contrib[j];
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    rmsnorm(x.data.data() + t * d, model.output_norm.data.data(), d,
            normed.data());
    matvec(normed.data(), model.lm_head.data.data(), d,
           (std::size_t)cfg.vocab_size, logits.data.data() + t * cfg.vocab_size);
  }
  return logits;
}

/// Accumulates activation counts and gate sums for every routing expert of
/// one layer over all calibration tokens.
inline GateStats collect_gate_stats(
    const std::vector<std::vector<int>>& calibration, const MoEModel& model,
    int layer_index) {
  if (layer_index < 0 || (std::size_t)layer_index >= model.num_blocks())
    throw ArgumentError("collect_gate_stats: layer index out of range");
  const MoELayer& layer = model.blocks[(std::size_t)layer_index].layer;
  if (!is_routed(layer))
    throw StateError("collect_gate_stats: layer " +
                     std::to_string(layer_index) + " is already condensed");
  const std::size_t n = std::get<RoutedMoELayer>(layer).num_experts();
  GateStats stats(n);
  for (const auto& seq : calibration) {
    ForwardTrace trace;
    model_forward(model, seq, &trace);
    const Tensor& gates = trace.gates[(std::size_t)layer_index];
    for (std::size_t t = 0; t < seq.size(); ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        const float g = gates.at(t, i);
        if (g != 0.0f) {
          stats.activation_count[i] += 1;
          stats.gate_sum[i] += (double)g;
        }
      }
    }
    stats.total_tokens += (std::int64_t)seq.size();
  }
  return stats;
}

} // namespace cdmoe
