// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/metrics.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/params.hpp"
#include "cdmoe/rng.hpp"
#include "cdmoe/tensor.hpp"

namespace cdmoe {

/// Which named tensors the optimizer may update. Everything else is
/// frozen bitwise.
struct ParamMask {
  std::set<std::string> trainable;

  bool is_trainable(const std::string& name) const {
    return trainable.count(name) > 0;
  }

  static ParamMask all(const MoEModel& model) {
    ParamMask mask;
    for (const auto& ref : named_params(model)) mask.trainable.insert(ref.name);
    return mask;
  }

  static ParamMask frozen() { return ParamMask{}; }

  /// Lightweight-SFT mask: exactly the tensors inside condensed MoE
  /// sublayers (kept experts, shared experts, and the fixed gates unless
  /// excluded). Routers, attention, norms, embeddings and the head stay
  /// frozen.
  static ParamMask condensed_layers(const MoEModel& model,
                                    bool include_fixed_gates = true) {
    ParamMask mask;
    for (const auto& ref : named_params(model))
      if (is_condensed_layer_param(model, ref.name, include_fixed_gates))
        mask.trainable.insert(ref.name);
    return mask;
  }
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double warmup_ratio = 0.10; // fraction of steps spent ramping up
  int steps = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double aux_loss_coeff = 0.0; // load-balancing term, pretraining only
  int eval_every = 25;        // 0 disables periodic eval

  void validate() const {
    std::string problems;
    auto need = [&](bool ok, const char* msg) {
      if (!ok) problems += std::string("  - ") + msg + "\n";
    };
    need(learning_rate > 0.0, "learning_rate must be > 0");
    need(warmup_ratio >= 0.0 && warmup_ratio < 1.0,
         "warmup_ratio must be in [0, 1)");
    need(steps >= 0, "steps must be >= 0");
    need(batch_size > 0, "batch_size must be > 0");
    need(aux_loss_coeff >= 0.0, "aux_loss_coeff must be >= 0");
    if (!problems.empty()) throw ConfigError("invalid TrainConfig:\n" + problems);
  }
};

/// Linear warmup to learning_rate, then cosine decay to zero.
inline double lr_at_step(const TrainConfig& cfg, int step) {
  const int warmup = (int)std::lround(cfg.warmup_ratio * cfg.steps);
  if (step < warmup) return cfg.learning_rate * (double)(step + 1) / warmup;
  if (cfg.steps <= warmup) return cfg.learning_rate;
  const double progress = (double)(step - warmup) / (double)(cfg.steps - warmup);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct GradResult {
  double loss = 0.0;     // mean next-token cross-entropy, nats
  double aux_loss = 0.0; // load-balancing value (before the coefficient)
  std::map<std::string, Tensor> grads; // trainable tensors only
};

namespace detail {

struct ExpertSlot {
  const ExpertMLP* expert = nullptr;
  Tensor* grad_gate = nullptr; // w_gate gradient sink, may be null (frozen path still backprops x)
  Tensor* grad_up = nullptr;
  Tensor* grad_down = nullptr;
  float gate = 0.0f;
  std::vector<float> a, b, out; // x*w_gate, x*w_up, expert output
};

struct BlockCache {
  std::vector<float> attn_in;   // [T x d], residual stream entering block
  std::vector<float> attn_norm; // [T x d]
  std::vector<float> q, k, v;   // [T x d]
  std::vector<float> probs;     // [T x T], row-causal
  std::vector<float> ctx;       // [T x d]
  std::vector<float> moe_in;    // [T x d]
  std::vector<float> moe_norm;  // [T x d]
  std::vector<float> scores;    // [T x N], routed only
  std::vector<std::vector<ExpertSlot>> routing;  // per token, selected
  std::vector<std::vector<ExpertSlot>> shared;   // per token
  std::vector<std::vector<ExpertSlot>> kept;     // per token (condensed)
};

struct SeqCache {
  const std::vector<int>* tokens = nullptr;
  std::vector<BlockCache> blocks;
  std::vector<float> final_in;   // [T x d]
  std::vector<float> final_norm; // [T x d]
  std::vector<float> logits;     // [T x vocab]
};

// silu'(x) = s(x) * (1 + x * (1 - s(x)))
inline float silu_grad(float x) {
  const float s = 1.0f / (1.0f + std::exp(-x));
  return s * (1.0f + x * (1.0f - s));
}

inline void expert_forward_cached(const ExpertMLP& e, const float* x,
                                  ExpertSlot& slot) {
  const std::size_t d = e.hidden(), f = e.inner();
  slot.a.resize(f);
  slot.b.resize(f);
  slot.out.resize(d);
  matvec(x, e.w_gate.data.data(), d, f, slot.a.data());
  matvec(x, e.w_up.data.data(), d, f, slot.b.data());
  std::vector<float> h(f);
  for (std::size_t i = 0; i < f; ++i) h[i] = silu(slot.a[i]) * slot.b[i];
  matvec(h.data(), e.w_down.data.data(), f, d, slot.out.data());
}

// backward through one expert; d_out is the gradient at the expert output,
// d_x accumulates the input gradient
inline void expert_backward(const ExpertSlot& slot, const float* x,
                            const float* d_out, float* d_x) {
  const ExpertMLP& e = *slot.expert;
  const std::size_t d = e.hidden(), f = e.inner();
  std::vector<float> h(f), d_h(f, 0.0f);
  for (std::size_t i = 0; i < f; ++i) h[i] = silu(slot.a[i]) * slot.b[i];
  // w_down and d_h
  for (std::size_t i = 0; i < f; ++i) {
    const float* wrow = e.w_down.data.data() + i * d;
    float acc = 0.0f;
    for (std::size_t j = 0; j < d; ++j) acc += wrow[j] * d_out[j];
    d_h[i] = acc;
  }
  if (slot.grad_down) {
    for (std::size_t i = 0; i < f; ++i) {
      float* grow = slot.grad_down->data.data() + i * d;
      const float hi = h[i];
      for (std::size_t j = 0; j < d; ++j) grow[j] += hi * d_out[j];
    }
  }
  std::vector<float> d_a(f), d_b(f);
  for (std::size_t i = 0; i < f; ++i) {
    d_a[i] = d_h[i] * slot.b[i] * silu_grad(slot.a[i]);
    d_b[i] = d_h[i] * silu(slot.a[i]);
  }
  if (slot.grad_gate) {
    for (std::size_t j = 0; j < d; ++j) {
      float* grow = slot.grad_gate->data.data() + j * f;
      const float xj = x[j];
      for (std::size_t i = 0; i < f; ++i) grow[i] += xj * d_a[i];
    }
  }
  if (slot.grad_up) {
    for (std::size_t j = 0; j < d; ++j) {
      float* grow = slot.grad_up->data.data() + j * f;
      const float xj = x[j];
      for (std::size_t i = 0; i < f; ++i) grow[i] += xj * d_b[i];
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const float* wg = e.w_gate.data.data() + j * f;
    const float* wu = e.w_up.data.data() + j * f;
    float acc = 0.0f;
    for (std::size_t i = 0; i < f; ++i)
      acc += wg[i] * d_a[i] + wu[i] * d_b[i];
    d_x[j] += acc;
  }
}

// d_x = backward of y = rmsnorm(x; w); returns via accumulation, also
// accumulates the weight gradient when given
inline void rmsnorm_backward(const float* x, const float* w, std::size_t d,
                             const float* d_y, float* d_x, float* d_w) {
  double ss = 0.0;
  for (std::size_t i = 0; i < d; ++i) ss += (double)x[i] * (double)x[i];
  const float inv = 1.0f / std::sqrt((float)(ss / (double)d) + kRmsNormEps);
  double dot = 0.0; // sum_i d_y_i * w_i * x_i
  for (std::size_t i = 0; i < d; ++i)
    dot += (double)d_y[i] * (double)w[i] * (double)x[i];
  const float common = (float)(dot * (double)inv * (double)inv * (double)inv /
                               (double)d);
  for (std::size_t i = 0; i < d; ++i) {
    d_x[i] += d_y[i] * w[i] * inv - x[i] * common;
    if (d_w) d_w[i] += d_y[i] * x[i] * inv;
  }
}

} // namespace detail

/// Mean next-token cross-entropy over the batch plus reverse-mode
/// gradients for mask-trainable tensors. Routed blocks propagate gradients
/// only through the selected experts and their gate scores; the selection
/// indices themselves are treated as constants.
///
/// aux_coeff > 0 adds the load-balancing term: per routed block, the mean
/// squared deviation of each expert's mean softmax mass from uniform.
inline GradResult loss_and_grads(const MoEModel& model,
                                 const std::vector<std::vector<int>>& batch,
                                 const ParamMask& mask,
                                 double aux_coeff = 0.0) {
  if (batch.empty()) throw ArgumentError("loss_and_grads: empty batch");
  const ModelConfig& cfg = model.config;
  const std::size_t d = (std::size_t)cfg.hidden_size;
  const std::size_t vocab = (std::size_t)cfg.vocab_size;
  const float inv_sqrt_d = 1.0f / std::sqrt((float)d);

  // gradient tensors for every parameter; filtered by mask on return
  std::map<std::string, Tensor> grads;
  std::map<std::string, Tensor*> grad_of;
  {
    for (const auto& ref : named_params(model))
      grads.emplace(ref.name, Tensor::zeros(ref.tensor->shape));
    for (auto& [name, tensor] : grads) grad_of[name] = &tensor;
  }
  auto block_grad = [&](std::size_t b, const std::string& suffix) {
    return grad_of.at("blocks." + std::to_string(b) + "." + suffix);
  };

  std::int64_t positions = 0;
  for (const auto& seq : batch) {
    if (seq.size() < 2)
      throw ArgumentError("loss_and_grads: sequences need >= 2 tokens");
    if (seq.size() > (std::size_t)cfg.max_seq_len)
      throw ArgumentError("loss_and_grads: sequence longer than max_seq_len");
    positions += (std::int64_t)seq.size() - 1;
  }

  // ---------------- forward, caching everything ----------------
  std::vector<detail::SeqCache> caches(batch.size());
  double ce_acc = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& tokens = batch[s];
    const std::size_t T = tokens.size();
    detail::SeqCache& cache = caches[s];
    cache.tokens = &tokens;
    cache.blocks.resize(model.num_blocks());

    std::vector<float> x(T * d);
    for (std::size_t t = 0; t < T; ++t) {
      const int id = tokens[t];
      if (id < 0 || id >= cfg.vocab_size)
        throw ArgumentError("loss_and_grads: token id out of range");
      for (std::size_t j = 0; j < d; ++j)
        x[t * d + j] = model.token_embedding.at((std::size_t)id, j) +
                       model.position_embedding.at(t, j);
    }

    for (std::size_t b = 0; b < model.num_blocks(); ++b) {
      const TransformerBlock& block = model.blocks[b];
      detail::BlockCache& bc = cache.blocks[b];
      bc.attn_in = x;
      if (cfg.attention_enabled) {
        bc.attn_norm.resize(T * d);
        bc.q.resize(T * d);
        bc.k.resize(T * d);
        bc.v.resize(T * d);
        bc.probs.assign(T * T, 0.0f);
        bc.ctx.resize(T * d);
        for (std::size_t t = 0; t < T; ++t) {
          rmsnorm(x.data() + t * d, block.attn_norm.data.data(), d,
                  bc.attn_norm.data() + t * d);
          matvec(bc.attn_norm.data() + t * d, block.attn.wq.data.data(), d, d,
                 bc.q.data() + t * d);
          matvec(bc.attn_norm.data() + t * d, block.attn.wk.data.data(), d, d,
                 bc.k.data() + t * d);
          matvec(bc.attn_norm.data() + t * d, block.attn.wv.data.data(), d, d,
                 bc.v.data() + t * d);
        }
        std::vector<float> scores(T), attn_out(d);
        for (std::size_t t = 0; t < T; ++t) {
          float mx = -std::numeric_limits<float>::infinity();
          for (std::size_t u = 0; u <= t; ++u) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < d; ++j)
              dot += bc.q[t * d + j] * bc.k[u * d + j];
            scores[u] = dot * inv_sqrt_d;
            mx = std::max(mx, scores[u]);
          }
          float denom = 0.0f;
          for (std::size_t u = 0; u <= t; ++u) {
            scores[u] = std::exp(scores[u] - mx);
            denom += scores[u];
          }
          float* ctx = bc.ctx.data() + t * d;
          std::fill(ctx, ctx + d, 0.0f);
          for (std::size_t u = 0; u <= t; ++u) {
            const float p = scores[u] / denom;
            bc.probs[t * T + u] = p;
            for (std::size_t j = 0; j < d; ++j) ctx[j] += p * bc.v[u * d + j];
          }
          matvec(ctx, block.attn.wo.data.data(), d, d, attn_out.data());
          for (std::size_t j = 0; j < d; ++j) x[t * d + j] += attn_out[j];
        }
      }
      bc.moe_in = x;
      bc.moe_norm.resize(T * d);
      const bool routed = is_routed(block.layer);
      const RoutedMoELayer* rl =
          routed ? &std::get<RoutedMoELayer>(block.layer) : nullptr;
      const CondensedLayer* cl =
          routed ? nullptr : &std::get<CondensedLayer>(block.layer);
      const std::string prefix = "blocks." + std::to_string(b) + ".moe.";
      if (routed) bc.scores.resize(T * rl->num_experts());
      bc.routing.resize(T);
      bc.shared.resize(T);
      bc.kept.resize(T);
      Tensor norm_row = Tensor::zeros({d});
      for (std::size_t t = 0; t < T; ++t) {
        rmsnorm(x.data() + t * d, block.moe_norm.data.data(), d,
                bc.moe_norm.data() + t * d);
        std::copy(bc.moe_norm.begin() + (std::ptrdiff_t)(t * d),
                  bc.moe_norm.begin() + (std::ptrdiff_t)((t + 1) * d),
                  norm_row.data.begin());
        std::vector<float> contrib(d, 0.0f);
        if (routed) {
          Tensor sc = gate_scores(norm_row, *rl);
          std::copy(sc.data.begin(), sc.data.end(),
                    bc.scores.begin() + (std::ptrdiff_t)(t * rl->num_experts()));
          const auto selected = topk_indices(sc, (std::size_t)rl->k_active);
          float renorm = 1.0f;
          if (rl->renormalize_gates) {
            renorm = 0.0f;
            for (std::size_t idx : selected) renorm += sc.data[idx];
          }
          for (std::size_t idx : selected) {
            detail::ExpertSlot slot;
            slot.expert = &rl->experts[idx];
            const std::string ep = prefix + "experts." + std::to_string(idx);
            slot.grad_gate = grad_of.at(ep + ".w_gate");
            slot.grad_up = grad_of.at(ep + ".w_up");
            slot.grad_down = grad_of.at(ep + ".w_down");
            slot.gate = rl->renormalize_gates ? sc.data[idx] / renorm
                                              : sc.data[idx];
            detail::expert_forward_cached(*slot.expert, norm_row.data.data(),
                                          slot);
            for (std::size_t j = 0; j < d; ++j)
              contrib[j] += slot.gate * slot.out[j];
            bc.routing[t].push_back(std::move(slot));
          }
        } else {
          for (std::size_t kx = 0; kx < cl->kept_experts.size(); ++kx) {
            detail::ExpertSlot slot;
            slot.expert = &cl->kept_experts[kx];
            const std::string kp = prefix + "kept." + std::to_string(kx);
            slot.grad_gate = grad_of.at(kp + ".w_gate");
            slot.grad_up = grad_of.at(kp + ".w_up");
            slot.grad_down = grad_of.at(kp + ".w_down");
            slot.gate = cl->kept_gates.data[kx];
            detail::expert_forward_cached(*slot.expert, norm_row.data.data(),
                                          slot);
            for (std::size_t j = 0; j < d; ++j)
              contrib[j] += slot.gate * slot.out[j];
            bc.kept[t].push_back(std::move(slot));
          }
        }
        const auto& shared_list = routed ? rl->shared : cl->shared;
        for (std::size_t sx = 0; sx < shared_list.size(); ++sx) {
          detail::ExpertSlot slot;
          slot.expert = &shared_list[sx];
          const std::string sp = prefix + "shared." + std::to_string(sx);
          slot.grad_gate = grad_of.at(sp + ".w_gate");
          slot.grad_up = grad_of.at(sp + ".w_up");
          slot.grad_down = grad_of.at(sp + ".w_down");
          slot.gate = 1.0f;
          detail::expert_forward_cached(*slot.expert, norm_row.data.data(),
                                        slot);
          for (std::size_t j = 0; j < d; ++j) contrib[j] += slot.out[j];
          bc.shared[t].push_back(std::move(slot));
        }
        for (std::size_t j = 0; j < d; ++j) x[t * d + j] += contrib[j];
      }
    }

    cache.final_in = x;
    cache.final_norm.resize(T * d);
    cache.logits.resize(T * vocab);
    for (std::size_t t = 0; t < T; ++t) {
      rmsnorm(x.data() + t * d, model.output_norm.data.data(), d,
              cache.final_norm.data() + t * d);
      matvec(cache.final_norm.data() + t * d, model.lm_head.data.data(), d,
             vocab, cache.logits.data() + t * vocab);
    }
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const float* row = cache.logits.data() + t * vocab;
      double mx = -1e300;
      for (std::size_t j = 0; j < vocab; ++j)
        mx = std::max(mx, (double)row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < vocab; ++j)
        denom += std::exp((double)row[j] - mx);
      ce_acc -= (double)row[(std::size_t)tokens[t + 1]] - mx - std::log(denom);
    }
  }
  const double ce_loss = ce_acc / (double)positions;
  if (!std::isfinite(ce_loss)) {
    for (const auto& ref : named_params(model))
      for (float v : ref.tensor->data)
        if (!std::isfinite(v))
          throw NumericError("loss_and_grads: non-finite loss; tensor " +
                             ref.name + " contains non-finite values");
    throw NumericError("loss_and_grads: non-finite loss from finite weights");
  }

  // load-balancing statistics over the whole batch, per routed block
  std::vector<std::vector<double>> mean_mass(model.num_blocks());
  std::int64_t token_total = 0;
  for (const auto& seq : batch) token_total += (std::int64_t)seq.size();
  int routed_blocks = 0;
  double aux_value = 0.0;
  if (aux_coeff > 0.0) {
    for (std::size_t b = 0; b < model.num_blocks(); ++b) {
      if (!is_routed(model.blocks[b].layer)) continue;
      ++routed_blocks;
      const std::size_t n =
          std::get<RoutedMoELayer>(model.blocks[b].layer).num_experts();
      mean_mass[b].assign(n, 0.0);
      for (const auto& cache : caches) {
        const std::size_t T = cache.tokens->size();
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t i = 0; i < n; ++i)
            mean_mass[b][i] += (double)cache.blocks[b].scores[t * n + i];
      }
      for (auto& v : mean_mass[b]) v /= (double)token_total;
      const double uniform = 1.0 / (double)n;
      double dev = 0.0;
      for (double v : mean_mass[b]) dev += (v - uniform) * (v - uniform);
      aux_value += dev / (double)n;
    }
    if (routed_blocks > 0) aux_value /= (double)routed_blocks;
  }

  // ---------------- backward ----------------
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& tokens = batch[s];
    const std::size_t T = tokens.size();
    detail::SeqCache& cache = caches[s];

    // d loss / d logits
    std::vector<float> d_x(T * d, 0.0f);
    {
      std::vector<float> d_norm(d);
      std::vector<double> p(vocab);
      for (std::size_t t = 0; t < T; ++t) {
        if (t + 1 >= T) continue; // last position predicts nothing
        const float* row = cache.logits.data() + t * vocab;
        double mx = -1e300;
        for (std::size_t j = 0; j < vocab; ++j)
          mx = std::max(mx, (double)row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
          p[j] = std::exp((double)row[j] - mx);
          denom += p[j];
        }
        std::fill(d_norm.begin(), d_norm.end(), 0.0f);
        Tensor* g_head = grad_of.at("lm_head");
        const float* fn = cache.final_norm.data() + t * d;
        for (std::size_t j = 0; j < vocab; ++j) {
          double dl = p[j] / denom;
          if (j == (std::size_t)tokens[t + 1]) dl -= 1.0;
          dl /= (double)positions;
          const float dlf = (float)dl;
          if (dlf == 0.0f) continue;
          for (std::size_t q = 0; q < d; ++q) {
            g_head->data[q * vocab + j] += fn[q] * dlf;
            d_norm[q] += model.lm_head.data[q * vocab + j] * dlf;
          }
        }
        detail::rmsnorm_backward(cache.final_in.data() + t * d,
                                 model.output_norm.data.data(), d,
                                 d_norm.data(), d_x.data() + t * d,
                                 grad_of.at("output_norm")->data.data());
      }
    }

    for (std::size_t bi = model.num_blocks(); bi-- > 0;) {
      const TransformerBlock& block = model.blocks[bi];
      detail::BlockCache& bc = cache.blocks[bi];
      const bool routed = is_routed(block.layer);
      const RoutedMoELayer* rl =
          routed ? &std::get<RoutedMoELayer>(block.layer) : nullptr;

      // ---- MoE sublayer: x_out = moe_in + contrib(moe_norm(moe_in))
      std::vector<float> d_moe_norm(T * d, 0.0f);
      for (std::size_t t = 0; t < T; ++t) {
        const float* d_out = d_x.data() + t * d;
        const float* nrm = bc.moe_norm.data() + t * d;
        // experts
        if (routed) {
          const std::size_t n = rl->num_experts();
          std::vector<float> d_s(n, 0.0f); // gradient wrt softmax scores
          // per selected expert: output path and gate path
          std::vector<double> d_gate(bc.routing[t].size(), 0.0);
          for (std::size_t si = 0; si < bc.routing[t].size(); ++si) {
            auto& slot = bc.routing[t][si];
            double dg = 0.0;
            for (std::size_t j = 0; j < d; ++j)
              dg += (double)d_out[j] * (double)slot.out[j];
            d_gate[si] = dg;
            std::vector<float> d_expert_out(d);
            for (std::size_t j = 0; j < d; ++j)
              d_expert_out[j] = slot.gate * d_out[j];
            detail::expert_backward(slot, nrm, d_expert_out.data(),
                                    d_moe_norm.data() + t * d);
          }
          // map gate gradients onto softmax scores
          const float* sc = bc.scores.data() + t * n;
          // recover selected indices from slot order (topk order)
          std::vector<std::size_t> selected;
          for (const auto& slot : bc.routing[t])
            selected.push_back((std::size_t)(slot.expert - rl->experts.data()));
          if (rl->renormalize_gates) {
            double z = 0.0;
            for (std::size_t idx : selected) z += (double)sc[idx];
            double cross = 0.0;
            for (std::size_t si = 0; si < selected.size(); ++si)
              cross += d_gate[si] * (double)sc[selected[si]];
            for (std::size_t si = 0; si < selected.size(); ++si)
              d_s[selected[si]] =
                  (float)(d_gate[si] / z - cross / (z * z));
          } else {
            for (std::size_t si = 0; si < selected.size(); ++si)
              d_s[selected[si]] = (float)d_gate[si];
          }
          // aux-loss gradient flows into every score
          if (aux_coeff > 0.0 && routed_blocks > 0) {
            const double scale = aux_coeff * 2.0 /
                                 ((double)n * (double)token_total *
                                  (double)routed_blocks);
            const double uniform = 1.0 / (double)n;
            for (std::size_t i = 0; i < n; ++i)
              d_s[i] += (float)(scale * (mean_mass[bi][i] - uniform));
          }
          // softmax backward: d_dots = s * (d_s - sum(s * d_s))
          double inner = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            inner += (double)sc[i] * (double)d_s[i];
          Tensor* g_centroids =
              grad_of.at("blocks." + std::to_string(bi) + ".moe.centroids");
          for (std::size_t i = 0; i < n; ++i) {
            const float d_dot = (float)((double)sc[i] *
                                        ((double)d_s[i] - inner));
            if (d_dot == 0.0f) continue;
            const float* e = rl->centroids.data.data() + i * d;
            float* ge = g_centroids->data.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
              ge[j] += d_dot * nrm[j];
              d_moe_norm[t * d + j] += d_dot * e[j];
            }
          }
        } else {
          for (std::size_t kx = 0; kx < bc.kept[t].size(); ++kx) {
            auto& slot = bc.kept[t][kx];
            double dg = 0.0;
            for (std::size_t j = 0; j < d; ++j)
              dg += (double)d_out[j] * (double)slot.out[j];
            grad_of
                .at("blocks." + std::to_string(bi) + ".moe.kept_gates")
                ->data[kx] += (float)dg;
            std::vector<float> d_expert_out(d);
            for (std::size_t j = 0; j < d; ++j)
              d_expert_out[j] = slot.gate * d_out[j];
            detail::expert_backward(slot, nrm, d_expert_out.data(),
                                    d_moe_norm.data() + t * d);
          }
        }
        for (auto& slot : bc.shared[t])
          detail::expert_backward(slot, nrm, d_out,
                                  d_moe_norm.data() + t * d);
      }
      // moe_norm backward, residual passes d_x through unchanged
      {
        Tensor* g_norm =
            grad_of.at("blocks." + std::to_string(bi) + ".moe_norm");
        for (std::size_t t = 0; t < T; ++t)
          detail::rmsnorm_backward(bc.moe_in.data() + t * d,
                                   block.moe_norm.data.data(), d,
                                   d_moe_norm.data() + t * d,
                                   d_x.data() + t * d, g_norm->data.data());
      }

      // ---- attention sublayer: moe_in = attn_in + wo(ctx(attn_norm(...)))
      if (cfg.attention_enabled) {
        std::vector<float> d_ctx(T * d, 0.0f), d_q(T * d, 0.0f),
            d_k(T * d, 0.0f), d_v(T * d, 0.0f), d_attn_norm(T * d, 0.0f);
        Tensor* g_wo = block_grad(bi, "attn.wo");
        for (std::size_t t = 0; t < T; ++t) {
          const float* d_out = d_x.data() + t * d; // gradient at attn output
          const float* ctx = bc.ctx.data() + t * d;
          for (std::size_t j = 0; j < d; ++j) {
            const float* wrow = block.attn.wo.data.data() + j * d;
            float acc = 0.0f;
            for (std::size_t q = 0; q < d; ++q) acc += wrow[q] * d_out[q];
            d_ctx[t * d + j] = acc;
            float* grow = g_wo->data.data() + j * d;
            const float cj = ctx[j];
            for (std::size_t q = 0; q < d; ++q) grow[q] += cj * d_out[q];
          }
        }
        std::vector<float> d_probs(T), d_scores(T);
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t u = 0; u <= t; ++u) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j)
              acc += (double)d_ctx[t * d + j] * (double)bc.v[u * d + j];
            d_probs[u] = (float)acc;
            const float p = bc.probs[t * T + u];
            for (std::size_t j = 0; j < d; ++j)
              d_v[u * d + j] += p * d_ctx[t * d + j];
          }
          double inner = 0.0;
          for (std::size_t u = 0; u <= t; ++u)
            inner += (double)bc.probs[t * T + u] * (double)d_probs[u];
          for (std::size_t u = 0; u <= t; ++u)
            d_scores[u] =
                bc.probs[t * T + u] * (float)((double)d_probs[u] - inner);
          for (std::size_t u = 0; u <= t; ++u) {
            const float ds = d_scores[u] * inv_sqrt_d;
            if (ds == 0.0f) continue;
            for (std::size_t j = 0; j < d; ++j) {
              d_q[t * d + j] += ds * bc.k[u * d + j];
              d_k[u * d + j] += ds * bc.q[t * d + j];
            }
          }
        }
        Tensor* g_wq = block_grad(bi, "attn.wq");
        Tensor* g_wk = block_grad(bi, "attn.wk");
        Tensor* g_wv = block_grad(bi, "attn.wv");
        for (std::size_t t = 0; t < T; ++t) {
          const float* an = bc.attn_norm.data() + t * d;
          for (std::size_t j = 0; j < d; ++j) {
            const float aj = an[j];
            float* gq = g_wq->data.data() + j * d;
            float* gk = g_wk->data.data() + j * d;
            float* gv = g_wv->data.data() + j * d;
            const float* wq = block.attn.wq.data.data() + j * d;
            const float* wk = block.attn.wk.data.data() + j * d;
            const float* wv = block.attn.wv.data.data() + j * d;
            float acc = 0.0f;
            for (std::size_t q = 0; q < d; ++q) {
              gq[q] += aj * d_q[t * d + q];
              gk[q] += aj * d_k[t * d + q];
              gv[q] += aj * d_v[t * d + q];
              acc += wq[q] * d_q[t * d + q] + wk[q] * d_k[t * d + q] +
                     wv[q] * d_v[t * d + q];
            }
            d_attn_norm[t * d + j] = acc;
          }
        }
        Tensor* g_norm = block_grad(bi, "attn_norm");
        for (std::size_t t = 0; t < T; ++t)
          detail::rmsnorm_backward(bc.attn_in.data() + t * d,
                                   block.attn_norm.data.data(), d,
                                   d_attn_norm.data() + t * d,
                                   d_x.data() + t * d, g_norm->data.data());
      }
    }

    // embeddings
    Tensor* g_tok = grad_of.at("token_embedding");
    Tensor* g_pos = grad_of.at("position_embedding");
    for (std::size_t t = 0; t < T; ++t) {
      const int id = tokens[t];
      for (std::size_t j = 0; j < d; ++j) {
        g_tok->data[(std::size_t)id * d + j] += d_x[t * d + j];
        g_pos->data[t * d + j] += d_x[t * d + j];
      }
    }
  }

  GradResult result;
  result.loss = ce_loss;
  result.aux_loss = aux_value;
  for (auto& [name, tensor] : grads)
    if (mask.is_trainable(name)) result.grads.emplace(name, std::move(tensor));
  return result;
}

// ---------------------------------------------------------------------
// Adam + schedule
// ---------------------------------------------------------------------

struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::int64_t t = 0;
};

inline void adam_step(MoEModel& model, const std::map<std::string, Tensor>& grads,
                      AdamState& state, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, (double)state.t);
  const double bc2 = 1.0 - std::pow(beta2, (double)state.t);
  for (auto& ref : named_params(model)) {
    auto it = grads.find(ref.name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    auto mit = state.m.find(ref.name);
    if (mit == state.m.end())
      mit = state.m.emplace(ref.name, Tensor::zeros(g.shape)).first;
    auto vit = state.v.find(ref.name);
    if (vit == state.v.end())
      vit = state.v.emplace(ref.name, Tensor::zeros(g.shape)).first;
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double gi = (double)g.data[i];
      const double mi = beta1 * (double)m.data[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * (double)v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = (float)mi;
      v.data[i] = (float)vi;
      ref.tensor->data[i] -=
          (float)(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
}

/// Forward-only mean next-token cross-entropy over a batch, weighted by
/// predicted positions. Used for periodic evaluation during training.
inline double batch_eval_loss(const MoEModel& model,
                              const std::vector<std::vector<int>>& batch) {
  double acc = 0.0;
  std::int64_t positions = 0;
  for (const auto& seq : batch) {
    if (seq.size() < 2) continue;
    const Tensor logits = model_forward(model, seq);
    acc += cross_entropy_nats(logits, seq) * (double)(seq.size() - 1);
    positions += (std::int64_t)seq.size() - 1;
  }
  if (positions == 0)
    throw ArgumentError("batch_eval_loss: no sequences with >= 2 tokens");
  return acc / (double)positions;
}

struct CurvePoint {
  int step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double aux_loss = 0.0;
  std::optional<double> eval_loss;
};

struct TrainResult {
  MoEModel model;
  std::vector<CurvePoint> curve;
};

/// Adam training loop over a sequence corpus: per step, a uniform batch of
/// sequences, one gradient computation, one masked optimizer step. Frozen
/// tensors are never written. Aborts with a diagnostic if the loss blows
/// past 1e3 times its initial value.
inline TrainResult train(MoEModel model,
                         const std::vector<std::vector<int>>& corpus,
                         const TrainConfig& config, const ParamMask& mask,
                         const std::vector<std::vector<int>>& eval_set = {}) {
  config.validate();
  std::vector<std::vector<int>> usable;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    std::vector<int> s = seq;
    if (s.size() > (std::size_t)model.config.max_seq_len)
      s.resize((std::size_t)model.config.max_seq_len);
    usable.push_back(std::move(s));
  }
  if (usable.empty() && config.steps > 0)
    throw ArgumentError("train: no usable sequences (need length >= 2)");

  std::vector<std::vector<int>> eval_usable;
  for (const auto& seq : eval_set) {
    if (seq.size() < 2) continue;
    std::vector<int> s = seq;
    if (s.size() > (std::size_t)model.config.max_seq_len)
      s.resize((std::size_t)model.config.max_seq_len);
    eval_usable.push_back(std::move(s));
  }

  TrainResult result{std::move(model), {}};
  auto eval_loss = [&]() -> std::optional<double> {
    if (eval_usable.empty()) return std::nullopt;
    return batch_eval_loss(result.model, eval_usable);
  };
  Rng rng(stage_seed(config.seed, "train"));
  AdamState adam;
  double initial_loss = -1.0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < config.batch_size; ++i)
      batch.push_back(usable[rng.next_below(usable.size())]);
    GradResult grad =
        loss_and_grads(result.model, batch, mask, config.aux_loss_coeff);
    if (initial_loss < 0.0) initial_loss = grad.loss;
    if (grad.loss > 1e3 * std::max(initial_loss, 1e-12))
      throw NumericError("train: diverged at step " + std::to_string(step) +
                         ", loss " + std::to_string(grad.loss) +
                         " vs initial " + std::to_string(initial_loss));
    const double lr = lr_at_step(config, step);
    adam_step(result.model, grad.grads, adam, lr);

    CurvePoint point;
    point.step = step;
    point.lr = lr;
    point.train_loss = grad.loss;
    point.aux_loss = grad.aux_loss;
    if (config.eval_every > 0 &&
        ((step + 1) % config.eval_every == 0 || step + 1 == config.steps))
      point.eval_loss = eval_loss();
    result.curve.push_back(point);
  }
  return result;
}

} // namespace cdmoe
