// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdmoe/condense.hpp"
#include "cdmoe/error.hpp"
#include "cdmoe/metrics.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/rng.hpp"

namespace cdmoe {

/// Keep-set per block index for layer condensation. Blocks without an
/// entry condense to shared experts only.
using ExpertPlan = std::map<int, std::vector<int>>;

/// Result of a greedy or one-shot selection run. candidate_losses keeps
/// the full per-step loss table for auditing; step_losses[k] is always the
/// minimum of row k.
struct SelectionTrace {
  std::vector<int> chosen;
  std::vector<double> step_losses;
  std::vector<std::vector<std::pair<int, double>>> candidate_losses;
  std::string fingerprint;
};

struct AlphaHillScore {
  double alpha = 0.0;     // power-law exponent estimate, > 1
  std::size_t k_used = 0; // tail-sample count fed to the estimator
};

namespace detail {

// One [sum(T) x d] matrix from per-sequence rows.
inline Tensor concat_rows(const std::vector<Tensor>& per_seq) {
  std::size_t rows = 0;
  const std::size_t cols = per_seq.empty() ? 0 : per_seq[0].shape[1];
  for (const auto& t : per_seq) rows += t.shape[0];
  Tensor out = Tensor::zeros({rows, cols});
  std::size_t at = 0;
  for (const auto& t : per_seq) {
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + at);
    at += t.numel();
  }
  return out;
}

inline int argmin_lowest_index(
    const std::vector<std::pair<int, double>>& losses) {
  int best = losses[0].first;
  double best_loss = losses[0].second;
  for (const auto& [idx, loss] : losses) {
    if (loss < best_loss) {
      best = idx;
      best_loss = loss;
    }
  }
  return best;
}

} // namespace detail

// ---------------------------------------------------------------------
// Greedy expert selection (per-layer)
// ---------------------------------------------------------------------

/// Greedy forward selection of routing experts for one layer. At each
/// step every remaining expert is tentatively added to the condense set
/// (shared experts always present), the condensed layer output with
/// calibration-averaged fixed gates is compared to the fully routed layer
/// output by JS divergence over the calibration tokens, and the argmin
/// joins the set.
///
/// Expert outputs on the calibration tokens are cached once, so each
/// candidate evaluation is a gate-weighted recombination rather than a
/// fresh forward pass.
inline SelectionTrace greedy_expert_selection(
    const MoEModel& model, int layer_index,
    const std::vector<std::vector<int>>& calibration, int keep_count) {
  if (layer_index < 0 || (std::size_t)layer_index >= model.num_blocks())
    throw ArgumentError("greedy_expert_selection: layer index out of range");
  if (!is_routed(model.blocks[(std::size_t)layer_index].layer))
    throw StateError("greedy_expert_selection: layer already condensed");
  const auto& layer =
      std::get<RoutedMoELayer>(model.blocks[(std::size_t)layer_index].layer);
  const int n = (int)layer.num_experts();
  if (keep_count < 0 || keep_count > n)
    throw ArgumentError("greedy_expert_selection: keep_count out of range");
  if (calibration.empty())
    throw ArgumentError("greedy_expert_selection: empty calibration set");

  const std::size_t d = layer.hidden();

  // one pass over the calibration data: inputs, reference outputs, gates
  std::vector<Tensor> inputs, ref_outputs;
  GateStats stats((std::size_t)n);
  for (const auto& seq : calibration) {
    ForwardTrace trace;
    model_forward(model, seq, &trace);
    inputs.push_back(std::move(trace.moe_inputs[(std::size_t)layer_index]));
    ref_outputs.push_back(
        std::move(trace.layer_outputs[(std::size_t)layer_index]));
    const Tensor& gates = trace.gates[(std::size_t)layer_index];
    for (std::size_t t = 0; t < seq.size(); ++t)
      for (int i = 0; i < n; ++i) {
        const float g = gates.at(t, (std::size_t)i);
        if (g != 0.0f) {
          stats.activation_count[(std::size_t)i] += 1;
          stats.gate_sum[(std::size_t)i] += (double)g;
        }
      }
    stats.total_tokens += (std::int64_t)seq.size();
  }
  const Tensor x = detail::concat_rows(inputs);
  const Tensor o_ref = detail::concat_rows(ref_outputs);
  const std::size_t tokens = x.shape[0];

  // cache E_i(x_t) for every routing expert, and the shared-expert sum
  std::vector<Tensor> expert_out((std::size_t)n);
  for (int i = 0; i < n; ++i) {
    expert_out[(std::size_t)i] = Tensor::zeros({tokens, d});
    for (std::size_t t = 0; t < tokens; ++t)
      layer.experts[(std::size_t)i].forward(
          x.data.data() + t * d,
          expert_out[(std::size_t)i].data.data() + t * d);
  }
  Tensor base = Tensor::zeros({tokens, d}); // shared sum + residual
  {
    std::vector<float> buf(d);
    for (std::size_t t = 0; t < tokens; ++t) {
      float* row = base.data.data() + t * d;
      for (const auto& sh : layer.shared) {
        sh.forward(x.data.data() + t * d, buf.data());
        for (std::size_t j = 0; j < d; ++j) row[j] += buf[j];
      }
      for (std::size_t j = 0; j < d; ++j) row[j] += x.at(t, j);
    }
  }

  std::vector<double> gate((std::size_t)n, 0.0);
  for (int i = 0; i < n; ++i)
    if (stats.activation_count[(std::size_t)i] > 0)
      gate[(std::size_t)i] = fixed_gate(stats, i);

  SelectionTrace trace;
  std::vector<bool> taken((std::size_t)n, false);
  Tensor cand = Tensor::zeros({tokens, d});
  for (int step = 0; step < keep_count; ++step) {
    std::vector<std::pair<int, double>> losses;
    for (int c = 0; c < n; ++c) {
      if (taken[(std::size_t)c]) continue;
      if (stats.activation_count[(std::size_t)c] == 0) continue;
      cand.data = base.data;
      const float g = (float)gate[(std::size_t)c];
      const Tensor& ec = expert_out[(std::size_t)c];
      for (std::size_t q = 0; q < cand.numel(); ++q)
        cand.data[q] += g * ec.data[q];
      losses.emplace_back(
          c, output_divergence(o_ref, cand, DivergenceKind::JS));
    }
    if (losses.empty())
      throw NeverActivatedError(
          "greedy_expert_selection: no remaining expert was activated on "
          "the calibration data");
    const int best = detail::argmin_lowest_index(losses);
    taken[(std::size_t)best] = true;
    // fold the committed expert into the running base output
    const float g = (float)gate[(std::size_t)best];
    const Tensor& eb = expert_out[(std::size_t)best];
    for (std::size_t q = 0; q < base.numel(); ++q)
      base.data[q] += g * eb.data[q];
    trace.chosen.push_back(best);
    double best_loss = losses[0].second;
    for (const auto& [idx, loss] : losses)
      if (idx == best) best_loss = loss;
    trace.step_losses.push_back(best_loss);
    trace.candidate_losses.push_back(std::move(losses));
  }
  return trace;
}

// ---------------------------------------------------------------------
// Greedy layer selection (whole model)
// ---------------------------------------------------------------------

namespace detail {

// Condensed replacements for every routed block, built once from gate
// statistics of the fully routed model.
inline std::map<int, CondensedLayer> build_condensed_candidates(
    const MoEModel& model, const std::vector<std::vector<int>>& calibration,
    const ExpertPlan& plan) {
  std::map<int, CondensedLayer> out;
  // gather stats for all layers in one pass per sequence
  std::vector<GateStats> stats;
  for (std::size_t b = 0; b < model.num_blocks(); ++b)
    stats.emplace_back(
        is_routed(model.blocks[b].layer)
            ? std::get<RoutedMoELayer>(model.blocks[b].layer).num_experts()
            : 0);
  for (const auto& seq : calibration) {
    ForwardTrace trace;
    model_forward(model, seq, &trace);
    for (std::size_t b = 0; b < model.num_blocks(); ++b) {
      if (!is_routed(model.blocks[b].layer)) continue;
      const Tensor& gates = trace.gates[b];
      const std::size_t n = stats[b].num_experts();
      for (std::size_t t = 0; t < seq.size(); ++t)
        for (std::size_t i = 0; i < n; ++i) {
          const float g = gates.at(t, i);
          if (g != 0.0f) {
            stats[b].activation_count[i] += 1;
            stats[b].gate_sum[i] += (double)g;
          }
        }
      stats[b].total_tokens += (std::int64_t)seq.size();
    }
  }
  for (std::size_t b = 0; b < model.num_blocks(); ++b) {
    if (!is_routed(model.blocks[b].layer)) continue;
    const auto& routed = std::get<RoutedMoELayer>(model.blocks[b].layer);
    auto it = plan.find((int)b);
    const std::vector<int> keep =
        it == plan.end() ? std::vector<int>{} : it->second;
    out.emplace((int)b, condense_layer(routed, keep, stats[b], (int)b));
  }
  return out;
}

inline Tensor concat_logits(const MoEModel& model,
                            const std::vector<std::vector<int>>& calibration,
                            const LayerOverlay* overlay) {
  std::vector<Tensor> per_seq;
  for (const auto& seq : calibration)
    per_seq.push_back(model_forward(model, seq, nullptr, overlay));
  return concat_rows(per_seq);
}

} // namespace detail

enum class SelectionMetric { JS, KL, PPL };

inline const char* selection_metric_name(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::JS: return "js";
    case SelectionMetric::KL: return "kl";
    default: return "ppl";
  }
}

inline SelectionMetric selection_metric_from_name(const std::string& name) {
  if (name == "js") return SelectionMetric::JS;
  if (name == "kl") return SelectionMetric::KL;
  if (name == "ppl") return SelectionMetric::PPL;
  throw ArgumentError("unknown selection metric: " + name);
}

/// Greedy forward selection of layers to condense. The reference is the
/// model's final output with every layer routed; each step tentatively
/// condenses each remaining routed layer (keep-sets from the expert plan),
/// scores the final output against the reference, and commits the argmin.
/// Previously committed layers stay condensed during later evaluations.
inline SelectionTrace greedy_layer_selection(
    const MoEModel& model, const std::vector<std::vector<int>>& calibration,
    int k_layers, const ExpertPlan& plan,
    SelectionMetric metric = SelectionMetric::JS) {
  std::vector<int> routed_blocks;
  for (std::size_t b = 0; b < model.num_blocks(); ++b)
    if (is_routed(model.blocks[b].layer)) routed_blocks.push_back((int)b);
  if (k_layers < 0 || (std::size_t)k_layers > routed_blocks.size())
    throw ArgumentError("greedy_layer_selection: k_layers out of range");
  if (calibration.empty())
    throw ArgumentError("greedy_layer_selection: empty calibration set");

  const std::map<int, CondensedLayer> candidates =
      detail::build_condensed_candidates(model, calibration, plan);

  const Tensor o_ref = detail::concat_logits(model, calibration, nullptr);
  std::vector<double> ref_ppl;
  if (metric == SelectionMetric::PPL)
    for (const auto& seq : calibration)
      ref_ppl.push_back(perplexity(seq, model));

  SelectionTrace trace;
  LayerOverlay committed;
  for (int step = 0; step < k_layers; ++step) {
    std::vector<std::pair<int, double>> losses;
    for (int b : routed_blocks) {
      if (committed.find(b) != nullptr) continue;
      LayerOverlay overlay = committed;
      overlay.layers[b] = &candidates.at(b);
      double loss;
      if (metric == SelectionMetric::PPL) {
        double acc = 0.0;
        for (std::size_t s = 0; s < calibration.size(); ++s)
          acc += std::fabs(perplexity(calibration[s], model, &overlay) -
                           ref_ppl[s]);
        loss = acc / (double)calibration.size();
      } else {
        const Tensor cand = detail::concat_logits(model, calibration, &overlay);
        loss = output_divergence(o_ref, cand,
                                 metric == SelectionMetric::JS
                                     ? DivergenceKind::JS
                                     : DivergenceKind::KL);
      }
      losses.emplace_back(b, loss);
    }
    const int best = detail::argmin_lowest_index(losses);
    committed.layers[best] = &candidates.at(best);
    trace.chosen.push_back(best);
    double best_loss = losses[0].second;
    for (const auto& [idx, loss] : losses)
      if (idx == best) best_loss = loss;
    trace.step_losses.push_back(best_loss);
    trace.candidate_losses.push_back(std::move(losses));
  }
  return trace;
}

// ---------------------------------------------------------------------
// Baseline expert selectors
// ---------------------------------------------------------------------

/// Uniform sample of K expert indices without replacement, sorted.
inline std::vector<int> random_expert_selection(int n, int k,
                                                std::uint64_t seed) {
  if (k < 0 || k > n)
    throw ArgumentError("random_expert_selection: k out of range");
  Rng rng((std::uint64_t)seed);
  std::vector<int> pool((std::size_t)n);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    const std::size_t j =
        (std::size_t)i + rng.next_below((std::uint64_t)(n - i));
    std::swap(pool[(std::size_t)i], pool[j]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + k);
  std::sort(out.begin(), out.end());
  return out;
}

/// Keeps the K experts with the lowest L1 norm over all three matrices.
inline std::vector<int> l1_expert_selection(const RoutedMoELayer& layer,
                                            int k) {
  const int n = (int)layer.num_experts();
  if (k < 0 || k > n) throw ArgumentError("l1_expert_selection: k out of range");
  std::vector<std::pair<double, int>> norms;
  for (int i = 0; i < n; ++i) {
    const auto& e = layer.experts[(std::size_t)i];
    double acc = 0.0;
    for (float v : e.w_gate.data) acc += std::fabs((double)v);
    for (float v : e.w_up.data) acc += std::fabs((double)v);
    for (float v : e.w_down.data) acc += std::fabs((double)v);
    norms.emplace_back(acc, i);
  }
  std::sort(norms.begin(), norms.end());
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(norms[(std::size_t)i].second);
  return out;
}

// ---------------------------------------------------------------------
// Hill estimator / PL_Alpha_Hill
// ---------------------------------------------------------------------

/// Power-law tail exponent of a spectrum via the Hill estimator:
/// alpha = 1 + k / sum_{i=1..k} ln(lambda_{n-i+1} / lambda_{n-k}).
/// k comes from the Fix-Finger rule unless pinned: a 100-bin log-spaced
/// histogram of the positive eigenvalues is built, lambda_xmin is the
/// center of the peak bin, and k counts the eigenvalues above it
/// (clamped to [2, n-1]).
inline AlphaHillScore hill_alpha_from_spectrum(
    std::vector<double> eigenvalues,
    std::optional<std::size_t> pinned_k = std::nullopt) {
  std::vector<double> pos;
  for (double v : eigenvalues)
    if (v > 0.0) pos.push_back(v);
  const std::size_t n = pos.size();
  if (n < 2)
    throw DegenerateSpectrumError(
        "hill_alpha_from_spectrum: fewer than 2 positive eigenvalues");
  std::sort(pos.begin(), pos.end());

  std::size_t k;
  if (pinned_k.has_value()) {
    k = std::clamp<std::size_t>(*pinned_k, 1, n - 1);
  } else {
    const double lo = pos.front(), hi = pos.back();
    if (!(hi > lo))
      throw DegenerateSpectrumError(
          "hill_alpha_from_spectrum: all eigenvalues equal");
    constexpr int bins = 100;
    const double log_ratio = std::log(hi / lo);
    std::vector<int> count(bins, 0);
    for (double v : pos) {
      int b = (int)(std::log(v / lo) / log_ratio * bins);
      b = std::clamp(b, 0, bins - 1);
      count[(std::size_t)b] += 1;
    }
    int peak = 0;
    for (int b = 1; b < bins; ++b)
      if (count[(std::size_t)b] > count[(std::size_t)peak]) peak = b;
    const double xmin =
        lo * std::exp(log_ratio * ((double)peak + 0.5) / bins);
    std::size_t above = 0;
    for (double v : pos)
      if (v > xmin) ++above;
    k = std::clamp<std::size_t>(above, 2, n - 1);
  }

  const double threshold = pos[n - k - 1]; // lambda_{n-k}, 1-based
  double denom = 0.0;
  for (std::size_t i = 1; i <= k; ++i)
    denom += std::log(pos[n - i] / threshold);
  if (!(denom > 0.0))
    throw DegenerateSpectrumError(
        "hill_alpha_from_spectrum: flat tail, estimator undefined");
  return AlphaHillScore{1.0 + (double)k / denom, k};
}

/// PL_Alpha_Hill of one expert: spectrum of W^T W / d with W the expert's
/// concatenated input-side matrices [w_gate | w_up] (d x 2f).
inline AlphaHillScore alpha_hill(const ExpertMLP& expert,
                                 std::optional<std::size_t> pinned_k =
                                     std::nullopt) {
  const std::size_t d = expert.hidden(), f = expert.inner();
  const std::size_t m = 2 * f;
  Tensor gram = Tensor::zeros({m, m});
  auto col = [&](std::size_t j, std::size_t row) -> float {
    return j < f ? expert.w_gate.at(row, j) : expert.w_up.at(row, j - f);
  };
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < d; ++r)
        acc += (double)col(i, r) * (double)col(j, r);
      const float v = (float)(acc / (double)d);
      gram.at(i, j) = v;
      gram.at(j, i) = v;
    }
  const Tensor eig = symmetric_eigenvalues(gram);
  std::vector<double> spectrum(eig.data.begin(), eig.data.end());
  return hill_alpha_from_spectrum(std::move(spectrum), pinned_k);
}

/// Keeps the K experts with the lowest alpha (the most heavy-tailed
/// spectra are retained).
inline std::vector<int> alpha_hill_expert_selection(
    const RoutedMoELayer& layer, int k) {
  const int n = (int)layer.num_experts();
  if (k < 0 || k > n)
    throw ArgumentError("alpha_hill_expert_selection: k out of range");
  std::vector<std::pair<double, int>> alphas;
  for (int i = 0; i < n; ++i)
    alphas.emplace_back(alpha_hill(layer.experts[(std::size_t)i]).alpha, i);
  std::sort(alphas.begin(), alphas.end());
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(alphas[(std::size_t)i].second);
  return out;
}

// ---------------------------------------------------------------------
// Baseline layer selectors and the per-layer divergence sweep
// ---------------------------------------------------------------------

/// One-shot ranking by each layer's own output divergence: condense the
/// layer, compare its output to the routed output on the same inputs,
/// sort ascending, take the K smallest.
inline SelectionTrace layer_rank_selection(
    const MoEModel& model, const std::vector<std::vector<int>>& calibration,
    int k_layers, const ExpertPlan& plan) {
  std::vector<int> routed_blocks;
  for (std::size_t b = 0; b < model.num_blocks(); ++b)
    if (is_routed(model.blocks[b].layer)) routed_blocks.push_back((int)b);
  if (k_layers < 0 || (std::size_t)k_layers > routed_blocks.size())
    throw ArgumentError("layer_rank_selection: k_layers out of range");
  if (calibration.empty())
    throw ArgumentError("layer_rank_selection: empty calibration set");

  const std::map<int, CondensedLayer> candidates =
      detail::build_condensed_candidates(model, calibration, plan);

  std::vector<Tensor> inputs(model.num_blocks());
  std::vector<Tensor> outputs(model.num_blocks());
  {
    std::vector<std::vector<Tensor>> in_rows(model.num_blocks()),
        out_rows(model.num_blocks());
    for (const auto& seq : calibration) {
      ForwardTrace trace;
      model_forward(model, seq, &trace);
      for (std::size_t b = 0; b < model.num_blocks(); ++b) {
        in_rows[b].push_back(std::move(trace.moe_inputs[b]));
        out_rows[b].push_back(std::move(trace.layer_outputs[b]));
      }
    }
    for (std::size_t b = 0; b < model.num_blocks(); ++b) {
      inputs[b] = detail::concat_rows(in_rows[b]);
      outputs[b] = detail::concat_rows(out_rows[b]);
    }
  }

  std::vector<std::pair<int, double>> scores;
  for (int b : routed_blocks) {
    const CondensedLayer& cl = candidates.at(b);
    const Tensor& x = inputs[(std::size_t)b];
    const std::size_t d = x.shape[1];
    Tensor cond = Tensor::zeros(x.shape);
    Tensor row = Tensor::zeros({d});
    for (std::size_t t = 0; t < x.shape[0]; ++t) {
      std::copy(x.data.begin() + t * d, x.data.begin() + (t + 1) * d,
                row.data.begin());
      Tensor h = condensed_forward(row, cl);
      std::copy(h.data.begin(), h.data.end(), cond.data.begin() + t * d);
    }
    scores.emplace_back(
        b, output_divergence(outputs[(std::size_t)b], cond,
                             DivergenceKind::JS));
  }
  std::stable_sort(scores.begin(), scores.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second < b.second;
                     return a.first < b.first;
                   });
  SelectionTrace trace;
  trace.candidate_losses.push_back(scores);
  for (int i = 0; i < k_layers; ++i) {
    trace.chosen.push_back(scores[(std::size_t)i].first);
    trace.step_losses.push_back(scores[(std::size_t)i].second);
  }
  return trace;
}

struct SweepRow {
  int layer_index = 0;
  double js = 0.0;
  double kl = 0.0;
  double ppl_delta = 0.0;
};

/// Condenses one layer at a time and scores the model's final outputs
/// against the fully routed reference: JS, KL and mean |delta PPL| per
/// layer. This is the per-layer fluctuation sweep.
inline std::vector<SweepRow> divergence_sweep(
    const MoEModel& model, const std::vector<std::vector<int>>& calibration,
    const ExpertPlan& plan) {
  if (calibration.empty())
    throw ArgumentError("divergence_sweep: empty calibration set");
  const std::map<int, CondensedLayer> candidates =
      detail::build_condensed_candidates(model, calibration, plan);

  std::vector<Tensor> ref_logits;
  std::vector<double> ref_ppl;
  for (const auto& seq : calibration) {
    Tensor logits = model_forward(model, seq);
    if (seq.size() >= 2)
      ref_ppl.push_back(std::exp(cross_entropy_nats(logits, seq)));
    else
      ref_ppl.push_back(0.0);
    ref_logits.push_back(std::move(logits));
  }
  const Tensor ref = detail::concat_rows(ref_logits);

  std::vector<SweepRow> rows;
  for (const auto& [b, layer] : candidates) {
    LayerOverlay overlay;
    overlay.layers[b] = &layer;
    std::vector<Tensor> cand_logits;
    double ppl_acc = 0.0;
    std::size_t ppl_count = 0;
    for (std::size_t s = 0; s < calibration.size(); ++s) {
      Tensor logits = model_forward(model, calibration[s], nullptr, &overlay);
      if (calibration[s].size() >= 2) {
        ppl_acc += std::fabs(std::exp(cross_entropy_nats(logits,
                                                         calibration[s])) -
                             ref_ppl[s]);
        ++ppl_count;
      }
      cand_logits.push_back(std::move(logits));
    }
    const Tensor cand = detail::concat_rows(cand_logits);
    SweepRow row;
    row.layer_index = b;
    row.js = output_divergence(ref, cand, DivergenceKind::JS);
    row.kl = output_divergence(ref, cand, DivergenceKind::KL);
    row.ppl_delta = ppl_count > 0 ? ppl_acc / (double)ppl_count : 0.0;
    rows.push_back(row);
  }
  return rows;
}

/// One-shot ranking by final-output JS with exactly one layer condensed,
/// ascending. Shares its per-layer scores with the divergence sweep.
inline SelectionTrace global_layer_rank_selection(
    const MoEModel& model, const std::vector<std::vector<int>>& calibration,
    int k_layers, const ExpertPlan& plan) {
  std::vector<int> routed_blocks;
  for (std::size_t b = 0; b < model.num_blocks(); ++b)
    if (is_routed(model.blocks[b].layer)) routed_blocks.push_back((int)b);
  if (k_layers < 0 || (std::size_t)k_layers > routed_blocks.size())
    throw ArgumentError("global_layer_rank_selection: k_layers out of range");

  const std::vector<SweepRow> sweep =
      divergence_sweep(model, calibration, plan);
  std::vector<std::pair<int, double>> scores;
  for (const auto& row : sweep) scores.emplace_back(row.layer_index, row.js);
  std::stable_sort(scores.begin(), scores.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second < b.second;
                     return a.first < b.first;
                   });
  SelectionTrace trace;
  trace.candidate_losses.push_back(scores);
  for (int i = 0; i < k_layers; ++i) {
    trace.chosen.push_back(scores[(std::size_t)i].first);
    trace.step_losses.push_back(scores[(std::size_t)i].second);
  }
  return trace;
}

} // namespace cdmoe
