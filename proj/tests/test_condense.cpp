// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "cdmoe/condense.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/rng.hpp"
#include "oracle64.hpp"

using cdmoe::CondensedLayer;
using cdmoe::GateStats;
using cdmoe::ModelConfig;
using cdmoe::MoEModel;
using cdmoe::Rng;
using cdmoe::RoutedMoELayer;
using cdmoe::Tensor;

namespace {

RoutedMoELayer random_layer(int n, int k, int d, int f, std::uint64_t seed,
                            int shared = 1) {
  Rng rng(seed);
  RoutedMoELayer layer;
  layer.k_active = k;
  layer.centroids = Tensor::randn({(std::size_t)n, (std::size_t)d}, rng, 0.5f);
  for (int i = 0; i < n; ++i)
    layer.experts.push_back(cdmoe::ExpertMLP::init(d, f, rng, 0.3f));
  for (int s = 0; s < shared; ++s)
    layer.shared.push_back(cdmoe::ExpertMLP::init(d, f, rng, 0.3f));
  return layer;
}

GateStats stats_from_tokens(const RoutedMoELayer& layer,
                            const std::vector<Tensor>& tokens) {
  GateStats stats(layer.num_experts());
  for (const auto& x : tokens) {
    auto rf = cdmoe::routed_forward(x, layer);
    for (std::size_t i = 0; i < layer.num_experts(); ++i) {
      if (rf.gates.data[i] != 0.0f) {
        stats.activation_count[i] += 1;
        stats.gate_sum[i] += (double)rf.gates.data[i];
      }
    }
    stats.total_tokens += 1;
  }
  return stats;
}

} // namespace

TEST_CASE("fixed_gate arithmetic") {
  GateStats stats(4);
  stats.activation_count[1] = 2;
  stats.gate_sum[1] = 0.6;
  stats.activation_count[2] = 1;
  stats.gate_sum[2] = 0.25;
  CHECK(cdmoe::fixed_gate(stats, 1) == doctest::Approx(0.3));
  CHECK(cdmoe::fixed_gate(stats, 2) == doctest::Approx(0.25));
  CHECK_THROWS_AS(cdmoe::fixed_gate(stats, 0), cdmoe::NeverActivatedError);
  CHECK_THROWS_AS(cdmoe::fixed_gate(stats, 9), cdmoe::ArgumentError);
}

TEST_CASE("uniform router forces exact quarter gates") {
  RoutedMoELayer layer = random_layer(4, 2, 8, 8, 1);
  std::fill(layer.centroids.data.begin(), layer.centroids.data.end(), 0.0f);
  Rng rng(2);
  std::vector<Tensor> tokens;
  for (int t = 0; t < 10; ++t) tokens.push_back(Tensor::randn({8}, rng));
  GateStats stats = stats_from_tokens(layer, tokens);
  CHECK(cdmoe::fixed_gate(stats, 0) == 0.25);
  CHECK(cdmoe::fixed_gate(stats, 1) == 0.25);
}

TEST_CASE("condense_layer keeps experts with their gates") {
  RoutedMoELayer layer = random_layer(8, 3, 10, 8, 3);
  Rng rng(4);
  std::vector<Tensor> tokens;
  for (int t = 0; t < 32; ++t) tokens.push_back(Tensor::randn({10}, rng));
  GateStats stats = stats_from_tokens(layer, tokens);

  std::vector<int> keep;
  for (int i = 0; i < 8; ++i)
    if (stats.activation_count[(std::size_t)i] > 0 && keep.size() < 2)
      keep.push_back(i);
  REQUIRE(keep.size() == 2);

  CondensedLayer cl = cdmoe::condense_layer(layer, keep, stats, 5);
  CHECK(cl.origin == 5);
  CHECK(cl.kept_indices == keep);
  CHECK(cl.shared.size() == layer.shared.size());
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const int idx = keep[j];
    CHECK(cl.kept_gates.data[j] ==
          (float)cdmoe::fixed_gate(stats, idx));
    CHECK(cl.kept_gates.data[j] > 0.0f);
    CHECK(cl.kept_gates.data[j] <= 1.0f);
    CHECK(cl.kept_experts[j].w_gate.data ==
          layer.experts[(std::size_t)idx].w_gate.data);
  }
}

TEST_CASE("condense_layer rejects bad keep sets") {
  RoutedMoELayer layer = random_layer(4, 2, 6, 4, 7);
  GateStats stats(4);
  for (int i = 0; i < 4; ++i) {
    stats.activation_count[(std::size_t)i] = 1;
    stats.gate_sum[(std::size_t)i] = 0.5;
  }
  CHECK_THROWS_AS(cdmoe::condense_layer(layer, {1, 1}, stats),
                  cdmoe::ArgumentError);
  CHECK_THROWS_AS(cdmoe::condense_layer(layer, {4}, stats),
                  cdmoe::ArgumentError);
  stats.activation_count[2] = 0;
  CHECK_THROWS_AS(cdmoe::condense_layer(layer, {2}, stats),
                  cdmoe::NeverActivatedError);
  // forcing a never-activated expert substitutes the fallback gate
  CondensedLayer forced = cdmoe::condense_layer(layer, {2}, stats, 0, 0.25);
  CHECK(forced.kept_gates.data[0] == 0.25f);
}

TEST_CASE("condense_layer with empty keep is shared-only") {
  RoutedMoELayer layer = random_layer(4, 2, 6, 4, 9, 2);
  GateStats stats(4);
  CondensedLayer cl = cdmoe::condense_layer(layer, {}, stats);
  CHECK(cl.kept_experts.empty());
  CHECK(cl.kept_gates.numel() == 0);
  CHECK(cl.shared.size() == 2);
}

TEST_CASE("condensation leaves the source model untouched") {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.hidden_size = 8;
  cfg.expert_inner = 8;
  cfg.num_blocks = 2;
  cfg.num_routing_experts = 4;
  cfg.k_active = 2;
  cfg.max_seq_len = 8;
  MoEModel model = cdmoe::init_model(cfg, 11);
  std::vector<std::vector<int>> calib = {{1, 2, 3}, {4, 5, 6, 7}};
  GateStats stats = cdmoe::collect_gate_stats(calib, model, 0);

  std::vector<float> before;
  for (const auto& ref : cdmoe::named_params(model))
    before.insert(before.end(), ref.tensor->data.begin(),
                  ref.tensor->data.end());

  std::vector<int> keep;
  for (int i = 0; i < 4; ++i)
    if (stats.activation_count[(std::size_t)i] > 0 && keep.empty())
      keep.push_back(i);
  const auto& routed = std::get<RoutedMoELayer>(model.blocks[0].layer);
  MoEModel condensed = cdmoe::with_condensed_block(
      model, 0, cdmoe::condense_layer(routed, keep, stats, 0));

  std::vector<float> after;
  for (const auto& ref : cdmoe::named_params(model))
    after.insert(after.end(), ref.tensor->data.begin(),
                 ref.tensor->data.end());
  CHECK(std::memcmp(before.data(), after.data(),
                    before.size() * sizeof(float)) == 0);

  // both run side by side, reproducibly
  Tensor a1 = cdmoe::model_forward(model, calib[0]);
  Tensor c1 = cdmoe::model_forward(condensed, calib[0]);
  Tensor a2 = cdmoe::model_forward(model, calib[0]);
  Tensor c2 = cdmoe::model_forward(condensed, calib[0]);
  CHECK(a1.data == a2.data);
  CHECK(c1.data == c2.data);
}

TEST_CASE("condensed_forward residual-only when everything is zero") {
  RoutedMoELayer layer = random_layer(4, 2, 6, 4, 13);
  GateStats stats(4);
  CondensedLayer cl = cdmoe::condense_layer(layer, {}, stats);
  for (auto& sh : cl.shared) {
    std::fill(sh.w_gate.data.begin(), sh.w_gate.data.end(), 0.0f);
    std::fill(sh.w_up.data.begin(), sh.w_up.data.end(), 0.0f);
    std::fill(sh.w_down.data.begin(), sh.w_down.data.end(), 0.0f);
  }
  Rng rng(14);
  Tensor x = Tensor::randn({6}, rng);
  Tensor h = cdmoe::condensed_forward(x, cl);
  CHECK(h.data == x.data);
}

TEST_CASE("token-independent router condenses losslessly") {
  // all-zero centroids: every token gets the same gate distribution, so the
  // Eq.-2 average equals the per-token gate and condensation is exact
  RoutedMoELayer layer = random_layer(6, 3, 12, 8, 15);
  std::fill(layer.centroids.data.begin(), layer.centroids.data.end(), 0.0f);
  Rng rng(16);
  std::vector<Tensor> tokens;
  for (int t = 0; t < 64; ++t) tokens.push_back(Tensor::randn({12}, rng));
  GateStats stats = stats_from_tokens(layer, tokens);

  auto top = cdmoe::topk_indices(cdmoe::gate_scores(tokens[0], layer), 3);
  std::vector<int> keep(top.begin(), top.end());
  std::sort(keep.begin(), keep.end());
  CondensedLayer cl = cdmoe::condense_layer(layer, keep, stats, 0);

  for (const auto& x : tokens) {
    Tensor routed = cdmoe::routed_forward(x, layer).h;
    Tensor dense = cdmoe::condensed_forward(x, cl);
    for (std::size_t j = 0; j < 12; ++j)
      CHECK(std::fabs(routed.data[j] - dense.data[j]) < 1e-6f);
  }
}

TEST_CASE("condensed_forward matches the explicit-sum oracle") {
  RoutedMoELayer layer = random_layer(6, 2, 10, 8, 17);
  CondensedLayer cl;
  cl.kept_experts = {layer.experts[1], layer.experts[4]};
  cl.kept_indices = {1, 4};
  cl.kept_gates = Tensor({2}, {0.3f, 0.2f});
  cl.shared = layer.shared;
  cl.origin = 0;

  Rng rng(18);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({10}, rng);
    Tensor got = cdmoe::condensed_forward(x, cl);
    oracle64::Vec xd = oracle64::to_vec(x);
    oracle64::Vec h = xd;
    const double gates[2] = {0.3, 0.2};
    for (int j = 0; j < 2; ++j) {
      oracle64::Vec e = oracle64::expert_forward(cl.kept_experts[(size_t)j], xd);
      for (std::size_t q = 0; q < 10; ++q) h[q] += gates[j] * e[q];
    }
    for (const auto& sh : cl.shared) {
      oracle64::Vec e = oracle64::expert_forward(sh, xd);
      for (std::size_t q = 0; q < 10; ++q) h[q] += e[q];
    }
    for (std::size_t q = 0; q < 10; ++q)
      CHECK(std::fabs((double)got.data[q] - h[q]) < 1e-5);
  }
}

TEST_CASE("condensed_forward is linear in each fixed gate") {
  RoutedMoELayer layer = random_layer(4, 2, 8, 6, 19);
  CondensedLayer cl;
  cl.kept_experts = {layer.experts[0], layer.experts[2]};
  cl.kept_indices = {0, 2};
  cl.kept_gates = Tensor({2}, {0.4f, 0.1f});
  cl.shared = layer.shared;

  CondensedLayer doubled = cl;
  doubled.kept_gates.data[0] *= 2.0f;
  CondensedLayer zeroed = cl;
  zeroed.kept_gates.data[0] = 0.0f;

  Rng rng(20);
  Tensor x = Tensor::randn({8}, rng);
  Tensor base = cdmoe::condensed_forward(x, cl);
  Tensor twice = cdmoe::condensed_forward(x, doubled);
  Tensor none = cdmoe::condensed_forward(x, zeroed);
  for (std::size_t j = 0; j < 8; ++j) {
    const float contrib = base.data[j] - none.data[j];
    CHECK(std::fabs((twice.data[j] - none.data[j]) - 2.0f * contrib) < 1e-5f);
  }
}

TEST_CASE("cost_report of an uncondensed model is the identity") {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.hidden_size = 16;
  cfg.expert_inner = 8;
  cfg.num_blocks = 3;
  cfg.num_routing_experts = 8;
  cfg.num_shared_experts = 2;
  cfg.k_active = 2;
  cfg.max_seq_len = 32;
  MoEModel model = cdmoe::init_model(cfg, 23);
  cdmoe::CostReport report = cdmoe::cost_report(model);
  CHECK(report.memory_ratio == 1.0);
  CHECK(report.speedup_estimate == 1.0);
  CHECK(report.total_params == report.original_total_params);
  CHECK(report.active_params_per_token <= report.total_params);
  CHECK(!report.measured_tokens_per_second.has_value());
}

TEST_CASE("memory ratio matches the closed-form config count exactly") {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.hidden_size = 16;
  cfg.expert_inner = 8;
  cfg.num_blocks = 4;
  cfg.num_routing_experts = 6;
  cfg.num_shared_experts = 1;
  cfg.k_active = 2;
  cfg.max_seq_len = 32;
  MoEModel model = cdmoe::init_model(cfg, 29);

  // condense every block to shared-only
  GateStats stats((std::size_t)cfg.num_routing_experts);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const auto& routed = std::get<RoutedMoELayer>(model.blocks[(size_t)b].layer);
    model = cdmoe::with_condensed_block(
        model, b, cdmoe::condense_layer(routed, {}, stats, b));
  }
  cdmoe::CostReport report = cdmoe::cost_report(model);

  // independent closed-form arithmetic, integers all the way
  const std::int64_t d = cfg.hidden_size, f = cfg.expert_inner;
  const std::int64_t expert = 3 * d * f;
  const std::int64_t base = (std::int64_t)cfg.vocab_size * d +
                            (std::int64_t)cfg.max_seq_len * d + d +
                            d * cfg.vocab_size;
  const std::int64_t routed_block =
      2 * d + 4 * d * d + cfg.num_routing_experts * d +
      (cfg.num_routing_experts + cfg.num_shared_experts) * expert;
  const std::int64_t dense_block =
      2 * d + 4 * d * d + cfg.num_shared_experts * expert; // keep=[], no gates
  const std::int64_t orig = base + cfg.num_blocks * routed_block;
  const std::int64_t cond = base + cfg.num_blocks * dense_block;
  CHECK(report.total_params == cond);
  CHECK(report.original_total_params == orig);
  CHECK(report.memory_ratio == (double)cond / (double)orig);

  // accounting identity: the difference is exactly the dropped experts
  // plus the router centroids
  const std::int64_t dropped =
      cfg.num_blocks *
      (cfg.num_routing_experts * expert + cfg.num_routing_experts * d);
  CHECK(orig - cond == dropped);
  CHECK(report.flops_per_token < report.original_flops_per_token);
  CHECK(report.speedup_estimate > 1.0);
}

TEST_CASE("paper-scale accounting formula check") {
  // DeepSeekMoE-16B shapes: d=2048, f=1408, 64 routed + 2 shared experts,
  // 6 routed experts kept per condensed layer, 9 layers condensed.
  const std::int64_t total = 16375728128LL;
  const std::int64_t activated = 2828650496LL;
  const std::int64_t d = 2048, f = 1408;
  const std::int64_t expert = 3 * d * f;
  const std::int64_t router = 64 * d;
  const std::int64_t dropped_per_layer = (64 - 6) * expert + router;
  const std::int64_t condensed_total = total - 9 * dropped_per_layer;
  const double mem = (double)condensed_total / (double)total;
  CHECK(mem < 1.0);
  CHECK(std::fabs(mem - 0.725) < 0.005);

  const std::int64_t activated_condensed = activated - 9 * router;
  CHECK(activated_condensed <= activated);
  CHECK((double)activated / (double)activated_condensed >= 1.0);
}
