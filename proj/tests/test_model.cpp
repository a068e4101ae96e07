// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "cdmoe/model.hpp"
#include "cdmoe/rng.hpp"
#include "oracle64.hpp"

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

void zero_expert(cdmoe::ExpertMLP& e) {
  std::fill(e.w_gate.data.begin(), e.w_gate.data.end(), 0.0f);
  std::fill(e.w_up.data.begin(), e.w_up.data.end(), 0.0f);
  std::fill(e.w_down.data.begin(), e.w_down.data.end(), 0.0f);
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 61;
  cfg.hidden_size = 16;
  cfg.expert_inner = 12;
  cfg.num_blocks = 2;
  cfg.num_routing_experts = 6;
  cfg.num_shared_experts = 2;
  cfg.k_active = 2;
  cfg.max_seq_len = 16;
  return cfg;
}

} // namespace

TEST_CASE("gate_scores is uniform for a zero router") {
  RoutedMoELayer layer = random_layer(4, 2, 8, 8, 1);
  std::fill(layer.centroids.data.begin(), layer.centroids.data.end(), 0.0f);
  Rng rng(2);
  Tensor x = Tensor::randn({8}, rng);
  Tensor s = cdmoe::gate_scores(x, layer);
  for (float v : s.data) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("gate_scores equal dots give equal scores") {
  RoutedMoELayer layer = random_layer(2, 1, 4, 4, 3);
  // both centroids identical -> identical dots
  for (std::size_t j = 0; j < 4; ++j)
    layer.centroids.at(1, j) = layer.centroids.at(0, j);
  Rng rng(4);
  Tensor x = Tensor::randn({4}, rng);
  Tensor s = cdmoe::gate_scores(x, layer);
  CHECK(s.data[0] == doctest::Approx(0.5));
  CHECK(s.data[1] == doctest::Approx(0.5));
}

TEST_CASE("gate_scores matches the 64-bit oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    RoutedMoELayer layer = random_layer(8, 3, 12, 8, 100 + trial);
    Tensor x = Tensor::randn({12}, rng);
    Tensor s = cdmoe::gate_scores(x, layer);

    std::vector<double> dots(8, 0.0);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        dots[i] += (double)x.data[j] * (double)layer.centroids.at(i, j);
    double mx = dots[0];
    for (double v : dots) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : dots) sum += std::exp(v - mx);
    double total = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(std::fabs((double)s.data[i] - std::exp(dots[i] - mx) / sum) <
            1e-6);
      total += s.data[i];
    }
    CHECK(std::fabs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("routed_forward with zero experts is the residual") {
  RoutedMoELayer layer = random_layer(4, 2, 8, 8, 7);
  for (auto& e : layer.experts) zero_expert(e);
  for (auto& e : layer.shared) zero_expert(e);
  Rng rng(8);
  Tensor x = Tensor::randn({8}, rng);
  auto result = cdmoe::routed_forward(x, layer);
  CHECK(result.h.data == x.data);
}

TEST_CASE("routed_forward with K=N applies the full softmax") {
  RoutedMoELayer layer = random_layer(3, 3, 8, 8, 9);
  Rng rng(10);
  Tensor x = Tensor::randn({8}, rng);
  auto result = cdmoe::routed_forward(x, layer);
  Tensor s = cdmoe::gate_scores(x, layer);
  int nonzero = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(result.gates.data[i] == s.data[i]);
    if (result.gates.data[i] != 0.0f) ++nonzero;
  }
  CHECK(nonzero == 3);
}

TEST_CASE("routed_forward matches the explicit-formula oracle") {
  RoutedMoELayer layer = random_layer(3, 2, 10, 8, 11);
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({10}, rng);
    auto result = cdmoe::routed_forward(x, layer);

    // oracle: everything in double, natural order
    oracle64::Vec xd = oracle64::to_vec(x);
    std::vector<double> dots(3, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 10; ++j)
        dots[i] += xd[j] * (double)layer.centroids.at(i, j);
    oracle64::Vec s = oracle64::softmax(dots);
    auto sel = oracle64::topk(s, 2);
    oracle64::Vec h = xd;
    for (auto i : sel) {
      oracle64::Vec e = oracle64::expert_forward(layer.experts[i], xd);
      for (std::size_t j = 0; j < 10; ++j) h[j] += s[i] * e[j];
    }
    for (const auto& sh : layer.shared) {
      oracle64::Vec e = oracle64::expert_forward(sh, xd);
      for (std::size_t j = 0; j < 10; ++j) h[j] += e[j];
    }
    int nonzero = 0;
    for (float g : result.gates.data)
      if (g != 0.0f) ++nonzero;
    CHECK(nonzero == 2);
    double gate_sum = 0.0;
    for (float g : result.gates.data) gate_sum += g;
    CHECK(gate_sum <= 1.0 + 1e-6);
    for (std::size_t j = 0; j < 10; ++j)
      CHECK(std::fabs((double)result.h.data[j] - h[j]) < 1e-5);
  }
}

TEST_CASE("routed_forward is permutation equivariant bitwise") {
  const int n = 5, d = 8, f = 8;
  RoutedMoELayer layer = random_layer(n, 3, d, f, 21);
  Rng rng(22);
  Tensor x = Tensor::randn({(std::size_t)d}, rng);
  auto base = cdmoe::routed_forward(x, layer);

  // rotate experts and centroid rows together
  std::vector<int> perm = {3, 0, 4, 1, 2};
  RoutedMoELayer permuted = layer;
  for (int i = 0; i < n; ++i) {
    permuted.experts[(std::size_t)i] = layer.experts[(std::size_t)perm[i]];
    for (int j = 0; j < d; ++j)
      permuted.centroids.at((std::size_t)i, (std::size_t)j) =
          layer.centroids.at((std::size_t)perm[i], (std::size_t)j);
  }
  auto moved = cdmoe::routed_forward(x, permuted);
  CHECK(std::memcmp(base.h.data.data(), moved.h.data.data(),
                    (std::size_t)d * sizeof(float)) == 0);
  for (int i = 0; i < n; ++i)
    CHECK(moved.gates.data[(std::size_t)i] ==
          base.gates.data[(std::size_t)perm[i]]);
}

TEST_CASE("model_forward handles empty input and bad ids") {
  MoEModel model = cdmoe::init_model(small_config(), 31);
  Tensor logits = cdmoe::model_forward(model, {});
  CHECK(logits.shape == std::vector<std::size_t>{0, 61});
  CHECK(logits.numel() == 0);
  CHECK_THROWS_AS(cdmoe::model_forward(model, {61}), cdmoe::ArgumentError);
  CHECK_THROWS_AS(cdmoe::model_forward(model, std::vector<int>(99, 1)),
                  cdmoe::ArgumentError);
}

TEST_CASE("degenerate pipeline: zero weights reduce to embed-norm-head") {
  ModelConfig cfg = small_config();
  cfg.num_blocks = 1;
  MoEModel model = cdmoe::init_model(cfg, 33);
  auto& block = model.blocks[0];
  std::fill(block.attn.wq.data.begin(), block.attn.wq.data.end(), 0.0f);
  std::fill(block.attn.wk.data.begin(), block.attn.wk.data.end(), 0.0f);
  std::fill(block.attn.wv.data.begin(), block.attn.wv.data.end(), 0.0f);
  std::fill(block.attn.wo.data.begin(), block.attn.wo.data.end(), 0.0f);
  auto& layer = std::get<RoutedMoELayer>(block.layer);
  for (auto& e : layer.experts) zero_expert(e);
  for (auto& e : layer.shared) zero_expert(e);

  const int token = 17;
  Tensor logits = cdmoe::model_forward(model, {token});

  // independent re-derivation of the embed -> norm -> head path
  const std::size_t d = (std::size_t)cfg.hidden_size;
  std::vector<float> x(d);
  for (std::size_t j = 0; j < d; ++j)
    x[j] = model.token_embedding.at(token, j) +
           model.position_embedding.at(0, j);
  double ss = 0.0;
  for (std::size_t j = 0; j < d; ++j) ss += (double)x[j] * (double)x[j];
  const float inv = 1.0f / std::sqrt((float)(ss / (double)d) + 1e-5f);
  std::vector<float> normed(d);
  for (std::size_t j = 0; j < d; ++j)
    normed[j] = x[j] * inv * model.output_norm.data[j];
  for (int v = 0; v < cfg.vocab_size; ++v) {
    float acc = 0.0f;
    for (std::size_t j = 0; j < d; ++j)
      acc += normed[j] * model.lm_head.at(j, (std::size_t)v);
    CHECK(std::fabs(acc - logits.at(0, (std::size_t)v)) < 1e-6f);
  }
}

TEST_CASE("residual guarantee holds bitwise across blocks") {
  ModelConfig cfg = small_config();
  cfg.num_blocks = 3;
  MoEModel model = cdmoe::init_model(cfg, 35);
  MoEModel stripped = model;
  for (auto& block : stripped.blocks) {
    std::fill(block.attn.wo.data.begin(), block.attn.wo.data.end(), 0.0f);
    auto& layer = std::get<RoutedMoELayer>(block.layer);
    for (auto& e : layer.experts) zero_expert(e);
    for (auto& e : layer.shared) zero_expert(e);
  }
  ModelConfig solo = cfg;
  solo.num_blocks = 1;
  MoEModel head_only = cdmoe::init_model(solo, 1);
  head_only.token_embedding = stripped.token_embedding;
  head_only.position_embedding = stripped.position_embedding;
  head_only.output_norm = stripped.output_norm;
  head_only.lm_head = stripped.lm_head;
  auto& b0 = head_only.blocks[0];
  std::fill(b0.attn.wo.data.begin(), b0.attn.wo.data.end(), 0.0f);
  auto& l0 = std::get<RoutedMoELayer>(b0.layer);
  for (auto& e : l0.experts) zero_expert(e);
  for (auto& e : l0.shared) zero_expert(e);

  std::vector<int> tokens = {0, 5, 9, 42};
  Tensor a = cdmoe::model_forward(stripped, tokens);
  Tensor b = cdmoe::model_forward(head_only, tokens);
  CHECK(std::memcmp(a.data.data(), b.data.data(),
                    a.numel() * sizeof(float)) == 0);
}

TEST_CASE("model_forward matches the straight-line 64-bit oracle") {
  ModelConfig cfg = small_config();
  MoEModel model = cdmoe::init_model(cfg, 1234);
  std::vector<int> tokens = {8, 3, 0, 60, 7, 7, 12, 33};
  Tensor logits = cdmoe::model_forward(model, tokens);
  oracle64::Mat want = oracle64::forward(model, tokens);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (int v = 0; v < cfg.vocab_size; ++v)
      CHECK(std::fabs((double)logits.at(t, (std::size_t)v) -
                      want[t][(std::size_t)v]) < 1e-4);
}

TEST_CASE("model_forward is deterministic") {
  MoEModel model = cdmoe::init_model(small_config(), 77);
  std::vector<int> tokens = {1, 2, 3, 4, 5};
  Tensor a = cdmoe::model_forward(model, tokens);
  Tensor b = cdmoe::model_forward(model, tokens);
  CHECK(std::memcmp(a.data.data(), b.data.data(),
                    a.numel() * sizeof(float)) == 0);
}

TEST_CASE("forward trace exposes states and gates") {
  MoEModel model = cdmoe::init_model(small_config(), 41);
  std::vector<int> tokens = {4, 8, 15};
  cdmoe::ForwardTrace trace;
  cdmoe::model_forward(model, tokens, &trace);
  REQUIRE(trace.moe_inputs.size() == 2);
  REQUIRE(trace.gates.size() == 2);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(trace.moe_inputs[b].shape == std::vector<std::size_t>{3, 16});
    CHECK(trace.layer_outputs[b].shape == std::vector<std::size_t>{3, 16});
    CHECK(trace.gates[b].shape == std::vector<std::size_t>{3, 6});
    for (std::size_t t = 0; t < 3; ++t) {
      int nonzero = 0;
      for (std::size_t i = 0; i < 6; ++i)
        if (trace.gates[b].at(t, i) != 0.0f) ++nonzero;
      CHECK(nonzero == 2); // exactly K
    }
  }
}

TEST_CASE("collect_gate_stats counts and sums per expert") {
  ModelConfig cfg = small_config();
  cfg.num_blocks = 1;
  cfg.num_routing_experts = 4;
  cfg.k_active = 1;
  MoEModel model = cdmoe::init_model(cfg, 51);

  std::vector<std::vector<int>> one_token = {{9}};
  cdmoe::GateStats stats = cdmoe::collect_gate_stats(one_token, model, 0);
  std::int64_t total = 0;
  int active_experts = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    total += stats.activation_count[i];
    if (stats.activation_count[i] > 0) {
      ++active_experts;
      CHECK(stats.gate_sum[i] > 0.0);
      CHECK(stats.gate_sum[i] <= (double)stats.activation_count[i]);
    } else {
      CHECK(stats.gate_sum[i] == 0.0);
    }
  }
  CHECK(total == 1); // K=1 and one token
  CHECK(active_experts == 1);
}

TEST_CASE("collect_gate_stats satisfies the counting identity") {
  ModelConfig cfg = small_config();
  MoEModel model = cdmoe::init_model(cfg, 53);
  Rng rng(54);
  std::vector<std::vector<int>> calib;
  std::int64_t tokens_total = 0;
  for (int s = 0; s < 100; ++s) {
    const std::size_t len = 1 + rng.next_below(12);
    std::vector<int> seq(len);
    for (auto& t : seq) t = (int)rng.next_below((std::uint64_t)cfg.vocab_size);
    tokens_total += (std::int64_t)len;
    calib.push_back(std::move(seq));
  }
  cdmoe::GateStats stats = cdmoe::collect_gate_stats(calib, model, 0);
  std::int64_t total = 0;
  double mass = 0.0;
  for (std::size_t i = 0; i < stats.num_experts(); ++i) {
    total += stats.activation_count[i];
    mass += stats.gate_sum[i];
    CHECK(stats.gate_sum[i] <= (double)stats.activation_count[i] + 1e-9);
  }
  CHECK(total == (std::int64_t)cfg.k_active * tokens_total);
  CHECK(stats.total_tokens == tokens_total);
  CHECK(mass <= (double)tokens_total + 1e-6);
}

TEST_CASE("gate stats merge like a sum over shards") {
  ModelConfig cfg = small_config();
  MoEModel model = cdmoe::init_model(cfg, 56);
  std::vector<std::vector<int>> part_a = {{1, 2, 3}, {4, 5}};
  std::vector<std::vector<int>> part_b = {{6, 7, 8, 9}};
  std::vector<std::vector<int>> both = {{1, 2, 3}, {4, 5}, {6, 7, 8, 9}};
  cdmoe::GateStats merged = cdmoe::collect_gate_stats(part_a, model, 0);
  merged.merge(cdmoe::collect_gate_stats(part_b, model, 0));
  cdmoe::GateStats whole = cdmoe::collect_gate_stats(both, model, 0);
  CHECK(merged.activation_count == whole.activation_count);
  CHECK(merged.total_tokens == whole.total_tokens);
  for (std::size_t i = 0; i < whole.num_experts(); ++i)
    CHECK(merged.gate_sum[i] == doctest::Approx(whole.gate_sum[i]));
}

TEST_CASE("collect_gate_stats rejects condensed layers") {
  ModelConfig cfg = small_config();
  MoEModel model = cdmoe::init_model(cfg, 55);
  cdmoe::CondensedLayer dense;
  dense.shared = std::get<RoutedMoELayer>(model.blocks[0].layer).shared;
  dense.kept_gates = Tensor::zeros({0});
  dense.origin = 0;
  model.blocks[0].layer = dense;
  CHECK_THROWS_AS(cdmoe::collect_gate_stats({{1, 2}}, model, 0),
                  cdmoe::StateError);
}

TEST_CASE("two-token arithmetic for gate stats") {
  // uniform router: all-zero centroids, N=4, K=2 -> every gate is 0.25
  ModelConfig cfg = small_config();
  cfg.num_blocks = 1;
  cfg.num_routing_experts = 4;
  cfg.k_active = 2;
  MoEModel model = cdmoe::init_model(cfg, 57);
  auto& layer = std::get<RoutedMoELayer>(model.blocks[0].layer);
  std::fill(layer.centroids.data.begin(), layer.centroids.data.end(), 0.0f);
  cdmoe::GateStats stats = cdmoe::collect_gate_stats({{3, 9}}, model, 0);
  // ties select experts 0 and 1 for both tokens
  CHECK(stats.activation_count[0] == 2);
  CHECK(stats.activation_count[1] == 2);
  CHECK(stats.activation_count[2] == 0);
  CHECK(stats.gate_sum[0] == doctest::Approx(0.5));
  CHECK(stats.gate_sum[1] == doctest::Approx(0.5));
}
