// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "cdmoe/condense.hpp"
#include "cdmoe/training.hpp"
#include "oracle64.hpp"

using cdmoe::GradResult;
using cdmoe::ModelConfig;
using cdmoe::MoEModel;
using cdmoe::ParamMask;
using cdmoe::Rng;
using cdmoe::RoutedMoELayer;
using cdmoe::Tensor;
using cdmoe::TrainConfig;

namespace {

ModelConfig train_config_model() {
  ModelConfig cfg;
  cfg.vocab_size = 61;
  cfg.hidden_size = 16;
  cfg.expert_inner = 12;
  cfg.num_blocks = 2;
  cfg.num_routing_experts = 6;
  cfg.num_shared_experts = 2;
  cfg.k_active = 2;
  cfg.max_seq_len = 12;
  return cfg;
}

std::vector<std::vector<int>> small_batch(std::uint64_t seed, int vocab,
                                          int count = 2, int len = 8) {
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < count; ++s) {
    std::vector<int> seq((std::size_t)len);
    for (auto& t : seq) t = (int)rng.next_below((std::uint64_t)vocab);
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<float> snapshot(const MoEModel& model) {
  std::vector<float> bytes;
  for (const auto& ref : cdmoe::named_params(model))
    bytes.insert(bytes.end(), ref.tensor->data.begin(),
                 ref.tensor->data.end());
  return bytes;
}

// central finite differences through the double-precision oracle
void check_gradients(const MoEModel& model,
                     const std::vector<std::vector<int>>& batch,
                     double aux_coeff, int coords_per_tensor) {
  GradResult grad = cdmoe::loss_and_grads(model, batch,
                                          ParamMask::all(model), aux_coeff);
  const double h = 1e-3;
  Rng rng(2024);
  int checked = 0, skipped = 0;
  for (const auto& ref : cdmoe::named_params(model)) {
    const Tensor& analytic = grad.grads.at(ref.name);
    for (int c = 0; c < coords_per_tensor; ++c) {
      const std::size_t i = rng.next_below(ref.tensor->numel());
      MoEModel plus = model, minus = model;
      for (auto& r : cdmoe::named_params(plus))
        if (r.name == ref.name) r.tensor->data[i] += (float)h;
      for (auto& r : cdmoe::named_params(minus))
        if (r.name == ref.name) r.tensor->data[i] -= (float)h;
      const double lp =
          aux_coeff > 0.0
              ? oracle64::batch_loss_with_aux(plus, batch, aux_coeff)
              : oracle64::batch_loss(plus, batch);
      const double lm =
          aux_coeff > 0.0
              ? oracle64::batch_loss_with_aux(minus, batch, aux_coeff)
              : oracle64::batch_loss(minus, batch);
      const double fd = (lp - lm) / (2.0 * h);
      const double an = (double)analytic.data[i];
      if (std::fabs(an) < 1e-7 && std::fabs(fd) < 1e-7) {
        ++skipped; // untouched coordinate (unused token row etc.)
        continue;
      }
      const double rel =
          std::fabs(an - fd) / std::max(std::fabs(an), std::fabs(fd));
      INFO("tensor ", ref.name, " coord ", i, " analytic ", an, " fd ", fd);
      CHECK(rel < 1e-2);
      ++checked;
    }
  }
  INFO("checked ", checked, " coords, skipped ", skipped);
  CHECK(checked > 0);
}

} // namespace

TEST_CASE("uniform-logit model loses ln(vocab)") {
  ModelConfig cfg = train_config_model();
  cfg.vocab_size = 256;
  MoEModel model = cdmoe::init_model(cfg, 1);
  std::fill(model.lm_head.data.begin(), model.lm_head.data.end(), 0.0f);
  GradResult r = cdmoe::loss_and_grads(model, small_batch(2, 256),
                                       ParamMask::all(model));
  CHECK(std::fabs(r.loss - std::log(256.0)) < 1e-3);
}

TEST_CASE("near-perfect predictor: loss and gradients vanish") {
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.hidden_size = 1;
  cfg.expert_inner = 2;
  cfg.num_blocks = 1;
  cfg.num_routing_experts = 2;
  cfg.k_active = 1;
  cfg.max_seq_len = 8;
  cfg.attention_enabled = false;
  MoEModel model = cdmoe::init_model(cfg, 3);
  for (auto& v : model.token_embedding.data) v = std::fabs(v) + 0.1f;
  std::fill(model.position_embedding.data.begin(),
            model.position_embedding.data.end(), 0.0f);
  auto& layer = std::get<RoutedMoELayer>(model.blocks[0].layer);
  for (auto* experts : {&layer.experts, &layer.shared})
    for (auto& e : *experts) {
      std::fill(e.w_gate.data.begin(), e.w_gate.data.end(), 0.0f);
      std::fill(e.w_up.data.begin(), e.w_up.data.end(), 0.0f);
      std::fill(e.w_down.data.begin(), e.w_down.data.end(), 0.0f);
    }
  std::fill(model.lm_head.data.begin(), model.lm_head.data.end(), 0.0f);
  model.lm_head.at(0, 5) = 40.0f;
  GradResult r = cdmoe::loss_and_grads(model, {{5, 5, 5, 5}},
                                       ParamMask::all(model));
  CHECK(r.loss < 1e-6);
  for (const auto& [name, g] : r.grads)
    for (float v : g.data) CHECK(std::fabs(v) < 1e-6f);
}

TEST_CASE("reverse-mode gradients match central finite differences") {
  MoEModel model = cdmoe::init_model(train_config_model(), 77);
  auto batch = small_batch(78, 61);
  check_gradients(model, batch, 0.0, 20);
}

TEST_CASE("gradients through condensed layers match finite differences") {
  ModelConfig cfg = train_config_model();
  MoEModel model = cdmoe::init_model(cfg, 79);
  auto batch = small_batch(80, 61);
  cdmoe::GateStats stats = cdmoe::collect_gate_stats(batch, model, 0);
  std::vector<int> keep;
  for (int i = 0; i < cfg.num_routing_experts && (int)keep.size() < 2; ++i)
    if (stats.activation_count[(std::size_t)i] > 0) keep.push_back(i);
  const auto& routed = std::get<RoutedMoELayer>(model.blocks[0].layer);
  MoEModel condensed = cdmoe::with_condensed_block(
      model, 0, cdmoe::condense_layer(routed, keep, stats, 0));
  check_gradients(condensed, batch, 0.0, 12);
}

TEST_CASE("gradients with the load-balancing term match finite differences") {
  MoEModel model = cdmoe::init_model(train_config_model(), 81);
  auto batch = small_batch(82, 61);
  check_gradients(model, batch, 0.1, 8);
}

TEST_CASE("renormalized gates backprop correctly") {
  ModelConfig cfg = train_config_model();
  cfg.renormalize_gates = true;
  MoEModel model = cdmoe::init_model(cfg, 83);
  auto batch = small_batch(84, 61);
  check_gradients(model, batch, 0.0, 8);
}

TEST_CASE("attention-free models backprop correctly") {
  ModelConfig cfg = train_config_model();
  cfg.attention_enabled = false;
  MoEModel model = cdmoe::init_model(cfg, 85);
  auto batch = small_batch(86, 61);
  check_gradients(model, batch, 0.0, 8);
}

TEST_CASE("zero steps leave the model bitwise unchanged") {
  MoEModel model = cdmoe::init_model(train_config_model(), 85);
  auto before = snapshot(model);
  TrainConfig cfg;
  cfg.steps = 0;
  auto result = cdmoe::train(model, small_batch(86, 61),
                             cfg, ParamMask::all(model));
  auto after = snapshot(result.model);
  CHECK(std::memcmp(before.data(), after.data(),
                    before.size() * sizeof(float)) == 0);
  CHECK(result.curve.empty());
}

TEST_CASE("an all-frozen mask keeps parameters bitwise constant") {
  MoEModel model = cdmoe::init_model(train_config_model(), 87);
  auto before = snapshot(model);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  auto result = cdmoe::train(model, small_batch(88, 61, 4),
                             cfg, ParamMask::frozen());
  auto after = snapshot(result.model);
  CHECK(std::memcmp(before.data(), after.data(),
                    before.size() * sizeof(float)) == 0);
  CHECK(result.curve.size() == 5);
}

TEST_CASE("training is deterministic in seed, data, and config") {
  MoEModel model = cdmoe::init_model(train_config_model(), 89);
  auto corpus = small_batch(90, 61, 6);
  TrainConfig cfg;
  cfg.steps = 8;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 4;
  auto a = cdmoe::train(model, corpus, cfg, ParamMask::all(model));
  auto b = cdmoe::train(model, corpus, cfg, ParamMask::all(model));
  auto sa = snapshot(a.model), sb = snapshot(b.model);
  CHECK(std::memcmp(sa.data(), sb.data(), sa.size() * sizeof(float)) == 0);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].train_loss == b.curve[i].train_loss);
    CHECK(a.curve[i].lr == b.curve[i].lr);
  }
}

TEST_CASE("sft updates only condensed-layer tensors and improves loss") {
  ModelConfig mc = train_config_model();
  mc.max_seq_len = 16;
  MoEModel model = cdmoe::init_model(mc, 91);
  Rng rng(92);
  // learnable synthetic stream: arithmetic progressions mod vocab
  std::vector<std::vector<int>> corpus, eval_set;
  for (int s = 0; s < 90; ++s) {
    std::vector<int> seq(14);
    const int start = (int)rng.next_below(61);
    const int stride = 1 + (int)rng.next_below(3);
    for (int t = 0; t < 14; ++t) seq[(size_t)t] = (start + stride * t) % 61;
    (s < 72 ? corpus : eval_set).push_back(std::move(seq));
  }

  // pretrain until routing matters, then condense both blocks shared-only
  TrainConfig pre;
  pre.steps = 500;
  pre.batch_size = 8;
  pre.learning_rate = 5e-3;
  pre.aux_loss_coeff = 0.01;
  pre.seed = 93;
  pre.eval_every = 0;
  auto pretrained = cdmoe::train(model, corpus, pre, ParamMask::all(model));

  MoEModel condensed = pretrained.model;
  for (int b = 0; b < mc.num_blocks; ++b) {
    cdmoe::GateStats stats = cdmoe::collect_gate_stats(corpus, condensed, b);
    const auto& routed =
        std::get<RoutedMoELayer>(condensed.blocks[(std::size_t)b].layer);
    condensed = cdmoe::with_condensed_block(
        condensed, b, cdmoe::condense_layer(routed, {}, stats, b));
  }

  ParamMask mask = ParamMask::condensed_layers(condensed);
  // analytic trainable fraction: shared experts only (keep = [], no gates)
  const std::int64_t expert = 3LL * mc.hidden_size * mc.expert_inner;
  const std::int64_t expected_trainable =
      (std::int64_t)mc.num_blocks * mc.num_shared_experts * expert;
  std::int64_t trainable_count = 0, total_count = 0;
  for (const auto& ref : cdmoe::named_params(condensed)) {
    total_count += (std::int64_t)ref.tensor->numel();
    if (mask.is_trainable(ref.name))
      trainable_count += (std::int64_t)ref.tensor->numel();
  }
  CHECK(trainable_count == expected_trainable);
  CHECK(trainable_count < total_count);

  const double pre_loss =
      cdmoe::loss_and_grads(pretrained.model, eval_set, ParamMask::frozen())
          .loss;
  const double before =
      cdmoe::loss_and_grads(condensed, eval_set, ParamMask::frozen()).loss;
  CHECK(before > pre_loss); // condensation costs quality here

  TrainConfig sft;
  sft.steps = 200;
  sft.batch_size = 8;
  sft.learning_rate = 3e-3;
  sft.seed = 94;
  sft.eval_every = 50;
  auto tuned = cdmoe::train(condensed, corpus, sft, mask, eval_set);
  const double after =
      cdmoe::loss_and_grads(tuned.model, eval_set, ParamMask::frozen()).loss;
  CHECK(after < before);

  // every tensor outside the condensed sublayer is bitwise untouched
  auto refs_before = cdmoe::named_params(condensed);
  auto refs_after = cdmoe::named_params(tuned.model);
  REQUIRE(refs_before.size() == refs_after.size());
  for (std::size_t i = 0; i < refs_before.size(); ++i) {
    REQUIRE(refs_before[i].name == refs_after[i].name);
    if (mask.is_trainable(refs_before[i].name)) continue;
    CHECK(std::memcmp(refs_before[i].tensor->data.data(),
                      refs_after[i].tensor->data.data(),
                      refs_before[i].tensor->data.size() * sizeof(float)) ==
          0);
  }
}

TEST_CASE("train rejects unusable corpora and bad configs") {
  MoEModel model = cdmoe::init_model(train_config_model(), 95);
  TrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(
      cdmoe::train(model, {{1}}, cfg, ParamMask::all(model)),
      cdmoe::ArgumentError);
  TrainConfig bad;
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(
      cdmoe::train(model, {{1, 2, 3}}, bad, ParamMask::all(model)),
      cdmoe::ConfigError);
  CHECK_THROWS_AS(cdmoe::loss_and_grads(model, {}, ParamMask::all(model)),
                  cdmoe::ArgumentError);
}

TEST_CASE("numeric failures are reported, divergence aborts") {
  MoEModel model = cdmoe::init_model(train_config_model(), 97);
  model.lm_head.data[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    cdmoe::loss_and_grads(model, small_batch(98, 61), ParamMask::all(model));
    FAIL("expected NumericError");
  } catch (const cdmoe::NumericError& e) {
    CHECK(std::string(e.what()).find("lm_head") != std::string::npos);
  }

  MoEModel sane = cdmoe::init_model(train_config_model(), 99);
  TrainConfig wild;
  wild.steps = 40;
  wild.batch_size = 2;
  wild.learning_rate = 50.0; // guaranteed blow-up
  wild.warmup_ratio = 0.0;
  CHECK_THROWS_AS(
      cdmoe::train(sane, small_batch(100, 61, 4), wild, ParamMask::all(sane)),
      cdmoe::NumericError);
}

TEST_CASE("learning-rate schedule: warmup then cosine to zero") {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.steps = 100;
  cfg.warmup_ratio = 0.10;
  CHECK(cdmoe::lr_at_step(cfg, 0) == doctest::Approx(0.1));
  CHECK(cdmoe::lr_at_step(cfg, 9) == doctest::Approx(1.0));
  CHECK(cdmoe::lr_at_step(cfg, 10) > cdmoe::lr_at_step(cfg, 50));
  CHECK(cdmoe::lr_at_step(cfg, 99) < 0.01);
  const double mid = cdmoe::lr_at_step(cfg, 55);
  CHECK(mid == doctest::Approx(0.5).epsilon(0.01));
}
