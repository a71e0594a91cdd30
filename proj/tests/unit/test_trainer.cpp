#include <gtest/gtest.h>

#include "eio/dataset.hpp"
#include "eio/trainer.hpp"
#include "support.hpp"

using namespace eio;
using namespace eio::testsup;

namespace {

data::Dataset blobs(std::size_t count, int classes = 3) { return data::synthetic_blobs(classes, {3, 8, 8}, count, 42); }

train::TrainConfig small_config() {
  train::TrainConfig c;
  c.pretrain_epochs = 1;
  c.epochs = 1;
  c.batch_size = 16;
  c.lr = {0.05, {}, 0.1};
  c.pretrain_lr = {0.05, {}, 0.1};
  c.distill.steps = 3;
  c.distill.step_size = 0.02;
  c.check_invariants = true;
  c.seed = 9;
  return c;
}

}  // namespace

TEST(Sgd, MatchesPyTorchSemantics) {
  nn::Param<double> p;
  p.value = Tensor<double>({2}, std::vector<double>{1.0, -2.0});
  const train::SgdConfig cfg{0.9, 0.1, false};
  const double g1[2] = {0.5, 0.25};
  p.accumulate(g1);
  train::sgd_update(p, 0.1, cfg);
  // d = g + wd*w = {0.6, 0.05}; buf = d; w -= lr*buf
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 - 0.1 * 0.05, 1e-15);
  EXPECT_FALSE(p.touched);
  EXPECT_EQ(p.grad[0], 0.0);
  const double w0 = p.value[0];
  p.accumulate(g1);
  train::sgd_update(p, 0.1, cfg);
  const double d = 0.5 + 0.1 * w0;
  EXPECT_NEAR(p.value[0], w0 - 0.1 * (0.9 * 0.6 + d), 1e-15);
}

TEST(Sgd, UntouchedParametersAreFrozen) {
  nn::Param<double> p;
  p.value = Tensor<double>({1}, std::vector<double>{1.0});
  const double g[1] = {1.0};
  p.accumulate(g);
  train::sgd_update(p, 0.1, {0.9, 1e-4, false});
  const double w = p.value[0];
  const auto buf = p.momentum;
  train::sgd_update(p, 0.1, {0.9, 1e-4, false});  // no gradient since
  EXPECT_EQ(p.value[0], w);
  EXPECT_EQ(p.momentum, buf);
}

TEST(Schedule, StepDecay) {
  const train::LrSchedule s{0.1, {100, 150}, 0.1};
  EXPECT_DOUBLE_EQ(s.at(0), 0.1);
  EXPECT_DOUBLE_EQ(s.at(99), 0.1);
  EXPECT_NEAR(s.at(100), 0.01, 1e-15);
  EXPECT_NEAR(s.at(199), 0.001, 1e-15);
}

TEST(SampleLayer, RespectsFeasibility) {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const int l = train::sample_layer(6, 2, 3, rng);
    EXPECT_GE(l, 2);  // 2^1 < 3
    EXPECT_LE(l, 6);
  }
  EXPECT_ANY_THROW(train::sample_layer(1, 2, 3, rng));
}

TEST(Diversify, StepAccounting) {
  auto m = make_rgn(kSmallNet, 2);
  const auto d = blobs(64);
  train::BatchPair<float> b;
  std::vector<std::size_t> rows(16), rows2(16);
  for (std::size_t i = 0; i < 16; ++i) rows[i] = i, rows2[i] = 16 + i;
  b.x_t = d.images_as<float>(rows);
  b.y_t = d.labels_at(rows);
  b.x_s = d.images_as<float>(rows2);
  b.y_s = d.labels_at(rows2);
  auto cfg = small_config();
  auto state = train::TrainState::fresh(cfg.seed);
  const auto before = m.param_hash();
  const auto st = train::diversify_step(m, b, cfg, 0.05, state);
  EXPECT_EQ(st.paths.size(), 3u);
  EXPECT_TRUE(rgn::pairwise_prefix_distinct(st.paths, st.layer));
  EXPECT_EQ(st.distillations, 3);
  EXPECT_EQ(st.ce_terms, 6);
  EXPECT_EQ(st.updates, 1);
  EXPECT_EQ(st.losses.size(), 3u);
  EXPECT_NE(m.param_hash(), before);
  // only replicas on the sampled paths moved
  auto m0 = make_rgn(kSmallNet, 2);
  for (int blk = 0; blk < 3; ++blk)
    for (int r = 0; r < 2; ++r) {
      bool used = false;
      for (const auto& p : st.paths) used = used || p.gates[static_cast<std::size_t>(blk)] == r;
      EXPECT_EQ(m.replica(blk, r).weight.value == m0.replica(blk, r).weight.value, !used);
    }
}

TEST(Diversify, AdvTAddsWhiteBoxTerms) {
  auto m = make_rgn(kSmallNet, 2);
  const auto d = blobs(32);
  std::vector<std::size_t> rows(16), rows2(16);
  for (std::size_t i = 0; i < 16; ++i) rows[i] = i, rows2[i] = 16 + i;
  train::BatchPair<float> b{d.images_as<float>(rows), d.labels_at(rows), d.images_as<float>(rows2), d.labels_at(rows2)};
  auto cfg = small_config();
  cfg.advt.enabled = true;
  cfg.advt.steps = 2;
  auto state = train::TrainState::fresh(cfg.seed);
  const auto st = train::diversify_step(m, b, cfg, 0.05, state);
  EXPECT_EQ(st.advt_losses.size(), 3u);
  EXPECT_EQ(st.updates, 1);
}

TEST(Train, ZeroEpochsLeaveModelUnchanged) {
  auto m = make_rgn(kSmallNet, 2);
  const auto h = m.param_hash();
  auto cfg = small_config();
  cfg.pretrain_epochs = 0;
  cfg.epochs = 0;
  auto state = train::TrainState::fresh(cfg.seed);
  train::train(m, blobs(64), cfg, state);
  EXPECT_EQ(m.param_hash(), h);
  EXPECT_EQ(state.phase, "done");
}

TEST(Train, DiversifyZeroEqualsPretrainOnly) {
  auto cfg = small_config();
  auto a = make_rgn(kSmallNet, 2);
  auto b = make_rgn(kSmallNet, 2);
  auto sa = train::TrainState::fresh(cfg.seed), sb = train::TrainState::fresh(cfg.seed);
  train::train(a, blobs(64), cfg, sa, {.on_step = {}, .on_epoch = [&](const train::EpochRecord& r, const train::TrainState&) {
                                         if (r.phase == "pretrain") EXPECT_EQ(r.epoch, 0);
                                       }});
  cfg.epochs = 0;
  train::train(b, blobs(64), cfg, sb);
  EXPECT_NE(a.param_hash(), b.param_hash());
  auto c = make_rgn(kSmallNet, 2);
  auto sc = train::TrainState::fresh(cfg.seed);
  train::train(c, blobs(64), cfg, sc);
  EXPECT_EQ(b.param_hash(), c.param_hash());
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  auto cfg = small_config();
  cfg.pretrain_epochs = 2;
  cfg.epochs = 2;
  const auto d = blobs(64);
  auto full = make_rgn(kSmallNet, 2);
  auto s_full = train::TrainState::fresh(cfg.seed);
  train::train(full, d, cfg, s_full);

  for (int stop_after = 1; stop_after <= 3; ++stop_after) {
    auto part = make_rgn(kSmallNet, 2);
    auto s = train::TrainState::fresh(cfg.seed);
    struct Stop {};
    int seen = 0;
    std::string saved_state;
    try {
      train::train(part, d, cfg, s, {.on_step = {}, .on_epoch = [&](const train::EpochRecord&, const train::TrainState& st) {
                                       if (++seen == stop_after) {
                                         saved_state = st.to_json().dump();
                                         throw Stop{};
                                       }
                                     }});
    } catch (const Stop&) {
    }
    auto resumed = train::TrainState::from_json(nlohmann::json::parse(saved_state));
    train::train(part, d, cfg, resumed);
    EXPECT_EQ(part.param_hash(), full.param_hash()) << "stopped after epoch " << stop_after;
    EXPECT_EQ(resumed.steps, s_full.steps);
  }
}

TEST(TrainState, JsonRoundTrip) {
  auto s = train::TrainState::fresh(3);
  s.paths.next_u64();
  s.phase = "diversify";
  s.epoch = 4;
  s.steps = 17;
  const auto r = train::TrainState::from_json(s.to_json());
  EXPECT_EQ(r.phase, "diversify");
  EXPECT_EQ(r.epoch, 4);
  EXPECT_EQ(r.steps, 17u);
  EXPECT_TRUE(r.paths == s.paths);
  EXPECT_TRUE(r.distill == s.distill);
}

TEST(Finetune, CopiesAndImproves) {
  const auto g = arch::parse_arch(kSmallNet);
  Rng rng(5);
  const auto m = rgn::StandaloneModel<float>::initialize(g, rng, "m");
  const auto d = blobs(256);
  train::FinetuneConfig fc;
  fc.epochs = 5;
  fc.batch_size = 32;
  fc.lr = {0.05, {}, 0.1};
  const auto h = m.param_hash();
  const auto t = train::finetune(m, d, fc);
  EXPECT_EQ(m.param_hash(), h);
  EXPECT_EQ(t.provenance().path, m.provenance().path);
  const auto x = d.all_images<float>();
  EXPECT_GT(accuracy<float>(t, x, d.labels), accuracy<float>(m, x, d.labels));
  EXPECT_GT(accuracy<float>(t, x, d.labels), 0.9);
}

TEST(TrainConfig, Validation) {
  auto c = small_config();
  c.paths_per_iter = 1;
  EXPECT_ANY_THROW(c.validate());
  c = small_config();
  c.batch_size = 0;
  EXPECT_ANY_THROW(c.validate());
  EXPECT_NO_THROW(small_config().validate());
}
