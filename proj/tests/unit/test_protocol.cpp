#include <gtest/gtest.h>

#include <cmath>

#include "eio/dataset.hpp"
#include "eio/protocol.hpp"
#include "eio/trainer.hpp"
#include "support.hpp"

using namespace eio;
using namespace eio::testsup;

namespace {

struct Fixture {
  arch::ArchGraph g = arch::parse_arch(kResidualNet);
  std::vector<rgn::StandaloneModel<float>> models;
  Tensor<float> x;
  std::vector<int> y;

  explicit Fixture(int count = 3, int n = 12) {
    for (int k = 0; k < count; ++k) {
      Rng rng(10 + static_cast<std::uint64_t>(k));
      models.push_back(rgn::StandaloneModel<float>::initialize(g, rng, "m" + std::to_string(k)));
    }
    Rng rng(1);
    x = random_batch<float>(n, {3, 8, 8}, rng);
    y = nn::argmax_rows(models[0].logits(x));
  }
};

}  // namespace

TEST(Protocol, Inventories) {
  EXPECT_EQ(eval::ProtocolConfig::blackbox().versions_per_model(), 10);
  EXPECT_EQ(eval::ProtocolConfig::whitebox().versions_per_model(), 5);
  const auto wb = eval::ProtocolConfig::whitebox();
  EXPECT_EQ(wb.steps, 50);
  const auto specs = eval::ProtocolConfig::blackbox().specs(0.03);
  for (const auto& s : specs) EXPECT_NEAR(s.step_size, 0.006, 1e-15);
  auto bad = eval::ProtocolConfig::blackbox();
  bad.pgd_starts = 0;
  bad.mdi2fgsm = bad.sgm = false;
  EXPECT_ANY_THROW(bad.validate());
}

TEST(Protocol, WhiteboxAtZeroEqualsClean) {
  Fixture f(1);
  auto cfg = eval::ProtocolConfig::whitebox();
  cfg.steps = 3;
  const auto rep = eval::whitebox_protocol(f.models[0], {0.0, 0.05}, f.x, f.y, cfg);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].accuracy, accuracy<float>(f.models[0], f.x, f.y));
  EXPECT_EQ(rep.rows[0].accuracy, rep.rows[0].clean_accuracy);
  EXPECT_LE(rep.rows[1].accuracy, rep.rows[1].min_attack_accuracy);
  EXPECT_LE(rep.rows[1].min_attack_accuracy, rep.rows[1].clean_accuracy);
  EXPECT_EQ(rep.rows[1].versions, 5);
}

TEST(Protocol, BlackboxRecordsSurrogates) {
  Fixture f(3);
  eval::SurrogateSet<float> set;
  set.models = {&f.models[1], &f.models[2]};
  auto cfg = eval::ProtocolConfig::blackbox();
  cfg.steps = 2;
  const auto rep = eval::blackbox_protocol(f.models[0], set, {0.03}, f.x, f.y, cfg);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].sources, (std::vector<std::string>{"m1", "m2"}));
  EXPECT_EQ(rep.rows[0].versions, 20);
  EXPECT_FALSE(rep.rows[0].inventory_hash.empty());
  // same inputs, same numbers
  const auto again = eval::blackbox_protocol(f.models[0], set, {0.03}, f.x, f.y, cfg);
  EXPECT_EQ(again.rows[0].accuracy, rep.rows[0].accuracy);
  EXPECT_EQ(again.rows[0].inventory_hash, rep.rows[0].inventory_hash);
  eval::SurrogateSet<float> empty;
  EXPECT_ANY_THROW(eval::blackbox_protocol(f.models[0], empty, {0.03}, f.x, f.y, cfg));
}

TEST(Protocol, TransferMatrixShapeAndDiagonal) {
  Fixture f(3);
  // untrained nets are nearly constant; fit them so the attack has a gradient to follow
  const auto d = data::synthetic_blobs(3, {3, 8, 8}, 300, 4);
  train::FinetuneConfig fc;
  fc.epochs = 5;
  fc.batch_size = 32;
  fc.lr = {0.05, {}, 0.1};
  for (auto& m : f.models) m = train::finetune(m, d, fc);
  const auto rows = d.head(24);
  f.x = rows.all_images<float>();
  f.y = rows.labels;
  attack::AttackSpec s;
  s.eps = 0.3;
  s.steps = 10;
  s.step_size = 0.06;
  const std::vector<const Classifier<float>*> ms{&f.models[0], &f.models[1], &f.models[2]};
  const auto tm = eval::transfer_matrix(ms, s, f.x, f.y, 5);
  ASSERT_EQ(tm.success.size(), 3u);
  for (const auto& row : tm.success) {
    ASSERT_EQ(row.size(), 3u);
    for (double v : row) EXPECT_TRUE(v >= 0 && v <= 1);
  }
  EXPECT_EQ(tm.ids, (std::vector<std::string>{"m0", "m1", "m2"}));
  // a strong white-box attack on the source itself nearly always succeeds
  for (int i = 0; i < 3; ++i) EXPECT_GE(tm.success[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)], 0.5);
  double off = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) off += tm.success[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  EXPECT_NEAR(tm.mean_off_diagonal(), off / 6, 1e-15);
}

TEST(Ensemble, MeanProbArgmax) {
  Fixture f(3);
  const std::vector<const Classifier<float>*> ms{&f.models[0], &f.models[1], &f.models[2]};
  Ensemble<float> e(ms, EnsembleRule::mean_prob, "e");
  const auto out = e.logits(f.x);
  const auto pred = nn::argmax_rows(out);
  std::vector<Tensor<float>> probs;
  for (const auto* m : ms) probs.push_back(nn::softmax_rows(m->logits(f.x)));
  for (int n = 0; n < f.x.dim(0); ++n) {
    int best = 0;
    double bv = -1;
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (const auto& p : probs) s += p[static_cast<std::size_t>(n) * 3 + c];
      EXPECT_NEAR(std::exp(out[static_cast<std::size_t>(n) * 3 + c]), s / 3, 1e-5);
      if (s > bv) bv = s, best = c;
    }
    EXPECT_EQ(pred[static_cast<std::size_t>(n)], best);
  }
  EXPECT_EQ(parse_ensemble_rule("majority_vote"), EnsembleRule::majority_vote);
  EXPECT_ANY_THROW(parse_ensemble_rule("max"));
}

TEST(Aggregation, AllOrNothing) {
  EXPECT_DOUBLE_EQ(eval::all_or_nothing({{1, 1, 0, 1}, {1, 0, 0, 1}}), 0.5);
  EXPECT_DOUBLE_EQ(eval::all_or_nothing({{1, 1}}), 1.0);
  EXPECT_ANY_THROW(eval::all_or_nothing({}));
  EXPECT_NE(eval::inventory_hash({"a", "b"}), eval::inventory_hash({"b", "a"}));
}
