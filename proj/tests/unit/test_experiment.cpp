#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "eio/checkpoint.hpp"
#include "eio/experiment.hpp"
#include "support.hpp"

using namespace eio;
using namespace eio::testsup;
using nlohmann::json;

namespace {

ErrorCategory category_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.category();
  }
  ADD_FAILURE() << "no eio::Error thrown";
  return ErrorCategory::usage;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json tiny_config(const TempDir& dir) {
  auto j = json::parse(R"({
    "name": "t", "seed": 1, "n": 2,
    "dataset": {"source": "synthetic_blobs", "classes": 2, "dims": [3, 8, 8], "count": 200, "seed": 3},
    "train": {"pretrain_epochs": 1, "epochs": 1, "batch_size": 32},
    "finetune": {"epochs": 1, "batch_size": 32},
    "surrogates": {"count": 1, "fit": {"epochs": 1, "batch_size": 32}},
    "derive": {"count": 2},
    "eval": {"eps": [0, 0.03], "samples": 30, "monitor_samples": 20,
             "protocols": ["clean", "blackbox", "whitebox", "transfer"],
             "blackbox": {"steps": 2}, "whitebox": {"steps": 2}, "transfer": {"steps": 2}}
  })");
  j["arch"] = std::string(EIO_ARCH_DIR) + "/tiny3.arch";
  j["output_dir"] = dir / "out";
  return j;
}

std::string write_config(const TempDir& dir, const json& j) {
  const auto path = dir / "cfg.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace

TEST(Config, OverridesAndDefaults) {
  json j = {{"train", {{"epochs", 3}}}};
  exp::apply_override(j, "train.epochs=5");
  exp::apply_override(j, "train.lr.milestones=[1,2]");
  exp::apply_override(j, "name=hello");
  EXPECT_EQ(j["train"]["epochs"], 5);
  EXPECT_EQ(j["train"]["lr"]["milestones"], json::array({1, 2}));
  EXPECT_EQ(j["name"], "hello");
  EXPECT_ANY_THROW(exp::apply_override(j, "novalue"));

  TempDir dir;
  const auto cfg = exp::load_config(write_config(dir, tiny_config(dir)), {"train.epochs=4", "seed=9"});
  EXPECT_EQ(cfg.train.epochs, 4);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.train.seed, 9u);
  // distill step defaults to eps/steps
  EXPECT_NEAR(cfg.train.distill.step_size, cfg.train.distill.eps / cfg.train.distill.steps, 1e-15);
  // the canonical form round-trips to the same hash
  EXPECT_EQ(exp::ExperimentConfig::from_json(cfg.to_json()).hash(), cfg.hash());
  const auto other = exp::load_config(write_config(dir, tiny_config(dir)), {"seed=10"});
  EXPECT_NE(other.hash(), cfg.hash());
}

TEST(Config, Errors) {
  TempDir dir;
  auto j = tiny_config(dir);
  j["train"]["epoch"] = 3;  // typo
  EXPECT_EQ(category_of([&] { exp::load_config(write_config(dir, j)); }), ErrorCategory::config);
  j = tiny_config(dir);
  j["train"]["epochs"] = "three";
  EXPECT_EQ(category_of([&] { exp::load_config(write_config(dir, j)); }), ErrorCategory::config);
  j = tiny_config(dir);
  j["arch"] = dir / "missing.arch";
  EXPECT_EQ(category_of([&] { exp::load_config(write_config(dir, j)).validate(); }), ErrorCategory::io);
  {
    std::ofstream(dir / "bad.json") << "{ not json";
  }
  EXPECT_EQ(category_of([&] { exp::load_config(dir / "bad.json"); }), ErrorCategory::parse);
  EXPECT_EQ(category_of([&] { exp::load_config(dir / "nothere.json"); }), ErrorCategory::io);
}

TEST(Commands, BuildManifest) {
  TempDir dir;
  auto j = tiny_config(dir);
  j["arch"] = std::string(EIO_ARCH_DIR) + "/resnet20.arch";
  j["dataset"]["dims"] = {3, 32, 32};
  j["dataset"]["classes"] = 10;
  const auto cfg = exp::load_config(write_config(dir, j));
  exp::cmd_build(cfg, {.quiet = true});
  const auto man = json::parse(slurp(dir / "out/manifest.json"));
  EXPECT_EQ(man["L"], 21);
  EXPECT_EQ(man["path_count"], "2097152");
  EXPECT_EQ(ckpt::read_container(dir / "out/rgn.ckpt").manifest["config_hash"], cfg.hash());

  auto one = tiny_config(dir);
  one["n"] = 1;
  one["output_dir"] = dir / "one";
  exp::cmd_build(exp::load_config(write_config(dir, one)), {.quiet = true});
  EXPECT_NE(slurp(dir / "one/manifest.json").find("degenerate: equivalent to base network"), std::string::npos);
}

TEST(Commands, DeriveMoreThanPathsIsInfeasible) {
  TempDir dir;
  {
    std::ofstream(dir / "one.arch") << kOneConv;
  }
  auto j = tiny_config(dir);
  j["arch"] = dir / "one.arch";
  j["train"]["pretrain_epochs"] = 0;
  j["train"]["epochs"] = 0;
  const auto cfg = exp::load_config(write_config(dir, j));
  exp::cmd_build(cfg, {.quiet = true});
  exp::cmd_train(cfg, {.quiet = true});
  EXPECT_EQ(category_of([&] { exp::cmd_derive(cfg, {.count = 3, .quiet = true}); }), ErrorCategory::infeasible);
  const auto s = exp::cmd_derive(cfg, {.count = 2, .quiet = true});
  EXPECT_TRUE(std::filesystem::exists(dir / "out/derived/path1.ckpt"));
  (void)s;
}

TEST(Commands, PipelineIsReproducibleAndPlotsMatchCsv) {
  TempDir dir;
  const auto cfg = exp::load_config(write_config(dir, tiny_config(dir)));
  const exp::CommandOptions q{.quiet = true};
  // black-box evaluation needs surrogates
  exp::cmd_build(cfg, q);
  exp::cmd_train(cfg, q);
  exp::cmd_derive(cfg, q);
  auto bb_only = cfg;
  bb_only.eval.protocols = {"blackbox"};
  EXPECT_ANY_THROW(exp::cmd_eval(bb_only, q));
  exp::cmd_surrogates(cfg, q);
  exp::cmd_eval(cfg, q);
  const auto csv = slurp(dir / "out/eval/summary.csv");
  exp::cmd_eval(cfg, q);
  EXPECT_EQ(slurp(dir / "out/eval/summary.csv"), csv);
  EXPECT_TRUE(std::filesystem::exists(dir / "out/eval/transfer.csv"));

  // every accuracy in the CSV appears as a plotted point
  std::istringstream rows(csv);
  std::string line;
  std::getline(rows, line);
  int n = 0;
  const auto svg = slurp(dir / "out/eval/accuracy.svg");
  while (std::getline(rows, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
    ASSERT_GE(f.size(), 4u);
    EXPECT_NE(svg.find("data-eps=\"" + f[2] + "\" data-accuracy=\"" + f[3] + "\""), std::string::npos) << line;
    ++n;
  }
  const std::regex circle("<circle");
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), circle), std::sregex_iterator()), n);

  exp::cmd_report(cfg, q);
  EXPECT_EQ(slurp(dir / "out/eval/accuracy.svg"), svg);
}
