#pragma once

// Config-driven orchestration behind the `eio` command line:
// build -> train -> derive (-> finetune) -> surrogates -> eval -> report.

#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "eio/dataset.hpp"
#include "eio/protocol.hpp"
#include "eio/trainer.hpp"

namespace eio::exp {

using nlohmann::json;

struct SurrogateConfig {
  int count = 3;
  std::string arch;  // empty: the base architecture
  train::FinetuneConfig fit{40, 128, {0.1, {20, 30}, 0.1}, {}, 0};
};

struct DeriveConfig {
  int count = 1;
  bool finetune = true;
};

struct TransferConfig {
  double eps = 0.03;
  std::string method = "pgd";
  std::string loss = "ce";
  int steps = 50;
  double step_divisor = 5.0;
  int random_starts = 1;
  double momentum = 1.0;

  attack::AttackSpec spec() const;
};

struct EvalConfig {
  std::vector<double> eps{0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07};
  std::size_t samples = 1000;
  std::uint64_t sample_seed = 0;
  std::vector<std::string> protocols{"clean", "blackbox", "whitebox"};
  TransferConfig transfer;
  eval::ProtocolConfig blackbox = eval::ProtocolConfig::blackbox();
  eval::ProtocolConfig whitebox = eval::ProtocolConfig::whitebox();
  std::string ensemble_rule = "mean_prob";
  std::size_t monitor_samples = 500;  // per-epoch clean accuracy during training
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  std::string arch;
  std::string scope = "all";
  int n = 2;
  data::DatasetDescriptor dataset;
  train::TrainConfig train;
  train::FinetuneConfig finetune;
  SurrogateConfig surrogates;
  DeriveConfig derive;
  EvalConfig eval;

  std::string source_dir;  // directory of the config file; used to resolve relative paths
  json raw;                // effective configuration as loaded (after overrides)

  // Canonical JSON of every field (defaults filled in).
  json to_json() const;
  static ExperimentConfig from_json(const json& j, const std::string& source_dir = {});
  std::string hash() const;
  void validate() const;

  // Output directory with EIO_OUTPUT_ROOT applied to relative paths.
  std::string output_root() const;
  std::string resolve(const std::string& path) const;
};

// "train.epochs=5" -> sets j["train"]["epochs"] = 5. The value is parsed as
// JSON when possible, else taken as a string.
void apply_override(json& j, const std::string& assignment);

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

struct CommandOptions {
  bool resume = false;
  int max_epochs = -1;  // stop after this many epochs in this invocation
  std::optional<int> count;
  std::vector<std::string> models;  // eval / finetune inputs
  bool ensemble = false;
  bool quiet = false;
};

// Each command returns a JSON summary that the CLI prints on stdout.
json cmd_build(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_train(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_derive(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_finetune(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_surrogates(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opt = {});
json cmd_report(const ExperimentConfig& cfg, const CommandOptions& opt = {});

// Artifact locations inside the output directory.
struct Layout {
  std::string root;
  std::string built() const { return root + "/rgn.ckpt"; }
  std::string train_dir() const { return root + "/train"; }
  std::string last() const { return train_dir() + "/last.ckpt"; }
  std::string pretrained() const { return train_dir() + "/pretrained.ckpt"; }
  std::string best() const { return train_dir() + "/best.ckpt"; }
  std::string log() const { return train_dir() + "/log.jsonl"; }
  std::string derived_dir() const { return root + "/derived"; }
  std::string surrogate_dir() const { return root + "/surrogates"; }
  std::string eval_dir() const { return root + "/eval"; }
};

Layout layout(const ExperimentConfig& cfg);

}  // namespace eio::exp
