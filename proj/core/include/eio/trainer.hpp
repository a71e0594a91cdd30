#pragma once

// Training: SGD with PyTorch semantics, RGN pretraining, vulnerability
// diversification (cross-training on distilled features of other paths), the
// adversarial-training variant, and standard training / fine-tuning of
// standalone models.

#include <chrono>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "eio/attack.hpp"
#include "eio/dataset.hpp"
#include "eio/distill.hpp"
#include "eio/rgn.hpp"

namespace eio::train {

using nlohmann::json;

// Step decay: base * gamma^(number of milestones <= epoch).
struct LrSchedule {
  double base = 0.1;
  std::vector<int> milestones{100, 150};
  double gamma = 0.1;

  double at(int epoch) const;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = false;
};

// d = g + wd * w; buf = d on the first update, else mu * buf + d; w -= lr * buf.
// Only parameters that received a gradient since the last update are
// touched; their gradients are cleared afterwards.
template <typename T>
void sgd_update(nn::Param<T>& p, double lr, const SgdConfig& cfg);

template <typename T>
std::size_t sgd_update(nn::LayerParams<T>& layer, double lr, const SgdConfig& cfg);

struct AdvTConfig {
  bool enabled = false;
  double eps = 0.03;
  int steps = 10;
  double step_size = 0.007;

  attack::AttackSpec attack_spec() const;
};

struct TrainConfig {
  int pretrain_epochs = 40;
  int epochs = 200;
  int batch_size = 128;
  int paths_per_iter = 3;
  LrSchedule pretrain_lr{0.1, {}, 0.1};
  LrSchedule lr{0.1, {100, 150}, 0.1};
  SgdConfig sgd;
  distill::DistillConfig distill;
  AdvTConfig advt;
  std::uint64_t seed = 0;
  int l_resample_budget = 1000;
  bool check_invariants = false;  // scan every sampled path set for distinctness

  void validate() const;
};

struct FinetuneConfig {
  int epochs = 40;
  int batch_size = 128;
  LrSchedule lr{0.001, {20, 30}, 0.1};
  SgdConfig sgd;
  std::uint64_t seed = 0;

  void validate() const;
};

template <typename T>
struct BatchPair {
  Tensor<T> x_t;
  std::vector<int> y_t;
  Tensor<T> x_s;
  std::vector<int> y_s;
};

struct StepStats {
  int layer = 0;
  std::vector<rgn::Path> paths;
  std::vector<double> losses;       // per-path cross losses
  std::vector<double> advt_losses;  // per-path white-box terms (advt only)
  int distillations = 0;
  int ce_terms = 0;
  int updates = 0;
  std::size_t params_updated = 0;
};

// Resumable counters and RNG streams; serialized into checkpoint manifests.
struct TrainState {
  std::string phase = "pretrain";  // pretrain | diversify | done
  int epoch = 0;                   // completed epochs within the phase
  std::uint64_t steps = 0;
  std::uint64_t updates = 0;
  Rng paths;
  Rng distill;
  Rng attack;

  static TrainState fresh(std::uint64_t seed);
  json to_json() const;
  static TrainState from_json(const json& j);
};

// Uniform l in [1, L], redrawn while n^l < p.
int sample_layer(int L, int n, int p, Rng& rng, int budget = 1000);

// loss_j = sum_{i != j} CE(path_j(distilled[i].x_prime), y_s), each CE a batch
// mean. Forward only.
template <typename T>
std::vector<double> cross_loss(rgn::RGNModel<T>& model, const std::vector<rgn::Path>& paths,
                               const std::vector<distill::DistilledBatch<T>>& distilled, std::span<const int> y_s,
                               nn::Mode mode = nn::Mode::eval);

// As cross_loss, but also back-propagates every term into the parameter
// gradient buffers (train-mode forward). Gradients accumulate; nothing is
// applied.
template <typename T>
std::vector<double> accumulate_cross_loss(rgn::RGNModel<T>& model, const std::vector<rgn::Path>& paths,
                                          const std::vector<distill::DistilledBatch<T>>& distilled,
                                          std::span<const int> y_s);

// CE on one path with gradient accumulation; returns the loss.
template <typename T>
double accumulate_path_ce(rgn::RGNModel<T>& model, const rgn::Path& path, const Tensor<T>& x, std::span<const int> y);

// Apply one SGD update to every touched parameter of the RGN.
template <typename T>
std::size_t apply_update(rgn::RGNModel<T>& model, double lr, const SgdConfig& cfg);

// One pretraining step: a random path, clean CE, one update.
template <typename T>
double pretrain_step(rgn::RGNModel<T>& model, const Tensor<T>& x, std::span<const int> y, double lr,
                     const SgdConfig& sgd, Rng& paths);

// One diversification step (Algorithm 1 inner loop), including the AdvT
// variant when cfg.advt.enabled.
template <typename T>
StepStats diversify_step(rgn::RGNModel<T>& model, const BatchPair<T>& batch, const TrainConfig& cfg, double lr,
                         TrainState& state);

struct EpochRecord {
  std::string phase;
  int epoch = 0;
  std::uint64_t steps = 0;
  double mean_loss = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainHooks {
  // Called for each optimizer step with a JSON record (append-only log).
  std::function<void(const json&)> on_step;
  // Called after each completed epoch; the state is consistent for resume.
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch;
};

// Runs the remaining pretrain and diversify epochs from `state`.
template <typename T>
void train(rgn::RGNModel<T>& model, const data::Dataset& train_data, const TrainConfig& cfg, TrainState& state,
           const TrainHooks& hooks = {});

// Clean-data CE training of a standalone model; the input is left untouched.
template <typename T>
rgn::StandaloneModel<T> finetune(const rgn::StandaloneModel<T>& model, const data::Dataset& train_data,
                                 const FinetuneConfig& cfg,
                                 const std::function<void(const EpochRecord&)>& on_epoch = {});

// Same loop, in place; used for surrogates and standard baselines.
template <typename T>
void fit(rgn::StandaloneModel<T>& model, const data::Dataset& train_data, const FinetuneConfig& cfg,
         const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace eio::train
