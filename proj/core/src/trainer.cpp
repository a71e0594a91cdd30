#include "eio/trainer.hpp"

#include <algorithm>

namespace eio::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) { return Rng::derive(seed, name).next_u64(); }

void check_schedule(const LrSchedule& s, const char* what) {
  require(s.base >= 0, ErrorCategory::config, std::string(what) + ": learning rate must be >= 0");
  require(s.gamma > 0, ErrorCategory::config, std::string(what) + ": lr gamma must be > 0");
  require(std::is_sorted(s.milestones.begin(), s.milestones.end()), ErrorCategory::config,
          std::string(what) + ": lr milestones must be increasing");
}

void check_sgd(const SgdConfig& s) {
  require(s.momentum >= 0 && s.momentum < 1, ErrorCategory::config, "sgd momentum must lie in [0, 1)");
  require(s.weight_decay >= 0, ErrorCategory::config, "weight_decay must be >= 0");
}

}  // namespace

double LrSchedule::at(int epoch) const {
  double lr = base;
  for (int m : milestones)
    if (epoch >= m) lr *= gamma;
  return lr;
}

template <typename T>
void sgd_update(nn::Param<T>& p, double lr, const SgdConfig& cfg) {
  if (!p.touched) return;
  const std::size_t n = p.value.size();
  const bool first = p.momentum.size() != n;
  if (first && cfg.momentum > 0) p.momentum = Tensor<T>(p.value.shape());
  const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), eta = static_cast<T>(lr);
  T* w = p.value.data();
  T* g = p.grad.data();
  for (std::size_t i = 0; i < n; ++i) {
    T d = g[i] + wd * w[i];
    if (cfg.momentum > 0) {
      T& buf = p.momentum[i];
      buf = first ? d : mu * buf + d;
      d = cfg.nesterov ? d + mu * buf : buf;
    }
    w[i] -= eta * d;
  }
  p.zero_grad();
}

template <typename T>
std::size_t sgd_update(nn::LayerParams<T>& layer, double lr, const SgdConfig& cfg) {
  std::size_t count = 0;
  layer.for_each_param([&](const char*, nn::Param<T>& p) {
    if (!p.touched) return;
    sgd_update(p, lr, cfg);
    ++count;
  });
  return count;
}

attack::AttackSpec AdvTConfig::attack_spec() const {
  attack::AttackSpec s;
  s.method = attack::Method::pgd;
  s.loss = attack::Loss::cross_entropy;
  s.eps = eps;
  s.steps = std::max(1, steps);
  s.step_size = step_size;
  s.random_starts = 1;
  s.random_init = true;
  s.momentum = 0.0;
  return s;
}

void TrainConfig::validate() const {
  require(pretrain_epochs >= 0 && epochs >= 0, ErrorCategory::config, "epoch counts must be >= 0");
  require(batch_size >= 1, ErrorCategory::config, "batch_size must be >= 1");
  require(paths_per_iter >= 2, ErrorCategory::config, "paths_per_iter must be >= 2 for diversification");
  require(l_resample_budget >= 1, ErrorCategory::config, "l_resample_budget must be >= 1");
  check_schedule(pretrain_lr, "pretrain");
  check_schedule(lr, "train");
  check_sgd(sgd);
  require(distill.eps >= 0 && distill.steps >= 0 && (distill.steps == 0 || distill.step_size > 0), ErrorCategory::config,
          "invalid distillation settings");
  if (advt.enabled) require(advt.eps >= 0 && advt.steps >= 1, ErrorCategory::config, "invalid advt settings");
}

void FinetuneConfig::validate() const {
  require(epochs >= 0, ErrorCategory::config, "finetune epochs must be >= 0");
  require(batch_size >= 1, ErrorCategory::config, "batch_size must be >= 1");
  check_schedule(lr, "finetune");
  check_sgd(sgd);
}

TrainState TrainState::fresh(std::uint64_t seed) {
  TrainState s;
  s.paths = Rng::derive(seed, "paths");
  s.distill = Rng::derive(seed, "distill");
  s.attack = Rng::derive(seed, "attack");
  return s;
}

json TrainState::to_json() const {
  return {{"phase", phase},
          {"epoch", epoch},
          {"steps", steps},
          {"updates", updates},
          {"rng", {{"paths", paths.state()}, {"distill", distill.state()}, {"attack", attack.state()}}}};
}

TrainState TrainState::from_json(const json& j) {
  TrainState s;
  s.phase = j.at("phase").get<std::string>();
  require(s.phase == "pretrain" || s.phase == "diversify" || s.phase == "done", ErrorCategory::corrupt,
          "unknown training phase '" + s.phase + "'");
  s.epoch = j.at("epoch").get<int>();
  s.steps = j.at("steps").get<std::uint64_t>();
  s.updates = j.at("updates").get<std::uint64_t>();
  const auto& r = j.at("rng");
  s.paths.set_state(r.at("paths").get<std::string>());
  s.distill.set_state(r.at("distill").get<std::string>());
  s.attack.set_state(r.at("attack").get<std::string>());
  return s;
}

int sample_layer(int L, int n, int p, Rng& rng, int budget) {
  require(L >= 1, ErrorCategory::validation, "gated depth must be >= 1");
  require(rgn::enough_prefixes(n, L, p), ErrorCategory::infeasible,
          "no layer admits " + std::to_string(p) + " distinct paths with n=" + std::to_string(n) + ", L=" + std::to_string(L));
  for (int attempt = 0; attempt < budget; ++attempt) {
    const int l = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(L)));
    if (rgn::enough_prefixes(n, l, p)) return l;
  }
  fail(ErrorCategory::infeasible, "layer resampling budget exhausted");
}

namespace {

template <typename T>
double path_ce(rgn::RGNModel<T>& model, const rgn::Path& path, const Tensor<T>& x, std::span<const int> y, nn::Mode mode,
               bool backward) {
  auto b = model.bind(path);
  nn::Executor<T> ex(model.graph());
  ex.forward(b, x, mode);
  if (!backward) return nn::cross_entropy<T>(ex.logits(), y, nullptr);
  Tensor<T> g;
  const double loss = nn::cross_entropy<T>(ex.logits(), y, &g);
  nn::BackwardOptions opt;
  opt.param_grads = true;
  ex.backward(b, {{model.graph().output_node(), std::move(g)}}, opt);
  return loss;
}

template <typename T>
std::vector<double> cross_terms(rgn::RGNModel<T>& model, const std::vector<rgn::Path>& paths,
                                const std::vector<distill::DistilledBatch<T>>& distilled, std::span<const int> y_s,
                                nn::Mode mode, bool backward) {
  require(paths.size() == distilled.size() && paths.size() >= 2, ErrorCategory::validation,
          "cross_loss needs one distilled batch per path (at least two)");
  for (std::size_t i = 0; i < paths.size(); ++i)
    require(distilled[i].path == paths[i], ErrorCategory::validation,
            "cross_loss: distilled batch " + std::to_string(i) + " was produced by path " + distilled[i].path.to_string() +
                ", not " + paths[i].to_string());
  std::vector<double> losses(paths.size(), 0.0);
  for (std::size_t j = 0; j < paths.size(); ++j)
    for (std::size_t i = 0; i < paths.size(); ++i)
      if (i != j) losses[j] += path_ce(model, paths[j], distilled[i].x_prime, y_s, mode, backward);
  return losses;
}

}  // namespace

template <typename T>
std::vector<double> cross_loss(rgn::RGNModel<T>& model, const std::vector<rgn::Path>& paths,
                               const std::vector<distill::DistilledBatch<T>>& distilled, std::span<const int> y_s,
                               nn::Mode mode) {
  return cross_terms(model, paths, distilled, y_s, mode, false);
}

template <typename T>
std::vector<double> accumulate_cross_loss(rgn::RGNModel<T>& model, const std::vector<rgn::Path>& paths,
                                          const std::vector<distill::DistilledBatch<T>>& distilled,
                                          std::span<const int> y_s) {
  return cross_terms(model, paths, distilled, y_s, nn::Mode::train, true);
}

template <typename T>
double accumulate_path_ce(rgn::RGNModel<T>& model, const rgn::Path& path, const Tensor<T>& x, std::span<const int> y) {
  return path_ce(model, path, x, y, nn::Mode::train, true);
}

template <typename T>
std::size_t apply_update(rgn::RGNModel<T>& model, double lr, const SgdConfig& cfg) {
  std::size_t count = 0;
  model.for_each_layer([&](const std::string&, nn::LayerParams<T>& p) { count += sgd_update(p, lr, cfg); });
  return count;
}

template <typename T>
double pretrain_step(rgn::RGNModel<T>& model, const Tensor<T>& x, std::span<const int> y, double lr,
                     const SgdConfig& sgd, Rng& paths) {
  const rgn::Path path = rgn::sample_path(model.depth(), model.width(), paths);
  model.zero_grad();
  const double loss = accumulate_path_ce(model, path, x, y);
  apply_update(model, lr, sgd);
  return loss;
}

template <typename T>
StepStats diversify_step(rgn::RGNModel<T>& model, const BatchPair<T>& batch, const TrainConfig& cfg, double lr,
                         TrainState& state) {
  require(batch.x_t.shape() == batch.x_s.shape() && batch.y_s.size() == static_cast<std::size_t>(batch.x_s.dim(0)),
          ErrorCategory::shape, "batch pair shapes differ");
  const int L = model.depth(), n = model.width(), p = cfg.paths_per_iter;
  StepStats st;
  st.layer = sample_layer(L, n, p, state.paths, cfg.l_resample_budget);
  st.paths = rgn::sample_distinct_paths(L, n, p, st.layer, state.paths);
  if (cfg.check_invariants)
    require(rgn::pairwise_prefix_distinct(st.paths, st.layer), ErrorCategory::validation,
            "sampled paths violate the top-l distinctness constraint");

  distill::DistillConfig dc = cfg.distill;
  dc.layer = st.layer;
  std::vector<distill::DistilledBatch<T>> distilled;
  distilled.reserve(st.paths.size());
  for (const auto& path : st.paths) {
    distilled.push_back(distill::distill_features(model, path, batch.x_t, batch.x_s, batch.y_s, dc, state.distill));
    ++st.distillations;
  }

  model.zero_grad();
  st.losses = accumulate_cross_loss(model, st.paths, distilled, batch.y_s);
  st.ce_terms = p * (p - 1);
  if (cfg.advt.enabled) {
    const attack::AttackSpec spec = cfg.advt.attack_spec();
    for (std::size_t j = 0; j < st.paths.size(); ++j) {
      const BoundGraph<T> frozen = model.path_model(st.paths[j]);
      const Tensor<T> x_w = attack::attack<T>(frozen, batch.x_s, batch.y_s, spec, state.attack).starts.front();
      const double adv = accumulate_path_ce(model, st.paths[j], x_w, batch.y_s);
      st.advt_losses.push_back(adv);
      st.losses[j] += adv;
      ++st.ce_terms;
    }
  }
  st.params_updated = apply_update(model, lr, cfg.sgd);
  st.updates = 1;
  ++state.steps;
  ++state.updates;
  return st;
}

template <typename T>
void train(rgn::RGNModel<T>& model, const data::Dataset& train_data, const TrainConfig& cfg, TrainState& state,
           const TrainHooks& hooks) {
  cfg.validate();
  require(train_data.size() > 0, ErrorCategory::validation, "training set is empty");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train_data.size());

  if (state.phase == "pretrain") {
    const std::uint64_t seed = stream_seed(cfg.seed, "data.pretrain");
    for (int e = state.epoch; e < cfg.pretrain_epochs; ++e) {
      const auto t0 = Clock::now();
      const double lr = cfg.pretrain_lr.at(e);
      data::BatchStream stream(train_data.size(), bs, seed, static_cast<std::uint64_t>(e));
      std::vector<std::size_t> rows;
      double total = 0;
      std::size_t count = 0;
      while (stream.next(rows)) {
        const Tensor<T> x = train_data.images_as<T>(rows);
        const std::vector<int> y = train_data.labels_at(rows);
        const double loss = pretrain_step(model, x, y, lr, cfg.sgd, state.paths);
        ++state.steps;
        ++state.updates;
        total += loss;
        ++count;
        if (hooks.on_step)
          hooks.on_step({{"phase", "pretrain"}, {"epoch", e}, {"step", state.steps}, {"loss", loss}, {"lr", lr}});
      }
      state.epoch = e + 1;
      if (hooks.on_epoch)
        hooks.on_epoch({"pretrain", e, state.steps, count ? total / static_cast<double>(count) : 0.0, lr, seconds_since(t0)},
                       state);
    }
    state.phase = "diversify";
    state.epoch = 0;
  }

  if (state.phase == "diversify") {
    const std::uint64_t seed_t = stream_seed(cfg.seed, "data.target");
    const std::uint64_t seed_s = stream_seed(cfg.seed, "data.source");
    for (int e = state.epoch; e < cfg.epochs; ++e) {
      const auto t0 = Clock::now();
      const double lr = cfg.lr.at(e);
      data::BatchStream st(train_data.size(), bs, seed_t, static_cast<std::uint64_t>(e));
      data::BatchStream ss(train_data.size(), bs, seed_s, static_cast<std::uint64_t>(e));
      std::vector<std::size_t> rt, rs;
      double total = 0;
      std::size_t count = 0;
      while (st.next(rt) && ss.next(rs)) {
        const auto s0 = Clock::now();
        BatchPair<T> pair{train_data.images_as<T>(rt), train_data.labels_at(rt), train_data.images_as<T>(rs),
                          train_data.labels_at(rs)};
        const StepStats stats = diversify_step(model, pair, cfg, lr, state);
        double mean = 0;
        for (double l : stats.losses) mean += l;
        mean /= static_cast<double>(stats.losses.size());
        total += mean;
        ++count;
        if (hooks.on_step) {
          std::vector<std::string> ps;
          for (const auto& p : stats.paths) ps.push_back(p.to_string());
          json rec = {{"phase", "diversify"}, {"epoch", e},     {"step", state.steps}, {"layer", stats.layer},
                      {"paths", ps},          {"losses", stats.losses}, {"lr", lr},    {"seconds", seconds_since(s0)}};
          if (!stats.advt_losses.empty()) rec["advt_losses"] = stats.advt_losses;
          hooks.on_step(rec);
        }
      }
      state.epoch = e + 1;
      if (hooks.on_epoch)
        hooks.on_epoch({"diversify", e, state.steps, count ? total / static_cast<double>(count) : 0.0, lr, seconds_since(t0)},
                       state);
    }
    state.phase = "done";
    state.epoch = 0;
  }
}

template <typename T>
void fit(rgn::StandaloneModel<T>& model, const data::Dataset& train_data, const FinetuneConfig& cfg,
         const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (cfg.epochs == 0) return;
  require(train_data.size() > 0, ErrorCategory::validation, "training set is empty");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train_data.size());
  const std::uint64_t seed = stream_seed(cfg.seed, "data.finetune");
  const nn::Binding<T> b = model.bind();
  std::uint64_t steps = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = Clock::now();
    const double lr = cfg.lr.at(e);
    data::BatchStream stream(train_data.size(), bs, seed, static_cast<std::uint64_t>(e));
    std::vector<std::size_t> rows;
    double total = 0;
    std::size_t count = 0;
    while (stream.next(rows)) {
      const Tensor<T> x = train_data.images_as<T>(rows);
      const std::vector<int> y = train_data.labels_at(rows);
      model.zero_grad();
      nn::Executor<T> ex(model.graph());
      ex.forward(b, x, nn::Mode::train);
      Tensor<T> g;
      total += nn::cross_entropy<T>(ex.logits(), y, &g);
      nn::BackwardOptions opt;
      opt.param_grads = true;
      ex.backward(b, {{model.graph().output_node(), std::move(g)}}, opt);
      model.for_each_layer([&](const std::string&, nn::LayerParams<T>& p) { sgd_update(p, lr, cfg.sgd); });
      ++count;
      ++steps;
    }
    if (on_epoch) on_epoch({"finetune", e, steps, count ? total / static_cast<double>(count) : 0.0, lr, seconds_since(t0)});
  }
}

template <typename T>
rgn::StandaloneModel<T> finetune(const rgn::StandaloneModel<T>& model, const data::Dataset& train_data,
                                 const FinetuneConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  rgn::StandaloneModel<T> out = model;
  fit(out, train_data, cfg, on_epoch);
  return out;
}

#define EIO_TRAIN_INSTANTIATE(T)                                                                                      \
  template void sgd_update<T>(nn::Param<T>&, double, const SgdConfig&);                                              \
  template std::size_t sgd_update<T>(nn::LayerParams<T>&, double, const SgdConfig&);                                 \
  template std::vector<double> cross_loss<T>(rgn::RGNModel<T>&, const std::vector<rgn::Path>&,                       \
                                             const std::vector<distill::DistilledBatch<T>>&, std::span<const int>,   \
                                             nn::Mode);                                                              \
  template std::vector<double> accumulate_cross_loss<T>(rgn::RGNModel<T>&, const std::vector<rgn::Path>&,            \
                                                        const std::vector<distill::DistilledBatch<T>>&,              \
                                                        std::span<const int>);                                       \
  template double accumulate_path_ce<T>(rgn::RGNModel<T>&, const rgn::Path&, const Tensor<T>&, std::span<const int>); \
  template std::size_t apply_update<T>(rgn::RGNModel<T>&, double, const SgdConfig&);                                 \
  template double pretrain_step<T>(rgn::RGNModel<T>&, const Tensor<T>&, std::span<const int>, double,                \
                                   const SgdConfig&, Rng&);                                                          \
  template StepStats diversify_step<T>(rgn::RGNModel<T>&, const BatchPair<T>&, const TrainConfig&, double,          \
                                       TrainState&);                                                                 \
  template void train<T>(rgn::RGNModel<T>&, const data::Dataset&, const TrainConfig&, TrainState&,                  \
                         const TrainHooks&);                                                                         \
  template void fit<T>(rgn::StandaloneModel<T>&, const data::Dataset&, const FinetuneConfig&,                       \
                       const std::function<void(const EpochRecord&)>&);                                              \
  template rgn::StandaloneModel<T> finetune<T>(const rgn::StandaloneModel<T>&, const data::Dataset&,                 \
                                               const FinetuneConfig&, const std::function<void(const EpochRecord&)>&);

EIO_TRAIN_INSTANTIATE(float)
EIO_TRAIN_INSTANTIATE(double)

}  // namespace eio::train
