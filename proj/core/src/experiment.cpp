#include "eio/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "eio/checkpoint.hpp"
#include "eio/report.hpp"

namespace eio::exp {

namespace fs = std::filesystem;

namespace {

// Strict reader: every key must be consumed, so typos in config files fail
// loudly instead of silently falling back to defaults.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorCategory::config, where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) fail(ErrorCategory::config, "unknown config key '" + path(it.key()) + "'");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      fail(ErrorCategory::config, "config key '" + path(key) + "' has the wrong type: " + j_.at(key).dump());
    }
  }
  bool has(const std::string& key) const { return j_.contains(key); }
  Reader sub(const std::string& key) {
    used_.insert(key);
    return Reader(j_.contains(key) ? j_.at(key) : empty(), path(key));
  }
  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json schedule_json(const train::LrSchedule& s) {
  return {{"base", s.base}, {"milestones", s.milestones}, {"gamma", s.gamma}};
}
void read_schedule(Reader r, train::LrSchedule& s) {
  r.get("base", s.base);
  r.get("milestones", s.milestones);
  r.get("gamma", s.gamma);
}

json fit_json(const train::FinetuneConfig& f) {
  return {{"epochs", f.epochs},
          {"batch_size", f.batch_size},
          {"lr", schedule_json(f.lr)},
          {"momentum", f.sgd.momentum},
          {"weight_decay", f.sgd.weight_decay}};
}
void read_fit(Reader r, train::FinetuneConfig& f) {
  r.get("epochs", f.epochs);
  r.get("batch_size", f.batch_size);
  read_schedule(r.sub("lr"), f.lr);
  r.get("momentum", f.sgd.momentum);
  r.get("weight_decay", f.sgd.weight_decay);
}

json protocol_json(const eval::ProtocolConfig& p) {
  std::vector<std::string> losses;
  for (auto l : p.losses) losses.push_back(attack::loss_name(l));
  return {{"steps", p.steps},
          {"step_divisor", p.step_divisor},
          {"pgd_starts", p.pgd_starts},
          {"mdi2fgsm", p.mdi2fgsm},
          {"sgm", p.sgm},
          {"losses", losses},
          {"momentum", p.momentum},
          {"kappa", p.kappa},
          {"transform_prob", p.transform_prob},
          {"resize_min", p.resize_min},
          {"resize_max", p.resize_max},
          {"sgm_gamma", p.sgm_gamma},
          {"batch_size", p.batch_size}};
}
void read_protocol(Reader r, eval::ProtocolConfig& p) {
  r.get("steps", p.steps);
  r.get("step_divisor", p.step_divisor);
  r.get("pgd_starts", p.pgd_starts);
  r.get("mdi2fgsm", p.mdi2fgsm);
  r.get("sgm", p.sgm);
  std::vector<std::string> losses;
  r.get("losses", losses);
  if (!losses.empty()) {
    p.losses.clear();
    for (const auto& l : losses) p.losses.push_back(attack::parse_loss(l));
  }
  r.get("momentum", p.momentum);
  r.get("kappa", p.kappa);
  r.get("transform_prob", p.transform_prob);
  r.get("resize_min", p.resize_min);
  r.get("resize_max", p.resize_max);
  r.get("sgm_gamma", p.sgm_gamma);
  r.get("batch_size", p.batch_size);
}

void log_line(const CommandOptions& opt, const std::string& msg) {
  if (!opt.quiet) std::cerr << "[eio] " << msg << std::endl;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

arch::ArchGraph load_graph(const ExperimentConfig& cfg, const std::string& path) {
  return arch::load_arch(cfg.resolve(path));
}

arch::RGNSpec make_spec(const ExperimentConfig& cfg) {
  arch::ArchGraph g = load_graph(cfg, cfg.arch);
  auto scope = arch::make_scope(g, arch::ScopeRequest::parse(cfg.scope));
  return arch::build_rgn_spec(g, scope, cfg.n);
}

json provenance_json(const ExperimentConfig& cfg) {
  return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"experiment", cfg.name}};
}

data::DatasetDescriptor resolved_dataset(const ExperimentConfig& cfg) {
  data::DatasetDescriptor d = cfg.dataset;
  if (!d.path.empty()) d.path = cfg.resolve(d.path);
  return d;
}

std::vector<std::string> ckpt_files(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ckpt") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

double monitor_accuracy(const rgn::RGNModel<float>& model, const data::Dataset& test, std::size_t count, std::uint64_t seed) {
  if (count == 0 || test.size() == 0) return -1.0;
  const data::Dataset sub = test.sample(count, seed);
  rgn::RandomGatedModel<float> rg(model, Rng::derive(seed, "monitor"), "monitor");
  return accuracy<float>(rg, sub.all_images<float>(), sub.labels);
}

void append_line(const std::string& path, const std::string& line) {
  std::ofstream os(path, std::ios::app);
  if (!os) fail(ErrorCategory::io, "cannot append to '" + path + "'");
  os << line << '\n';
}

// Keep only log records written up to `steps`, so a resumed run's log matches
// an uninterrupted one.
void trim_log(const std::string& path, std::uint64_t steps) {
  if (!fs::exists(path)) return;
  std::ifstream is(path);
  std::string line, kept;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.value("step", std::uint64_t{0}) <= steps) kept += line + "\n";
  }
  report::write_text(path, kept);
}

}  // namespace

attack::AttackSpec TransferConfig::spec() const {
  attack::AttackSpec s;
  s.method = attack::parse_method(method);
  s.loss = attack::parse_loss(loss);
  s.eps = eps;
  s.steps = steps;
  s.step_size = eps / step_divisor;
  s.random_starts = random_starts;
  s.momentum = momentum;
  return s;
}

json ExperimentConfig::to_json() const {
  const auto& t = train;
  return {
      {"name", name},
      {"seed", seed},
      {"output_dir", output_dir},
      {"arch", arch},
      {"scope", scope},
      {"n", n},
      {"dataset",
       {{"source", data::DatasetDescriptor::source_name(dataset.source)},
        {"path", dataset.path},
        {"classes", dataset.classes},
        {"dims", dataset.dims},
        {"count", dataset.count},
        {"test_fraction", dataset.test_fraction},
        {"seed", dataset.seed},
        {"train_limit", dataset.train_limit},
        {"test_limit", dataset.test_limit}}},
      {"train",
       {{"pretrain_epochs", t.pretrain_epochs},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"paths_per_iter", t.paths_per_iter},
        {"pretrain_lr", schedule_json(t.pretrain_lr)},
        {"lr", schedule_json(t.lr)},
        {"momentum", t.sgd.momentum},
        {"weight_decay", t.sgd.weight_decay},
        {"l_resample_budget", t.l_resample_budget},
        {"check_invariants", t.check_invariants},
        {"distill",
         {{"eps", t.distill.eps},
          {"steps", t.distill.steps},
          {"step_size", t.distill.step_size},
          {"random_start", t.distill.random_start}}},
        {"advt", {{"enabled", t.advt.enabled}, {"eps", t.advt.eps}, {"steps", t.advt.steps}, {"step_size", t.advt.step_size}}}}},
      {"finetune", fit_json(finetune)},
      {"surrogates", {{"count", surrogates.count}, {"arch", surrogates.arch}, {"fit", fit_json(surrogates.fit)}}},
      {"derive", {{"count", derive.count}, {"finetune", derive.finetune}}},
      {"eval",
       {{"eps", eval.eps},
        {"samples", eval.samples},
        {"sample_seed", eval.sample_seed},
        {"protocols", eval.protocols},
        {"transfer",
         {{"eps", eval.transfer.eps},
          {"method", eval.transfer.method},
          {"loss", eval.transfer.loss},
          {"steps", eval.transfer.steps},
          {"step_divisor", eval.transfer.step_divisor},
          {"random_starts", eval.transfer.random_starts},
          {"momentum", eval.transfer.momentum}}},
        {"blackbox", protocol_json(eval.blackbox)},
        {"whitebox", protocol_json(eval.whitebox)},
        {"ensemble_rule", eval.ensemble_rule},
        {"monitor_samples", eval.monitor_samples}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::string& source_dir) {
  ExperimentConfig c;
  c.source_dir = source_dir;
  c.raw = j;
  {
    Reader r(j, "");
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    r.get("arch", c.arch);
    r.get("scope", c.scope);
    r.get("n", c.n);
    {
      Reader d = r.sub("dataset");
      std::string source = data::DatasetDescriptor::source_name(c.dataset.source);
      d.get("source", source);
      c.dataset.source = data::DatasetDescriptor::parse_source(source);
      d.get("path", c.dataset.path);
      d.get("classes", c.dataset.classes);
      d.get("dims", c.dataset.dims);
      d.get("count", c.dataset.count);
      d.get("test_fraction", c.dataset.test_fraction);
      d.get("seed", c.dataset.seed);
      d.get("train_limit", c.dataset.train_limit);
      d.get("test_limit", c.dataset.test_limit);
    }
    {
      Reader t = r.sub("train");
      auto& tc = c.train;
      t.get("pretrain_epochs", tc.pretrain_epochs);
      t.get("epochs", tc.epochs);
      t.get("batch_size", tc.batch_size);
      t.get("paths_per_iter", tc.paths_per_iter);
      read_schedule(t.sub("pretrain_lr"), tc.pretrain_lr);
      read_schedule(t.sub("lr"), tc.lr);
      t.get("momentum", tc.sgd.momentum);
      t.get("weight_decay", tc.sgd.weight_decay);
      t.get("l_resample_budget", tc.l_resample_budget);
      t.get("check_invariants", tc.check_invariants);
      {
        Reader d = t.sub("distill");
        d.get("eps", tc.distill.eps);
        d.get("steps", tc.distill.steps);
        const bool explicit_step = d.has("step_size");
        d.get("step_size", tc.distill.step_size);
        if (!explicit_step) tc.distill.step_size = tc.distill.steps > 0 ? tc.distill.eps / tc.distill.steps : 0.0;
        d.get("random_start", tc.distill.random_start);
      }
      {
        Reader a = t.sub("advt");
        a.get("enabled", tc.advt.enabled);
        a.get("eps", tc.advt.eps);
        a.get("steps", tc.advt.steps);
        a.get("step_size", tc.advt.step_size);
      }
    }
    read_fit(r.sub("finetune"), c.finetune);
    {
      Reader s = r.sub("surrogates");
      s.get("count", c.surrogates.count);
      s.get("arch", c.surrogates.arch);
      read_fit(s.sub("fit"), c.surrogates.fit);
    }
    {
      Reader d = r.sub("derive");
      d.get("count", c.derive.count);
      d.get("finetune", c.derive.finetune);
    }
    {
      Reader e = r.sub("eval");
      e.get("eps", c.eval.eps);
      e.get("samples", c.eval.samples);
      e.get("sample_seed", c.eval.sample_seed);
      e.get("protocols", c.eval.protocols);
      {
        Reader t = e.sub("transfer");
        auto& tr = c.eval.transfer;
        t.get("eps", tr.eps);
        t.get("method", tr.method);
        t.get("loss", tr.loss);
        t.get("steps", tr.steps);
        t.get("step_divisor", tr.step_divisor);
        t.get("random_starts", tr.random_starts);
        t.get("momentum", tr.momentum);
      }
      read_protocol(e.sub("blackbox"), c.eval.blackbox);
      read_protocol(e.sub("whitebox"), c.eval.whitebox);
      e.get("ensemble_rule", c.eval.ensemble_rule);
      e.get("monitor_samples", c.eval.monitor_samples);
    }
  }
  c.train.seed = c.seed;
  c.finetune.seed = mix64(c.seed ^ hash_string("finetune"));
  c.eval.blackbox.seed = mix64(c.seed ^ hash_string("blackbox"));
  c.eval.whitebox.seed = mix64(c.seed ^ hash_string("whitebox"));
  return c;
}

std::string ExperimentConfig::hash() const { return hex64(hash_string(to_json().dump())); }

void ExperimentConfig::validate() const {
  require(!arch.empty(), ErrorCategory::config, "config: 'arch' is required");
  if (!fs::exists(resolve(arch))) fail(ErrorCategory::io, "architecture file '" + resolve(arch) + "' does not exist");
  if (!surrogates.arch.empty() && !fs::exists(resolve(surrogates.arch)))
    fail(ErrorCategory::io, "surrogate architecture file '" + resolve(surrogates.arch) + "' does not exist");
  require(n >= 1, ErrorCategory::config, "config: n must be >= 1");
  train.validate();
  finetune.validate();
  surrogates.fit.validate();
  require(surrogates.count >= 1, ErrorCategory::config, "config: surrogates.count must be >= 1");
  require(derive.count >= 1, ErrorCategory::config, "config: derive.count must be >= 1");
  for (double e : eval.eps) require(e >= 0, ErrorCategory::config, "config: eval eps must be >= 0");
  static const std::set<std::string> known{"clean", "blackbox", "whitebox", "transfer"};
  for (const auto& p : eval.protocols)
    require(known.count(p) > 0, ErrorCategory::config, "config: unknown protocol '" + p + "'");
  eval.blackbox.validate();
  eval.whitebox.validate();
  eval.transfer.spec().validate();
  parse_ensemble_rule(eval.ensemble_rule);
  if ((dataset.source == data::Source::cifar10_binary || dataset.source == data::Source::image_folder) &&
      !fs::exists(resolve(dataset.path)))
    fail(ErrorCategory::io, "dataset path '" + resolve(dataset.path) + "' does not exist");
}

std::string ExperimentConfig::output_root() const {
  fs::path p(output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("EIO_OUTPUT_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p.lexically_normal().string();
}

std::string ExperimentConfig::resolve(const std::string& path) const {
  fs::path p(path);
  if (p.is_absolute() || fs::exists(p) || source_dir.empty()) return p.string();
  fs::path alt = fs::path(source_dir) / p;
  return fs::exists(alt) ? alt.lexically_normal().string() : p.string();
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(ErrorCategory::usage, "override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCategory::usage, "override key '" + key + "' has an empty component");
    if (!cur->is_object()) *cur = json::object();
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  std::string dir;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) fail(ErrorCategory::io, "cannot open config '" + path + "'");
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      fail(ErrorCategory::parse, "config '" + path + "': " + e.what());
    }
    dir = fs::absolute(fs::path(path)).parent_path().string();
  }
  for (const auto& o : overrides) apply_override(j, o);
  return ExperimentConfig::from_json(j, dir);
}

Layout layout(const ExperimentConfig& cfg) { return Layout{cfg.output_root()}; }

// ---------------------------------------------------------------------------

json cmd_build(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const Layout lay = layout(cfg);
  arch::RGNSpec spec = make_spec(cfg);
  Rng init = Rng::derive(cfg.seed, "init");
  auto model = rgn::RGNModel<float>::create(spec, init);
  json extra = provenance_json(cfg);
  extra["config"] = cfg.to_json();
  ckpt::save_rgn(lay.built(), model, extra);
  const ckpt::Container c = ckpt::read_container(lay.built());
  json summary = c.manifest;
  summary.erase("arch");
  summary.erase("config");
  summary["checkpoint"] = lay.built();
  report::write_text(lay.root + "/manifest.json", c.manifest.dump(2) + "\n");
  log_line(opt, "built RGN: L=" + std::to_string(spec.L) + " n=" + std::to_string(spec.n) + " paths=" +
                    rgn::count_paths(spec).str() + (spec.degenerate() ? " (degenerate: equivalent to base network)" : ""));
  return summary;
}

json cmd_train(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const Layout lay = layout(cfg);
  const arch::RGNSpec expect = make_spec(cfg);

  std::optional<ckpt::Container> start;
  train::TrainState state = train::TrainState::fresh(cfg.seed);
  const bool resuming = opt.resume && fs::exists(lay.last());
  if (resuming) {
    start = ckpt::read_container(lay.last());
    state = train::TrainState::from_json(start->manifest.at("train_state"));
    trim_log(lay.log(), state.steps);
    log_line(opt, "resuming from " + lay.last() + " (" + state.phase + ", epoch " + std::to_string(state.epoch) + ")");
  } else {
    if (!fs::exists(lay.built())) fail(ErrorCategory::io, "no built checkpoint at '" + lay.built() + "'; run `eio build` first");
    start = ckpt::read_container(lay.built());
    fs::create_directories(lay.train_dir());
    report::write_text(lay.log(), "");
  }
  if (start->manifest.value("spec_hash", std::string{}) != hex64(expect.hash()))
    fail(ErrorCategory::config, "checkpoint/manifest mismatch: checkpoint spec hash " +
                                    start->manifest.value("spec_hash", std::string{"?"}) + " does not match the config (" +
                                    hex64(expect.hash()) + ")");
  auto model = ckpt::unpack_rgn<float>(*start);

  const data::DatasetSplit ds = data::ingest_dataset(resolved_dataset(cfg));
  log_line(opt, "dataset: " + std::to_string(ds.train.size()) + " train / " + std::to_string(ds.test.size()) + " test, " +
                    std::to_string(ds.train.classes) + " classes");
  require(ds.train.classes == expect.base.num_classes(), ErrorCategory::config,
          "dataset has " + std::to_string(ds.train.classes) + " classes but the architecture outputs " +
              std::to_string(expect.base.num_classes()));
  require(ds.train.sample_shape() == expect.base.input_shape(), ErrorCategory::config,
          "dataset samples are " + shape_string(ds.train.sample_shape()) + " but the architecture expects " +
              shape_string(expect.base.input_shape()));

  double best = start->manifest.value("best_monitor_accuracy", -1.0);
  int epochs_run = 0;
  struct Stop {};
  json base = provenance_json(cfg);
  train::TrainHooks hooks;
  hooks.on_step = [&](const json& rec) { append_line(lay.log(), rec.dump()); };
  hooks.on_epoch = [&](const train::EpochRecord& r, const train::TrainState& st) {
    const double acc = monitor_accuracy(model, ds.test, cfg.eval.monitor_samples,
                                        mix64(cfg.seed ^ hash_string(r.phase) ^ static_cast<std::uint64_t>(r.epoch)));
    json rec = {{"type", "epoch"}, {"phase", r.phase},   {"epoch", r.epoch},     {"step", r.steps},
                {"mean_loss", r.mean_loss}, {"lr", r.lr}, {"seconds", r.seconds}, {"monitor_accuracy", acc}};
    append_line(lay.log(), rec.dump());
    log_line(opt, r.phase + " epoch " + std::to_string(r.epoch + 1) + ": loss " + fmt(r.mean_loss) + ", monitor acc " +
                      fmt(acc) + ", " + fmt(r.seconds, 1) + "s");
    json extra = base;
    extra["train_state"] = st.to_json();
    extra["config"] = cfg.to_json();
    if (r.phase == "diversify" && acc > best) {
      best = acc;
      extra["best_monitor_accuracy"] = best;
      ckpt::save_rgn(lay.best(), model, extra);
    }
    extra["best_monitor_accuracy"] = best;
    ckpt::save_rgn(lay.last(), model, extra);
    if (r.phase == "pretrain" && st.epoch == cfg.train.pretrain_epochs) ckpt::save_rgn(lay.pretrained(), model, extra);
    ++epochs_run;
    if (opt.max_epochs >= 0 && epochs_run >= opt.max_epochs) throw Stop{};
  };

  bool stopped = false;
  if (state.phase == "pretrain" && state.epoch == 0 && cfg.train.pretrain_epochs == 0) {
    json extra = base;
    extra["train_state"] = state.to_json();
    ckpt::save_rgn(lay.pretrained(), model, extra);
  }
  try {
    train::train(model, ds.train, cfg.train, state, hooks);
  } catch (const Stop&) {
    stopped = true;
  }
  if (!stopped) {
    json extra = base;
    extra["train_state"] = state.to_json();
    extra["config"] = cfg.to_json();
    extra["best_monitor_accuracy"] = best;
    ckpt::save_rgn(lay.last(), model, extra);
    if (cfg.train.epochs == 0 && !fs::exists(lay.pretrained())) ckpt::save_rgn(lay.pretrained(), model, extra);
  }
  return {{"checkpoint", lay.last()},
          {"phase", state.phase},
          {"epoch", state.epoch},
          {"steps", state.steps},
          {"updates", state.updates},
          {"param_hash", hex64(model.param_hash())},
          {"stopped_early", stopped},
          {"config_hash", cfg.hash()}};
}

namespace {

std::vector<rgn::Path> distinct_paths(int L, int n, int count, Rng& rng) {
  const rgn::BigInt total = rgn::count_paths(n, L);
  if (rgn::BigInt(count) > total)
    fail(ErrorCategory::infeasible, "cannot derive " + std::to_string(count) + " distinct paths: the RGN has only " +
                                        total.str() + " paths");
  std::vector<rgn::Path> out;
  if (total <= 4096) {
    // Enumerate, then take a random prefix of a shuffle.
    const int t = static_cast<int>(total);
    std::vector<int> ids(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) ids[static_cast<std::size_t>(i)] = i;
    for (int i = t; i > 1; --i) std::swap(ids[static_cast<std::size_t>(i - 1)], ids[rng.uniform_index(static_cast<std::uint64_t>(i))]);
    for (int k = 0; k < count; ++k) {
      rgn::Path p;
      int v = ids[static_cast<std::size_t>(k)];
      p.gates.assign(static_cast<std::size_t>(L), 0);
      for (int b = L - 1; b >= 0; --b) {
        p.gates[static_cast<std::size_t>(b)] = v % n;
        v /= n;
      }
      out.push_back(p);
    }
    return out;
  }
  while (static_cast<int>(out.size()) < count) {
    rgn::Path p = rgn::sample_path(L, n, rng);
    if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  }
  return out;
}

std::string ft_name(const std::string& path) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + ".ft.ckpt")).string();
}

}  // namespace

json cmd_derive(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const Layout lay = layout(cfg);
  if (!fs::exists(lay.last())) fail(ErrorCategory::io, "no trained checkpoint at '" + lay.last() + "'; run `eio train` first");
  const ckpt::Container c = ckpt::read_container(lay.last());
  const std::string phase = c.manifest.contains("train_state") ? c.manifest["train_state"].value("phase", "") : "";
  if (phase != "done") log_line(opt, "warning: deriving from an unfinished training run (phase " + phase + ")");
  const auto model = ckpt::unpack_rgn<float>(c);
  const int count = opt.count.value_or(cfg.derive.count);
  require(count >= 1, ErrorCategory::usage, "derive count must be >= 1");
  Rng rng = Rng::derive(cfg.seed, "derive");
  const auto paths = distinct_paths(model.depth(), model.width(), count, rng);

  std::optional<data::DatasetSplit> ds;
  if (cfg.derive.finetune && cfg.finetune.epochs > 0) ds = data::ingest_dataset(resolved_dataset(cfg));
  json out = json::array();
  for (std::size_t k = 0; k < paths.size(); ++k) {
    const std::string id = cfg.name + "-path" + std::to_string(k);
    auto derived = rgn::derive_model(model, paths[k], id);
    const std::string file = lay.derived_dir() + "/path" + std::to_string(k) + ".ckpt";
    json extra = provenance_json(cfg);
    ckpt::save_standalone(file, derived, extra);
    json rec = {{"id", id}, {"path", paths[k].to_string()}, {"checkpoint", file}, {"rgn_hash", derived.provenance().rgn_hash}};
    if (ds) {
      train::FinetuneConfig fc = cfg.finetune;
      fc.seed = mix64(cfg.finetune.seed ^ static_cast<std::uint64_t>(k));
      auto tuned = train::finetune(derived, ds->train, fc);
      tuned.set_id(id + "-ft");
      extra["finetune"] = fit_json(fc);
      ckpt::save_standalone(ft_name(file), tuned, extra);
      rec["finetuned"] = ft_name(file);
    }
    log_line(opt, "derived " + id + " = path " + paths[k].to_string());
    out.push_back(rec);
  }
  return {{"derived", out}, {"config_hash", cfg.hash()}};
}

json cmd_finetune(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  require(!opt.models.empty(), ErrorCategory::usage, "finetune needs at least one --model checkpoint");
  const data::DatasetSplit ds = data::ingest_dataset(resolved_dataset(cfg));
  json out = json::array();
  for (std::size_t k = 0; k < opt.models.size(); ++k) {
    auto m = ckpt::load_standalone<float>(opt.models[k]);
    train::FinetuneConfig fc = cfg.finetune;
    fc.seed = mix64(cfg.finetune.seed ^ static_cast<std::uint64_t>(k));
    const double before = accuracy<float>(m, ds.test.all_images<float>(), ds.test.labels);
    auto tuned = train::finetune(m, ds.train, fc, [&](const train::EpochRecord& r) {
      log_line(opt, "finetune epoch " + std::to_string(r.epoch + 1) + ": loss " + fmt(r.mean_loss));
    });
    tuned.set_id(m.id() + "-ft");
    const double after = accuracy<float>(tuned, ds.test.all_images<float>(), ds.test.labels);
    json extra = provenance_json(cfg);
    extra["finetune"] = fit_json(fc);
    ckpt::save_standalone(ft_name(opt.models[k]), tuned, extra);
    out.push_back({{"input", opt.models[k]}, {"output", ft_name(opt.models[k])}, {"clean_before", before}, {"clean_after", after}});
  }
  return {{"finetuned", out}, {"config_hash", cfg.hash()}};
}

json cmd_surrogates(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const Layout lay = layout(cfg);
  const arch::ArchGraph g = load_graph(cfg, cfg.surrogates.arch.empty() ? cfg.arch : cfg.surrogates.arch);
  const data::DatasetSplit ds = data::ingest_dataset(resolved_dataset(cfg));
  const int count = opt.count.value_or(cfg.surrogates.count);
  require(count >= 1, ErrorCategory::usage, "surrogate count must be >= 1");
  json out = json::array();
  for (int k = 0; k < count; ++k) {
    const std::string id = "surrogate" + std::to_string(k);
    Rng init = Rng::derive(mix64(cfg.seed ^ static_cast<std::uint64_t>(k)), "surrogate.init");
    auto m = rgn::StandaloneModel<float>::initialize(g, init, id);
    train::FinetuneConfig fc = cfg.surrogates.fit;
    fc.seed = mix64(cfg.seed ^ hash_string(id));
    train::fit(m, ds.train, fc, [&](const train::EpochRecord& r) {
      log_line(opt, id + " epoch " + std::to_string(r.epoch + 1) + ": loss " + fmt(r.mean_loss) + ", " + fmt(r.seconds, 1) + "s");
    });
    const double acc = accuracy<float>(m, ds.test.all_images<float>(), ds.test.labels);
    json extra = provenance_json(cfg);
    extra["role"] = "surrogate";
    extra["fit"] = fit_json(fc);
    extra["clean_accuracy"] = acc;
    const std::string file = lay.surrogate_dir() + "/" + id + ".ckpt";
    ckpt::save_standalone(file, m, extra);
    log_line(opt, id + ": clean accuracy " + fmt(acc));
    out.push_back({{"id", id}, {"checkpoint", file}, {"clean_accuracy", acc}});
  }
  return {{"surrogates", out}, {"config_hash", cfg.hash()}};
}

namespace {

struct LoadedModels {
  std::vector<rgn::StandaloneModel<float>> standalone;
  std::vector<rgn::RGNModel<float>> rgns;
  std::vector<std::unique_ptr<Classifier<float>>> views;
  std::vector<const Classifier<float>*> targets;
  json provenance = json::array();
};

void load_targets(const ExperimentConfig& cfg, const std::vector<std::string>& specs, LoadedModels& lm) {
  lm.standalone.reserve(specs.size());
  lm.rgns.reserve(specs.size());
  for (const auto& s : specs) {
    if (s.rfind("rgn:", 0) == 0) {
      const std::string file = s.substr(4);
      lm.rgns.push_back(ckpt::load_rgn<float>(file));
      const std::string id = "rgn-random-gated:" + fs::path(file).stem().string();
      lm.views.push_back(std::make_unique<rgn::RandomGatedModel<float>>(lm.rgns.back(), Rng::derive(cfg.seed, "inference"), id));
      lm.targets.push_back(lm.views.back().get());
      lm.provenance.push_back({{"id", id}, {"checkpoint", file}, {"mode", "random-gated"}});
    } else {
      lm.standalone.push_back(ckpt::load_standalone<float>(s));
      const auto& m = lm.standalone.back();
      lm.targets.push_back(&m);
      lm.provenance.push_back({{"id", m.id()},
                               {"checkpoint", s},
                               {"path", m.provenance().path.to_string()},
                               {"rgn_hash", m.provenance().rgn_hash}});
    }
  }
}

}  // namespace

json cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opt) {
  cfg.validate();
  const Layout lay = layout(cfg);
  std::vector<std::string> specs = opt.models;
  if (specs.empty()) {
    // Prefer the fine-tuned version of each derived model when there is one.
    for (const auto& f : ckpt_files(lay.derived_dir())) {
      if (f.size() > 8 && f.compare(f.size() - 8, 8, ".ft.ckpt") == 0) continue;
      specs.push_back(fs::exists(ft_name(f)) ? ft_name(f) : f);
    }
  }
  require(!specs.empty(), ErrorCategory::usage, "no models to evaluate (pass --model or run `eio derive`)");
  LoadedModels lm;
  load_targets(cfg, specs, lm);
  std::unique_ptr<Ensemble<float>> ens;
  if (opt.ensemble) {
    ens = std::make_unique<Ensemble<float>>(lm.targets, parse_ensemble_rule(cfg.eval.ensemble_rule),
                                            "ensemble-" + cfg.eval.ensemble_rule + "-" + std::to_string(lm.targets.size()));
    lm.targets.push_back(ens.get());
  }

  const data::DatasetSplit ds = data::ingest_dataset(resolved_dataset(cfg));
  const data::Dataset sample = ds.test.sample(cfg.eval.samples, cfg.eval.sample_seed);
  const Tensor<float> x = sample.all_images<float>();
  const auto& y = sample.labels;
  auto wants = [&](const std::string& p) {
    return std::find(cfg.eval.protocols.begin(), cfg.eval.protocols.end(), p) != cfg.eval.protocols.end();
  };

  eval::EvalReport rep;
  json extra = provenance_json(cfg);
  extra["models"] = lm.provenance;
  if (wants("clean"))
    for (const auto* t : lm.targets) {
      eval::EvalRow row;
      row.model_id = t->id();
      row.protocol = "clean";
      row.accuracy = row.clean_accuracy = row.min_attack_accuracy = accuracy<float>(*t, x, y);
      row.n_samples = y.size();
      row.seed = cfg.eval.sample_seed;
      row.inventory_hash = eval::inventory_hash({});
      rep.rows.push_back(row);
    }

  std::vector<rgn::StandaloneModel<float>> surrogates;
  if (wants("blackbox")) {
    const auto files = ckpt_files(lay.surrogate_dir());
    if (files.empty())
      fail(ErrorCategory::validation, "black-box protocol needs surrogates in '" + lay.surrogate_dir() + "'; run `eio surrogates`");
    for (const auto& f : files) surrogates.push_back(ckpt::load_standalone<float>(f));
    eval::SurrogateSet<float> set;
    for (const auto& s : surrogates) set.models.push_back(&s);
    extra["surrogates"] = set.ids();
    for (double eps : cfg.eval.eps) {
      log_line(opt, "black-box: generating " + std::to_string(cfg.eval.blackbox.versions_per_model() * static_cast<int>(set.models.size())) +
                        " versions at eps=" + report::format_eps(eps));
      const auto adv = eval::generate_blackbox(set, eps, x, y, cfg.eval.blackbox);
      for (const auto* t : lm.targets) rep.rows.push_back(eval::score_against(*t, adv, x, y, "blackbox", cfg.eval.blackbox.seed));
    }
  }
  if (wants("whitebox"))
    for (const auto* t : lm.targets) {
      log_line(opt, "white-box: " + t->id());
      rep.append(eval::whitebox_protocol(*t, cfg.eval.eps, x, y, cfg.eval.whitebox));
    }

  fs::create_directories(lay.eval_dir());
  const std::string csv = lay.eval_dir() + "/summary.csv";
  report::write_csv(csv, rep);
  report::write_jsonl(lay.eval_dir() + "/records.jsonl", rep, extra);
  report::write_text(lay.eval_dir() + "/accuracy.svg",
                     report::accuracy_plot_svg(report::read_csv(csv), cfg.name + " [config " + cfg.hash() + "]"));
  json out = {{"summary_csv", csv}, {"rows", rep.rows.size()}, {"config_hash", cfg.hash()}};

  if (wants("transfer")) {
    std::vector<const Classifier<float>*> members(lm.targets.begin(), lm.targets.end() - (ens ? 1 : 0));
    require(members.size() >= 2, ErrorCategory::usage, "transfer matrix needs at least two models");
    const auto tm = eval::transfer_matrix(members, cfg.eval.transfer.spec(), x, y, mix64(cfg.seed ^ hash_string("transfer")));
    const std::string tcsv = lay.eval_dir() + "/transfer.csv";
    report::write_transfer_csv(tcsv, tm);
    report::write_text(lay.eval_dir() + "/transfer.svg",
                       report::transfer_heatmap_svg(report::read_csv(tcsv), "transfer success, eps=" + report::format_eps(tm.eps)));
    out["transfer_csv"] = tcsv;
    out["mean_off_diagonal"] = tm.mean_off_diagonal();
  }
  for (const auto& row : rep.rows)
    log_line(opt, row.model_id + " " + row.protocol + " eps=" + report::format_eps(row.eps) + " acc=" + fmt(row.accuracy));
  return out;
}

json cmd_report(const ExperimentConfig& cfg, const CommandOptions& opt) {
  const Layout lay = layout(cfg);
  const std::string csv = lay.eval_dir() + "/summary.csv";
  if (!fs::exists(csv)) fail(ErrorCategory::io, "no evaluation summary at '" + csv + "'; run `eio eval` first");
  const auto table = report::read_csv(csv);
  report::write_text(lay.eval_dir() + "/accuracy.svg", report::accuracy_plot_svg(table, cfg.name + " [config " + cfg.hash() + "]"));
  json out = {{"summary_csv", csv}, {"plot", lay.eval_dir() + "/accuracy.svg"}};
  const std::string tcsv = lay.eval_dir() + "/transfer.csv";
  if (fs::exists(tcsv)) {
    report::write_text(lay.eval_dir() + "/transfer.svg", report::transfer_heatmap_svg(report::read_csv(tcsv), "transfer success"));
    out["transfer_plot"] = lay.eval_dir() + "/transfer.svg";
  }
  if (!opt.quiet) {
    for (const auto& row : table) {
      for (std::size_t i = 0; i < row.size(); ++i) std::cerr << (i ? "  " : "") << row[i];
      std::cerr << '\n';
    }
  }
  return out;
}

}  // namespace eio::exp
