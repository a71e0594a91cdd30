#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "eio/checkpoint.hpp"
#include "eio/error.hpp"
#include "eio/experiment.hpp"

namespace {

using eio::exp::json;

struct Common {
  std::string config;
  std::vector<std::string> set;
  bool quiet = false;
};

std::string join_json(const std::vector<double>& v) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << json(v[i]).dump();
  os << ']';
  return os.str();
}

json inspect(const std::string& path) {
  const auto c = eio::ckpt::read_container(path);
  json out = c.manifest;
  out.erase("config");
  out.erase("arch");
  out["kind"] = eio::ckpt::container_kind(c);
  json arrays = json::array();
  for (const auto& a : c.arrays) arrays.push_back({{"name", a.name}, {"shape", a.shape}});
  out["arrays"] = arrays;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eio: random gated networks, path derivation and transfer-attack evaluation"};
  app.require_subcommand(1);
  Common common;
  eio::exp::CommandOptions opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "experiment config (JSON)")->required();
    sub->add_option("-s,--set", common.set, "override a config key, e.g. train.epochs=5")->take_all();
    sub->add_flag("-q,--quiet", common.quiet, "no progress output on stderr");
  };

  auto* build = app.add_subcommand("build", "construct the RGN and write its initial checkpoint");
  add_common(build);

  auto* train = app.add_subcommand("train", "pretrain + diversify the RGN");
  add_common(train);
  train->add_flag("--resume", opt.resume, "continue from train/last.ckpt if present");
  train->add_option("--max-epochs", opt.max_epochs, "stop after this many epochs in this invocation");

  int count = 0;
  auto* derive = app.add_subcommand("derive", "derive standalone models from random distinct paths");
  add_common(derive);
  derive->add_option("-n,--count", count, "number of paths (default: derive.count)");

  auto* finetune = app.add_subcommand("finetune", "fine-tune standalone checkpoints");
  add_common(finetune);
  finetune->add_option("-m,--model", opt.models, "standalone checkpoint")->required();

  auto* surrogates = app.add_subcommand("surrogates", "standard-train surrogate models");
  add_common(surrogates);
  surrogates->add_option("-n,--count", count, "number of surrogates (default: surrogates.count)");

  std::vector<std::string> protocols;
  std::vector<double> eps;
  auto* evaluate = app.add_subcommand("eval", "evaluate models; writes CSV, JSONL and plots");
  add_common(evaluate);
  evaluate->add_option("-m,--model", opt.models, "checkpoint to evaluate; prefix rgn: for a random-gated RGN (default: derived/*.ckpt)");
  evaluate->add_option("-p,--protocol", protocols, "clean | blackbox | whitebox | transfer (default: eval.protocols)");
  evaluate->add_option("-e,--eps", eps, "perturbation budgets (default: eval.eps)");
  evaluate->add_flag("--ensemble", opt.ensemble, "also evaluate the ensemble of all models (eval.ensemble_rule)");

  auto* rep = app.add_subcommand("report", "re-render plots from eval/summary.csv");
  add_common(rep);

  std::string ckpt_path;
  auto* insp = app.add_subcommand("inspect", "print a checkpoint's manifest");
  insp->add_option("checkpoint", ckpt_path)->required();

  auto* show = app.add_subcommand("config", "print the effective configuration with defaults filled in");
  add_common(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : eio::exit_code(eio::ErrorCategory::usage);
  }

  try {
    json out;
    if (insp->parsed()) {
      out = inspect(ckpt_path);
    } else {
      std::vector<std::string> sets = common.set;
      if (!protocols.empty()) sets.push_back("eval.protocols=" + json(protocols).dump());
      if (!eps.empty()) sets.push_back("eval.eps=" + join_json(eps));
      const auto cfg = eio::exp::load_config(common.config, sets);
      opt.quiet = common.quiet;
      if (count > 0) opt.count = count;
      if (show->parsed()) {
        out = cfg.to_json();
        out["config_hash"] = cfg.hash();
      } else if (build->parsed()) {
        out = eio::exp::cmd_build(cfg, opt);
      } else if (train->parsed()) {
        out = eio::exp::cmd_train(cfg, opt);
      } else if (derive->parsed()) {
        out = eio::exp::cmd_derive(cfg, opt);
      } else if (finetune->parsed()) {
        out = eio::exp::cmd_finetune(cfg, opt);
      } else if (surrogates->parsed()) {
        out = eio::exp::cmd_surrogates(cfg, opt);
      } else if (evaluate->parsed()) {
        out = eio::exp::cmd_eval(cfg, opt);
      } else if (rep->parsed()) {
        out = eio::exp::cmd_report(cfg, opt);
      }
    }
    std::cout << out.dump(2) << std::endl;
    return 0;
  } catch (const eio::Error& e) {
    std::cerr << "error: category=" << eio::category_name(e.category()) << " " << e.what() << std::endl;
    return eio::exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: category=internal " << e.what() << std::endl;
    return 70;
  }
}
