// lipshift: train, certify, attack, inspect and sweep LipShiFT classifiers.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or format error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lipshift/lipshift.hpp"

namespace fs = std::filesystem;
using namespace lipshift;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<real> eps;
  std::optional<std::size_t> epochs;
  bool paper_drop_scaling = false;
  std::string dataset;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key = value config file");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--eps", c.eps, "l2 radius in [0,1] pixel space (default 36/255)");
  cmd->add_option("--epochs", c.epochs, "training epochs");
  cmd->add_flag("--paper-drop-scaling", c.paper_drop_scaling, "multiply the bound by (1 - p_drop)");
  cmd->add_option("--dataset", c.dataset, "synthetic | cifar10:PATH | cifar100:PATH | raw:PATH[,TEST_PATH]");
  cmd->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
}

std::vector<std::pair<std::string, std::string>> read_settings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "config");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ": expected key = value, got '" + line + "'", "config");
    out.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_dataset_spec(RunConfig& cfg, const std::string& spec) {
  const auto colon = spec.find(':');
  apply_setting(cfg, "dataset.kind", spec.substr(0, colon));
  if (colon == std::string::npos) return;
  std::string paths = spec.substr(colon + 1);
  const auto comma = paths.find(',');
  apply_setting(cfg, "dataset.path", paths.substr(0, comma));
  if (comma != std::string::npos) apply_setting(cfg, "dataset.test_path", paths.substr(comma + 1));
}

/// Applies file settings and command-line overrides on top of `cfg`. With `keep_model`,
/// model.* keys from the file are ignored (the architecture comes from a checkpoint).
void apply_overrides(RunConfig& cfg, const Common& c, bool keep_model) {
  if (!c.config.empty()) {
    for (const auto& [k, v] : read_settings(c.config)) {
      if (keep_model && k.rfind("model.", 0) == 0) continue;
      apply_setting(cfg, k, v);
    }
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'", "set");
    if (keep_model && s.rfind("model.", 0) == 0) throw ConfigError("model keys come from the checkpoint", s.substr(0, eq));
    apply_setting(cfg, config_detail::trim(s.substr(0, eq)), s.substr(eq + 1));
  }
  if (!c.dataset.empty()) apply_dataset_spec(cfg, c.dataset);
  if (c.seed) apply_setting(cfg, "seed", std::to_string(*c.seed));
  if (!c.out.empty()) cfg.out = c.out;
  if (c.epochs) cfg.train.epochs = *c.epochs;
  if (c.eps) {
    cfg.train.eps = *c.eps;
    cfg.attack.eps = *c.eps;
  }
  if (c.paper_drop_scaling) cfg.train.paper_drop_scaling = true;
}

std::string fmt(real v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

fs::path default_checkpoint(const RunConfig& cfg, const std::string& given) {
  return given.empty() ? train_files::model(cfg.out) : fs::path(given);
}

// ---------------------------------------------------------------------------

struct TrainSummary {
  real clean = 0, vra = 0, backbone = 0, scaled = 0, loss = 0;
};

TrainSummary run_training(const RunConfig& cfg, bool resume, std::ostream* progress) {
  cfg.validate();
  auto splits = load_datasets(cfg);
  fs::create_directories(cfg.out);
  std::ofstream(fs::path(cfg.out) / "config.cfg") << serialize_config(cfg);
  auto model = build_model(cfg.model, cfg.seed);
  if (progress) *progress << kTrainLogHeader << "\n";
  const auto result = train(model, splits.train, cfg, {.out_dir = fs::path(cfg.out), .eval = &splits.test, .resume = resume, .progress = progress});
  TrainSummary s;
  const auto ev = evaluate(model, splits.test, {.eps = cfg.train.eps, .paper_drop_scaling = cfg.train.paper_drop_scaling});
  s.clean = ev.clean_accuracy();
  s.vra = ev.vra();
  s.backbone = ev.report.backbone_bound;
  s.scaled = ev.report.scaled_bound;
  s.loss = result.log.empty() ? 0 : result.log.back().loss;
  if (cfg.train.epochs == 0) std::ofstream(train_files::report(cfg.out)) << format_report(ev.report);
  return s;
}

int cmd_train(const Common& c, bool resume) {
  RunConfig cfg;
  apply_overrides(cfg, c, false);
  const auto s = run_training(cfg, resume, &std::cout);
  std::cout << "clean_acc " << fmt(s.clean) << "  vra " << fmt(s.vra) << "  backbone_bound " << fmt(s.backbone)
            << "  -> " << cfg.out << "\n";
  return 0;
}

LoadedCheckpoint load_for_eval(const Common& c, const std::string& checkpoint, RunConfig& cfg) {
  RunConfig probe;
  apply_overrides(probe, c, true);
  auto ck = load_checkpoint(default_checkpoint(probe, checkpoint));
  cfg = ck.config;
  apply_overrides(cfg, c, true);
  if (c.out.empty()) cfg.out = fs::path(default_checkpoint(probe, checkpoint)).parent_path().string();
  if (cfg.out.empty()) cfg.out = ".";
  cfg.validate();
  return ck;
}

int cmd_certify(const Common& c, const std::string& checkpoint, const std::string& split) {
  RunConfig cfg;
  auto ck = load_for_eval(c, checkpoint, cfg);
  auto splits = load_datasets(cfg);
  const Dataset& data = split == "train" ? splits.train : splits.test;
  const real eps = c.eps.value_or(kDefaultEps);
  const auto ev = evaluate(ck.model, data, {.eps = eps, .paper_drop_scaling = c.paper_drop_scaling});
  const fs::path csv = fs::path(cfg.out) / "certificates.csv";
  write_certificates_csv(csv, ev.certificates);
  std::cout << "samples        " << ev.size() << "\n"
            << "eps            " << fmt(eps) << "\n"
            << "clean_acc      " << fmt(ev.clean_accuracy()) << "\n"
            << "vra            " << fmt(ev.vra()) << "\n"
            << "backbone_bound " << fmt(ev.report.backbone_bound) << "\n"
            << "scaled_bound   " << fmt(ev.report.scaled_bound) << (c.paper_drop_scaling ? "  (used)" : "") << "\n"
            << "certificates   " << csv.string() << "\n";
  return 0;
}

int cmd_attack(const Common& c, const std::string& checkpoint, std::optional<int> steps, std::optional<int> restarts,
               const std::string& split) {
  RunConfig cfg;
  auto ck = load_for_eval(c, checkpoint, cfg);
  if (steps) cfg.attack.steps = *steps;
  if (restarts) cfg.attack.restarts = *restarts;
  cfg.attack.validate();
  auto splits = load_datasets(cfg);
  const Dataset& data = split == "train" ? splits.train : splits.test;
  const auto ev = evaluate(ck.model, data, {.eps = cfg.attack.eps, .paper_drop_scaling = c.paper_drop_scaling});
  const auto res = pgd_l2(ck.model, data, cfg.attack);
  std::size_t cert_hits = 0;
  for (std::size_t i = 0; i < res.size(); ++i) {
    const bool cert_correct = ev.certificates[i].verdict == Verdict::certified && ev.certificates[i].predicted == data.labels[i];
    cert_hits += cert_correct && res[i].attack_success;
  }
  const fs::path csv = fs::path(cfg.out) / "attack.csv";
  write_attack_csv(csv, res);
  const real emp = empirical_robust_accuracy(res);
  const bool ordered = ev.vra() <= emp && emp <= ev.clean_accuracy();
  std::cout << "samples                " << res.size() << "\n"
            << "eps                    " << fmt(cfg.attack.eps) << "\n"
            << "steps x restarts       " << cfg.attack.steps << " x " << cfg.attack.restarts << "\n"
            << "clean_acc              " << fmt(ev.clean_accuracy()) << "\n"
            << "empirical_robust_acc   " << fmt(emp) << "\n"
            << "vra                    " << fmt(ev.vra()) << "\n"
            << "certified_successes    " << cert_hits << "\n"
            << "vra<=empirical<=clean  " << (ordered ? "ok" : "VIOLATED") << "\n"
            << "report                 " << csv.string() << "\n";
  return cert_hits == 0 && ordered ? 0 : 1;
}

int cmd_inspect(const Common& c, const std::string& checkpoint) {
  RunConfig cfg;
  std::optional<LipShiFTModel> fresh;
  LipShiFTModel* model = nullptr;
  std::optional<LoadedCheckpoint> ck;
  RunConfig probe;
  apply_overrides(probe, c, false);
  if (checkpoint.empty() && !fs::exists(default_checkpoint(probe, ""))) {
    cfg = probe;
    cfg.model.validate();
    fresh.emplace(cfg.model, cfg.seed);
    model = &*fresh;
    std::cout << "fresh model (no checkpoint)\n";
  } else {
    ck.emplace(load_for_eval(c, checkpoint, cfg));
    model = &ck->model;
  }
  const auto rep = model->lipschitz_report();
  std::cout << "parameters " << model->parameter_count() << "\n\n";
  std::cout << "layer                          kind          bound        converged\n";
  for (const auto& e : rep.per_layer) {
    char line[160];
    std::snprintf(line, sizeof line, "%-30s %-13s %-12.6g %s\n", e.name.c_str(), e.kind.c_str(), e.bound, e.converged ? "yes" : "no");
    std::cout << line;
  }
  std::cout << "\nbackbone_bound " << fmt(rep.backbone_bound, 9) << "\n"
            << "p_drop         " << fmt(rep.p_drop) << "\n"
            << "scaled_bound   " << fmt(rep.scaled_bound, 9) << "  ((1 - p_drop) * backbone)\n\n";
  std::vector<const LayerReportEntry*> order;
  for (const auto& e : rep.per_layer) order.push_back(&e);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->bound > b->bound; });
  std::cout << "loosest layers:\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
    std::cout << "  " << i + 1 << ". " << order[i]->name << "  " << fmt(order[i]->bound) << "\n";
  }
  return 0;
}

std::string sweep_key(const std::string& param) {
  if (param == "p_drop") return "model.p_drop";
  if (param == "lr") return "train.lr";
  if (param == "batch_size") return "train.batch_size";
  if (param == "stage_depths") return "model.stage_depths";
  throw ConfigError("sweep: unknown parameter '" + param + "' (expected p_drop, lr, batch_size or stage_depths)", "param");
}

int cmd_sweep(const Common& c, const std::string& param, const std::vector<std::string>& values, bool parallel) {
  const std::string key = sweep_key(param);
  if (values.empty()) throw ConfigError("sweep: --values is empty", "values");
  RunConfig base;
  apply_overrides(base, c, false);
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig r = base;
    apply_setting(r, key, v);
    std::string dir = param + "=" + v;
    std::replace(dir.begin(), dir.end(), ',', '-');
    std::replace(dir.begin(), dir.end(), '/', '_');
    r.out = (fs::path(base.out) / dir).string();
    r.validate();
    runs.push_back(r);
  }
  std::vector<TrainSummary> out(runs.size());
  if (parallel) {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) {
      pool.emplace_back([&, i] {
        try {
          out[i] = run_training(runs[i], false, nullptr);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      std::cout << "== " << param << " = " << values[i] << "\n";
      out[i] = run_training(runs[i], false, nullptr);
    }
  }
  fs::create_directories(base.out);
  std::ofstream csv(fs::path(base.out) / "summary.csv");
  csv << "param,value,clean_acc,vra,backbone_bound,scaled_bound,final_loss,out\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    csv << param << ",\"" << values[i] << "\"," << fmt(out[i].clean, 9) << ',' << fmt(out[i].vra, 9) << ','
        << fmt(out[i].backbone, 9) << ',' << fmt(out[i].scaled, 9) << ',' << fmt(out[i].loss, 9) << ',' << runs[i].out << "\n";
    std::cout << param << "=" << values[i] << "  clean " << fmt(out[i].clean) << "  vra " << fmt(out[i].vra) << "\n";
  }
  std::cout << "summary -> " << (fs::path(base.out) / "summary.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LipShiFT: Lipschitz shift-transformer training and l2 certification"};
  app.require_subcommand(1);

  Common train_c, cert_c, attack_c, inspect_c, sweep_c;
  bool resume = false;
  std::string cert_ckpt, attack_ckpt, inspect_ckpt, cert_split = "test", attack_split = "test";
  std::optional<int> steps, restarts;
  std::string param;
  std::vector<std::string> values;
  bool parallel = false;

  auto* train = app.add_subcommand("train", "train a model with the margin loss");
  add_common(train, train_c);
  train->add_flag("--resume", resume, "continue from <out>/state.lsft");

  auto* certify = app.add_subcommand("certify", "certify a checkpoint on a dataset split");
  add_common(certify, cert_c);
  certify->add_option("--checkpoint", cert_ckpt, "checkpoint (default <out>/model.lsft)");
  certify->add_option("--split", cert_split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* attack = app.add_subcommand("attack", "l2 PGD against a checkpoint");
  add_common(attack, attack_c);
  attack->add_option("--checkpoint", attack_ckpt, "checkpoint (default <out>/model.lsft)");
  attack->add_option("--steps", steps, "PGD steps per restart");
  attack->add_option("--restarts", restarts, "PGD restarts");
  attack->add_option("--split", attack_split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* inspect = app.add_subcommand("inspect", "per-layer Lipschitz bounds");
  add_common(inspect, inspect_c);
  inspect->add_option("--checkpoint", inspect_ckpt, "checkpoint; without one, a fresh model from --config");

  auto* sweep = app.add_subcommand("sweep", "one training run per value of a hyperparameter");
  add_common(sweep, sweep_c);
  sweep->add_option("--param", param, "p_drop, lr, batch_size or stage_depths")->required();
  sweep->add_option("--values", values, "values to try")->required();
  sweep->add_flag("--parallel", parallel, "run the values concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(train_c, resume);
    if (*certify) return cmd_certify(cert_c, cert_ckpt, cert_split);
    if (*attack) return cmd_attack(attack_c, attack_ckpt, steps, restarts, attack_split);
    if (*inspect) return cmd_inspect(inspect_c, inspect_ckpt);
    if (*sweep) return cmd_sweep(sweep_c, param, values, parallel);
  } catch (const ConfigError& e) {
    std::cerr << "config error [" << e.field() << "]: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "shape mismatch: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
