#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "peftlab/analysis.hpp"
#include "peftlab/config.hpp"
#include "peftlab/grad_check.hpp"

namespace peftlab {
namespace {

std::string primary_metric(const ExperimentConfig& cfg) {
  return cfg.model.kind == ModelKind::EncoderClassifier ? "accuracy" : "exact_match";
}

void write_metrics_files(const std::vector<MetricsRecord>& metrics,
                         const std::filesystem::path& dir) {
  std::ofstream jsonl(dir / "metrics.jsonl");
  for (const MetricsRecord& r : metrics) jsonl << metrics_line(r) << "\n";
  std::ofstream table(dir / "metrics.txt");
  table << std::left << std::setw(8) << "step" << std::setw(8) << "task" << std::setw(8) << "split"
        << std::setw(16) << "name" << std::setw(14) << "value" << "wall_ms\n";
  table << std::fixed << std::setprecision(6);
  for (const MetricsRecord& r : metrics) {
    table << std::left << std::setw(8) << r.step << std::setw(8) << (r.task.empty() ? "all" : r.task)
          << std::setw(8) << r.split << std::setw(16) << r.name << std::setw(14) << r.value
          << r.wall_ms << "\n";
  }
}

void write_summary(const ExperimentConfig& cfg, const std::vector<MetricsRecord>& metrics,
                   const std::filesystem::path& dir) {
  nlohmann::json j;
  j["primary_metric"] = primary_metric(cfg);
  j["routing"] = routing_kind_name(cfg.peft.spec.routing);
  j["peft"] = peft_kind_name(cfg.peft.spec.kind);
  j["ablation"] = ablation_mode_name(cfg.task.ablation);
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricsRecord& r : metrics) {
    rows.push_back({{"step", r.step},
                    {"task", r.task},
                    {"split", r.split},
                    {"name", r.name},
                    {"value", r.value}});
  }
  j["metrics"] = rows;
  std::ofstream os(dir / "summary.json");
  os << j.dump(2) << "\n";
}

/// Full train-and-record pass; returns the final value of the primary metric.
double run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Dataset ds = cfg.build_dataset();
  Model model = cfg.build_model();
  write_manifest(cfg, model, dir);
  const TrainResult result = train(model, ds, cfg.train, dir);
  write_metrics_files(result.metrics, dir);
  write_summary(cfg, result.metrics, dir);
  return final_metric(result.metrics, "val", primary_metric(cfg));
}

int cmd_train(const ExperimentConfig& cfg) {
  const std::filesystem::path dir = cfg.resolved_out_dir();
  const double value = run_experiment(cfg, dir);
  std::cout << "run " << dir.string() << " final val " << primary_metric(cfg) << " = " << value
            << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint) {
  Dataset ds = cfg.build_dataset();
  Model model = cfg.build_model();
  if (!checkpoint.empty()) load_checkpoint_file(model, checkpoint);
  const auto metrics = evaluate(model, ds, ds.val_idx, 0, "val");
  for (const MetricsRecord& r : metrics) std::cout << metrics_line(r) << "\n";
  return 0;
}

int cmd_grad_check(std::uint64_t seed, double tolerance) {
  const auto cases = run_grad_check_suite(seed);
  double worst = 0.0;
  for (const GradCheckCase& c : cases) {
    std::cout << std::left << std::setw(52) << c.name << std::scientific << std::setprecision(3)
              << c.rel_err << (c.rel_err < tolerance ? "  ok" : "  FAIL") << "\n";
    std::cout.unsetf(std::ios::scientific);
    worst = std::max(worst, c.rel_err);
  }
  std::cout << cases.size() << " cases, max rel err " << std::scientific << std::setprecision(3)
            << worst << "\n";
  if (worst >= tolerance) {
    std::cerr << "gradient check failed: max relative error " << worst << " >= " << tolerance
              << "\n";
    return 1;
  }
  return 0;
}

int cmd_count_params(const ExperimentConfig& cfg) {
  Model model = cfg.build_model();
  const ParamBudget budget = count_params(model);
  std::cout << "trainable " << budget.trainable << "\nfrozen    " << budget.frozen << "\ntotal     "
            << budget.total() << "\n\nper unit:\n";
  for (const auto& [id, n] : budget.per_unit) {
    std::cout << "  " << std::left << std::setw(28) << id << n << "\n";
  }
  std::cout << "\n" << budget_table_text(budget_comparison(cfg.model.d, cfg.peft.spec.rank));
  assert_budget_orderings(cfg.model.d, cfg.peft.spec.rank);
  std::cout << "budget orderings hold\n";
  return 0;
}

int cmd_drift(const std::string& initial, const std::string& final_path) {
  const auto records = weight_drift(read_checkpoint(initial), read_checkpoint(final_path));
  std::cout << drift_table(records);
  return 0;
}

int cmd_time(const ExperimentConfig& cfg, std::size_t reps, std::size_t warmup,
             std::size_t samples, bool against_none) {
  Dataset ds = cfg.build_dataset();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(samples, ds.samples.size()); ++i) idx.push_back(i);
  Model routed = cfg.build_model();
  const TimingRecord a =
      time_inference(routed, ds, idx, reps, warmup, routing_kind_name(cfg.peft.spec.routing));
  std::cout << a.label << ": " << a.ms_per_sample << " ms/sample (median of " << a.reps
            << " reps, " << a.samples << " samples)\n";
  if (against_none) {
    ExperimentConfig base = cfg;
    base.peft.spec.routing = RoutingKind::None;
    Model plain = base.build_model();
    const TimingRecord b = time_inference(plain, ds, idx, reps, warmup, "none");
    std::cout << b.label << ": " << b.ms_per_sample << " ms/sample\n";
    std::cout << "overhead " << std::setprecision(4)
              << 100.0 * (a.ms_per_sample / b.ms_per_sample - 1.0) << "%\n";
  }
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
  const std::filesystem::path root = cfg.resolved_out_dir();
  struct Row {
    std::string label;
    double value;
  };
  std::vector<Row> rows;

  ExperimentConfig baseline = cfg;
  baseline.peft.spec.routing = RoutingKind::None;
  baseline.task.ablation = AblationMode::None;
  baseline.out_dir = (root / "baseline").string();
  rows.push_back({"none", run_experiment(baseline, root / "baseline")});

  ExperimentConfig routed = cfg;
  routed.task.ablation = AblationMode::None;
  routed.out_dir = (root / "cls").string();
  rows.push_back({routing_kind_name(cfg.peft.spec.routing) + " + visual", run_experiment(routed, root / "cls")});

  ExperimentConfig noise = cfg;
  noise.task.ablation = AblationMode::Noise;
  noise.out_dir = (root / "noise").string();
  rows.push_back({routing_kind_name(cfg.peft.spec.routing) + " + noise", run_experiment(noise, root / "noise")});

  ExperimentConfig ones = cfg;
  ones.task.ablation = AblationMode::Ones;
  ones.out_dir = (root / "ones").string();
  rows.push_back({routing_kind_name(cfg.peft.spec.routing) + " + ones", run_experiment(ones, root / "ones")});

  std::cout << "\n" << std::left << std::setw(24) << "x_R" << std::setw(12) << primary_metric(cfg)
            << "delta\n";
  std::cout << std::fixed << std::setprecision(4);
  for (const Row& r : rows) {
    std::cout << std::left << std::setw(24) << r.label << std::setw(12) << r.value
              << std::showpos << r.value - rows.front().value << std::noshowpos << "\n";
  }
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  const std::filesystem::path root = cfg.resolved_out_dir();
  const std::vector<RoutingKind> kinds{RoutingKind::None, RoutingKind::EltwiseMul,
                                       RoutingKind::EltwiseAdd, RoutingKind::ProjMul,
                                       RoutingKind::RescaleMul};
  std::map<std::pair<std::string, std::string>, double> grid;
  for (PeftKind pk : {PeftKind::Lora, PeftKind::Adapter}) {
    for (RoutingKind k : kinds) {
      ExperimentConfig run = cfg;
      run.peft.spec.kind = pk;
      run.peft.spec.routing = k;
      const std::string label = peft_kind_name(pk) + "_" + routing_kind_name(k);
      run.out_dir = (root / label).string();
      grid[{peft_kind_name(pk), routing_kind_name(k)}] = run_experiment(run, root / label);
      std::cout << label << " done\n";
    }
  }
  std::cout << "\n" << std::left << std::setw(12) << "routing" << std::setw(22) << "lora"
            << "adapter\n" << std::fixed << std::setprecision(4);
  for (RoutingKind k : kinds) {
    const std::string kn = routing_kind_name(k);
    std::cout << std::left << std::setw(12) << kn;
    for (const char* pk : {"lora", "adapter"}) {
      const double v = grid.at({pk, kn});
      const double base = grid.at({pk, "none"});
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << v;
      if (k != RoutingKind::None) {
        cell << " (" << std::showpos << v - base << std::noshowpos << ")";
      }
      std::cout << std::setw(22) << cell.str();
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs) {
  struct Run {
    std::string dir;
    std::string routing;
    nlohmann::json summary;
  };
  std::vector<Run> runs;
  for (const std::string& d : dirs) {
    std::ifstream ms(std::filesystem::path(d) / "manifest.json");
    std::ifstream ss(std::filesystem::path(d) / "summary.json");
    if (!ms || !ss) throw Error("run directory " + d + " is missing manifest.json or summary.json");
    const nlohmann::json manifest = nlohmann::json::parse(ms);
    Run r;
    r.dir = d;
    r.routing = manifest.at("config").at("peft").at("routing").get<std::string>();
    r.summary = nlohmann::json::parse(ss);
    runs.push_back(std::move(r));
  }
  const Run* baseline = nullptr;
  for (const Run& r : runs) {
    if (r.routing == "none") baseline = &r;
  }
  if (!baseline) throw Error("report needs a routing-none baseline run");

  auto final_value = [](const nlohmann::json& summary, const std::string& name) {
    double value = 0.0;
    std::size_t best_step = 0;
    bool found = false;
    for (const auto& row : summary.at("metrics")) {
      if (row.at("split") == "val" && row.at("name") == name && row.at("task") == "") {
        const std::size_t step = row.at("step").get<std::size_t>();
        if (!found || step >= best_step) {
          best_step = step;
          value = row.at("value").get<double>();
          found = true;
        }
      }
    }
    if (!found) throw Error("summary lacks a final val metric " + name);
    return value;
  };

  const std::string metric = baseline->summary.at("primary_metric").get<std::string>();
  const double base = final_value(baseline->summary, metric);
  std::cout << std::left << std::setw(12) << "routing" << std::setw(12) << metric
            << std::setw(12) << "delta" << "dir\n" << std::fixed << std::setprecision(4);
  for (const Run& r : runs) {
    const double v = final_value(r.summary, metric);
    std::cout << std::left << std::setw(12) << r.routing << std::setw(12) << v << std::showpos
              << std::setw(12) << v - base << std::noshowpos << r.dir << "\n";
  }
  return 0;
}

}  // namespace
}  // namespace peftlab

int main(int argc, char** argv) {
  using namespace peftlab;
  CLI::App app{"desk-scale lab for routed low-rank PEFT bottlenecks"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config_opts = [&](CLI::App* sub, bool required = true) {
    auto* opt = sub->add_option("-c,--config", config_path, "experiment config (json)");
    if (required) opt->required();
    sub->add_option("--set", overrides, "override config keys, e.g. --set peft.routing=proj");
  };

  auto* train_cmd = app.add_subcommand("train", "train one configuration and record artifacts");
  add_config_opts(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a configuration on its validation split");
  add_config_opts(eval_cmd);
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "load weights from this archive first");

  auto* grad_cmd = app.add_subcommand("grad-check", "run the finite-difference gradient suite");
  std::uint64_t grad_seed = 12345;
  double tolerance = 1e-6;
  grad_cmd->add_option("--seed", grad_seed, "suite seed");
  grad_cmd->add_option("--tolerance", tolerance, "max relative error allowed");

  auto* count_cmd = app.add_subcommand("count-params", "trainable budget and comparator table");
  add_config_opts(count_cmd);

  auto* drift_cmd = app.add_subcommand("drift", "weight drift between two checkpoints");
  std::string initial_path, final_path;
  drift_cmd->add_option("--initial", initial_path, "checkpoint before training")->required();
  drift_cmd->add_option("--final", final_path, "checkpoint after training")->required();

  auto* time_cmd = app.add_subcommand("time", "median inference time per sample");
  add_config_opts(time_cmd);
  std::size_t reps = 7, warmup = 2, samples = 64;
  bool against_none = false;
  time_cmd->add_option("--reps", reps, "timed repetitions (>= 3)");
  time_cmd->add_option("--warmup", warmup, "unrecorded repetitions");
  time_cmd->add_option("--samples", samples, "batch size per repetition");
  time_cmd->add_flag("--against-none", against_none, "also time the routing-none twin");

  auto* ablate_cmd = app.add_subcommand("ablate", "rerun with the routing feature replaced");
  add_config_opts(ablate_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "routing kinds x {lora, adapter} grid");
  add_config_opts(sweep_cmd);

  auto* report_cmd = app.add_subcommand("report", "deltas of runs against a routing-none baseline");
  std::vector<std::string> run_dirs;
  report_cmd->add_option("runs", run_dirs, "run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (grad_cmd->parsed()) return cmd_grad_check(grad_seed, tolerance);
    if (drift_cmd->parsed()) return cmd_drift(initial_path, final_path);
    if (report_cmd->parsed()) return cmd_report(run_dirs);

    const ExperimentConfig cfg = load_experiment_config(config_path, overrides);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint);
    if (count_cmd->parsed()) return cmd_count_params(cfg);
    if (time_cmd->parsed()) return cmd_time(cfg, reps, warmup, samples, against_none);
    if (ablate_cmd->parsed()) return cmd_ablate(cfg);
    if (sweep_cmd->parsed()) return cmd_sweep(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
