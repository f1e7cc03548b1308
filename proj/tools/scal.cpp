#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scal/episode_io.hpp"
#include "scal/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scal;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::optional<std::string> select;
  std::optional<std::string> order;
  std::vector<std::string> methods;
  std::optional<std::string> output;
  std::optional<std::size_t> workers;
  std::vector<std::string> sets;
  std::string report;  // ratio-compare input
};

harness::ExperimentConfig load_config(const Options& opt) {
  const fs::path path(opt.config);
  json doc = read_json_file(path);
  if (opt.seed) doc["seed"] = *opt.seed;
  if (opt.k) doc["selection"]["k"] = *opt.k;
  if (opt.select) doc["selection"]["strategy"] = *opt.select;
  if (opt.order) doc["ordering"] = *opt.order;
  if (!opt.methods.empty()) doc["methods"] = opt.methods;
  if (opt.workers) doc["workers"] = *opt.workers;
  for (const auto& s : opt.sets) harness::apply_override(doc, s);
  if (opt.output) doc["paths"]["output_dir"] = fs::absolute(*opt.output).string();
  return harness::config_from_json(doc, path.parent_path());
}

fs::path output_dir(const harness::ExperimentConfig& cfg) {
  const auto dir = cfg.resolve(cfg.paths.output_dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

int cmd_simulate(const harness::ExperimentConfig& cfg) {
  const auto data = harness::run_simulation(cfg);
  const auto dir = output_dir(cfg);
  write_json(dir / "model.json", bayessim::model_to_json(data.model));
  write_episodes(dir / "train_episodes.jsonl", data.train);
  write_episodes(dir / "test_episodes.jsonl", data.test);
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test episodes to "
            << dir.string() << "\n";
  return 0;
}

int cmd_extract(const harness::ExperimentConfig& cfg) {
  const auto backend = backends::make_backend(cfg.backend, cfg.base_dir);
  backends::RecordingBackend recorder(*backend);
  backends::CallCounter counter;
  const auto sets = harness::build_episodes(cfg, recorder, counter, cfg.needs_training());

  // Prefetch the per-query auxiliary calls so replay can serve CC+/BC+/LinC+.
  const auto uses = [&](calib::Method m) {
    return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
  };
  std::vector<Demonstration> support;
  if (uses(calib::Method::kBcPlus) || uses(calib::Method::kLincPlus)) {
    support = calib::select_support(sets.support_pool, sets.labels.size(), cfg.calibrator.support_seed,
                                    cfg.calibrator.support_per_class);
  }
  harness::parallel_for(sets.test.size(), cfg.workers, [&](std::size_t i) {
    const auto& ep = sets.test[i];
    if (uses(calib::Method::kCcPlus)) calib::cc_plus_estimate(recorder, cfg.prompt, ep.demos, sets.labels);
    if (!support.empty()) calib::support_dists(recorder, cfg.prompt, ep.demos, support, sets.labels);
  });

  const auto dir = output_dir(cfg);
  write_episodes(dir / "train_episodes.jsonl", sets.train);
  write_episodes(dir / "test_episodes.jsonl", sets.test);
  write_episodes(dir / "cache.jsonl", recorder.recorded());
  std::cout << "extracted " << sets.train.size() << " train and " << sets.test.size() << " test episodes\n";
  return 0;
}

int cmd_train_sc(const harness::ExperimentConfig& cfg) {
  const auto backend = backends::make_backend(cfg.backend, cfg.base_dir);
  backends::CallCounter counter;
  const auto sets = harness::build_episodes(cfg, *backend, counter, true);
  const auto model = calib::sc_train(sets.train, cfg.calibrator.train, cfg.calibrator.ablation);
  const auto dir = output_dir(cfg);
  write_json(dir / "model.json", calib::sc_to_json(model));
  std::string records;
  for (const auto& ep : sets.train) records += surprise::training_record(ep).dump() + "\n";
  write_text_file(dir / "training_set.jsonl", records);
  std::cout << "trained SC on " << sets.train.size() << " episodes\n";
  return 0;
}

int cmd_evaluate(const harness::ExperimentConfig& cfg) {
  const auto result = harness::run_evaluation(cfg);
  const auto dir = output_dir(cfg);
  write_text_file(dir / "results.csv", harness::results_csv(result, cfg));
  write_json(dir / "report.json", harness::report_json(result, cfg));
  json models = json::object();
  if (result.sc_model) models["sc"] = calib::sc_to_json(*result.sc_model);
  if (result.linc_model) models["linc"] = calib::linc_to_json(*result.linc_model);
  write_json(dir / "model.json", models);
  std::cout << harness::results_csv(result, cfg);
  std::cerr << "wall time " << result.wall_seconds << " s\n";
  return 0;
}

int cmd_correlate(const harness::ExperimentConfig& cfg) {
  const auto report = harness::run_correlation(cfg);
  const auto doc = harness::correlation_json(report);
  write_json(output_dir(cfg) / "correlation.json", doc);
  for (const auto& g : doc.at("groups")) std::cout << g.dump() << "\n";
  return 0;
}

int cmd_ratio_compare(const harness::ExperimentConfig& cfg, const std::string& report_path) {
  const auto dir = output_dir(cfg);
  const auto report = read_json_file(report_path.empty() ? dir / "report.json" : fs::path(report_path));
  std::vector<std::pair<std::string, LabelDistribution>> sc, bc;
  for (const auto& ex : report.at("examples")) {
    const auto& cal = ex.at("calibrated");
    if (!cal.contains("sc") || !cal.contains("bc")) {
      throw Error(Errc::kConfigError, "report.json must contain sc and bc results");
    }
    const auto id = ex.at("id").get<std::string>();
    sc.emplace_back(id, LabelDistribution::from_probs(cal.at("sc").get<std::vector<double>>()));
    bc.emplace_back(id, LabelDistribution::from_probs(cal.at("bc").get<std::vector<double>>()));
  }
  const auto cmp = harness::ratio_compare(sc, bc);
  write_json(dir / "ratio.json", harness::ratio_json(cmp));
  std::cout << "slope " << cmp.fit.slope << " intercept " << cmp.fit.intercept << " r2 " << cmp.fit.r_squared << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surprise calibration experiments"};
  app.require_subcommand(1);
  Options opt;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "Write a synthetic task model and oracle episodes"},
      {"extract", "Fetch episodes (and auxiliary calls) into Episode JSONL caches"},
      {"train-sc", "Train the surprise calibrator on training episodes"},
      {"evaluate", "Run every configured method and write results.csv/report.json"},
      {"correlate", "Surprise vs. prior insertion study"},
      {"ratio-compare", "Fit SC ratios against BC ratios from report.json"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", opt.config, "Experiment config JSON");
    sub->add_option("--seed", opt.seed, "Global seed");
    sub->add_option("--k", opt.k, "Demonstrations per prompt");
    sub->add_option("--select", opt.select, "random | bm25 | topk");
    sub->add_option("--order", opt.order, "increase | decrease | ucurve | ucurve-mirrored");
    sub->add_option("--methods", opt.methods, "Methods to run")->delimiter(',');
    sub->add_option("--output", opt.output, "Output directory");
    sub->add_option("--workers", opt.workers, "Concurrent fetches");
    sub->add_option("--set", opt.sets, "Config override key.path=value");
    if (name == "ratio-compare") sub->add_option("--report", opt.report, "report.json (default: output dir)");
    subs.push_back(sub);
  }

  std::string count_method;
  std::uint64_t m = 0, t = 0, n = 0;
  auto* count = app.add_subcommand("count", "Logical inference count for a method");
  count->add_option("--method", count_method, "icl | bc | linc | cc+ | bc+ | linc+ | sc")->required();
  count->add_option("--M", m, "Training queries");
  count->add_option("--T", t, "Test queries");
  count->add_option("--n", n, "Support samples per query");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (count->parsed()) {
      std::cout << calib::count_inferences(calib::parse_method(count_method), m, t, n) << "\n";
      return 0;
    }
    CLI::App* active = nullptr;
    for (auto* sub : subs) {
      if (sub->parsed()) active = sub;
    }
    if (opt.config.empty()) {
      std::cerr << "--config is required\n\n" << active->help();
      return 1;
    }
    const auto cfg = load_config(opt);
    const auto name = active->get_name();
    if (name == "simulate") return cmd_simulate(cfg);
    if (name == "extract") return cmd_extract(cfg);
    if (name == "train-sc") return cmd_train_sc(cfg);
    if (name == "evaluate") return cmd_evaluate(cfg);
    if (name == "correlate") return cmd_correlate(cfg);
    return cmd_ratio_compare(cfg, opt.report);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.is_backend_failure() ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
