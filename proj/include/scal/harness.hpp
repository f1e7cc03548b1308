#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/backends.hpp"
#include "scal/bayessim.hpp"
#include "scal/calibrators.hpp"
#include "scal/selection.hpp"
#include "scal/seqnet.hpp"
#include "scal/stats.hpp"

namespace scal::harness {

enum class SelectStrategy { kRandom, kBm25, kTopk };

SelectStrategy parse_select_strategy(std::string_view name);
std::string_view select_strategy_name(SelectStrategy s) noexcept;

struct CalibratorConfig {
  seqnet::TrainConfig train;
  bool ablation = false;  // SC on sign-only surprise
  calib::PriorSpace bc_space = calib::PriorSpace::kLog;
  std::size_t support_per_class = calib::kSupportPerClass;
  std::uint64_t support_seed = 0;
};

struct Paths {
  std::filesystem::path train;           // dataset JSONL {"text","label"}
  std::filesystem::path test;
  std::filesystem::path train_episodes;  // Episode JSONL
  std::filesystem::path test_episodes;
  std::filesystem::path embeddings;      // {"id","vector"} JSONL keyed by dataset ids
  std::filesystem::path output_dir = "out";
};

struct SimulateConfig {
  bayessim::SyntheticTaskConfig task;
  std::size_t num_train = 200;
  std::size_t num_test = 500;
  std::size_t k = 3;
  std::uint64_t seed = 0;
};

struct CorrelateConfig {
  std::size_t context_size = 3;
  std::size_t num_candidates = 200;
  std::size_t pool_size = 1000;  // synthetic pool drawn from an oracle model when no dataset is given
  std::size_t probe_batch = 32;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  nlohmann::json backend = nlohmann::json::object();
  PromptTemplate prompt;
  std::optional<LabelSpace> labels;  // default: generic names sized from the data
  SelectStrategy select = SelectStrategy::kRandom;
  std::size_t k = 4;
  std::uint64_t select_seed = 0;
  selection::Ordering ordering = selection::Ordering::kIncrease;
  std::vector<calib::Method> methods = {calib::Method::kIcl};
  CalibratorConfig calibrator;
  Paths paths;
  std::optional<std::size_t> num_train;  // cap on M in dataset mode
  std::optional<std::size_t> num_test;   // cap on T in dataset mode
  SimulateConfig simulate;
  CorrelateConfig correlate;
  std::uint64_t seed = 0;
  std::size_t workers = 4;
  std::filesystem::path base_dir;  // relative paths resolve here

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  bool needs_training() const;
};

/// Parses the documented config schema; unknown keys are rejected. Throws ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// Applies "a.b.c=value" overrides (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& doc, const std::string& assignment);

// ---------------------------------------------------------------------------

struct SimulatedData {
  bayessim::ConceptModel model;
  std::vector<Episode> train;  // ids train-0, train-1, ...
  std::vector<Episode> test;   // ids test-0, ...
};

/// Generates cfg.simulate.task and samples oracle episodes from it.
SimulatedData run_simulation(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------

/// Runs fn(0..n-1) on up to `workers` threads. Results must be written by
/// index; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

struct DatasetItem {
  std::string id;
  Demonstration demo;
};

/// Reads {"id"?, "text", "label"} JSONL; labels may be indices or label strings.
std::vector<DatasetItem> read_dataset(const std::filesystem::path& path, const LabelSpace& labels);

/// Labeled episodes built by selection + ordering + fetch (dataset mode) or read
/// from Episode JSONL (episodes mode).
struct EpisodeSets {
  std::vector<Episode> train;
  std::vector<Episode> test;
  std::vector<Demonstration> support_pool;  // labeled items BC+/LinC+ draw from
  LabelSpace labels = LabelSpace::generic(2);
};

/// Every main fetch is charged to `counter` under the tag "train" or "test".
/// Episodes mode re-serves the files through a replay backend so the charge is
/// identical to dataset mode.
EpisodeSets build_episodes(const ExperimentConfig& cfg, backends::LogprobBackend& backend,
                           backends::CallCounter& counter, bool with_train);

// ---------------------------------------------------------------------------

struct MethodResult {
  calib::Method method = calib::Method::kIcl;
  double accuracy = 0.0;
  std::uint64_t inference_count = 0;  // measured logical inferences
  std::uint64_t expected_count = 0;   // count_inferences(method, M, T, n)
};

struct ExampleRecord {
  std::string id;
  LabelIndex label = 0;
  std::map<calib::Method, LabelDistribution> calibrated;
};

struct RunResult {
  std::vector<MethodResult> methods;
  std::vector<ExampleRecord> examples;
  std::size_t num_train = 0;
  std::size_t num_test = 0;
  std::size_t support_size = 0;
  std::size_t k = 0;  // demonstrations per test prompt
  std::uint64_t physical_requests = 0;
  std::optional<calib::SCModel> sc_model;
  std::optional<calib::LinCModel> linc_model;
  double wall_seconds = 0.0;

  const MethodResult& result(calib::Method m) const;
};

/// Applies every configured method to labeled episodes. Per-query auxiliary
/// fetches (CC+, BC+, LinC+) go through `aux` and are charged to `counter`
/// under the method name; shared train/test fetches must already be there.
RunResult evaluate_episodes(const ExperimentConfig& cfg, const EpisodeSets& sets, backends::LogprobBackend& aux,
                            backends::CallCounter& counter);

/// Full pipeline: build backend, episodes, and run every method.
RunResult run_evaluation(const ExperimentConfig& cfg);

/// CSV with columns method,accuracy,inference_count,seed,K,selection,ordering.
std::string results_csv(const RunResult& result, const ExperimentConfig& cfg);
nlohmann::json report_json(const RunResult& result, const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------

struct GroupStats {
  LabelIndex label = 0;
  std::size_t n = 0;
  std::optional<stats::SpearmanResult> spearman;
  std::string error;  // set when the correlation is undefined
  double mean_prior_before = 0.0;
  double mean_prior_after = 0.0;
};

struct CorrelationPoint {
  std::string text;
  LabelIndex label = 0;
  double signed_surprise = 0.0;
  double prior_before = 0.0;
  double prior_after = 0.0;
};

struct CorrelationReport {
  std::vector<GroupStats> groups;  // label 0, label 1
  GroupStats pooled;
  std::vector<CorrelationPoint> points;
  std::vector<Demonstration> context;
  bool exact_priors = false;
};

/// Insertion study: signed surprise of each candidate under the fixed context
/// against the positive-class prior after inserting it. Exact priors for the
/// oracle backend, BC over a probe batch otherwise.
CorrelationReport correlate_surprise_prior(const ExperimentConfig& cfg, backends::LogprobBackend& backend,
                                           std::span<const Demonstration> context,
                                           std::span<const Demonstration> candidates,
                                           std::span<const Demonstration> probe);

/// Draws context, candidates, and probe from the configured pool and runs the study.
CorrelationReport run_correlation(const ExperimentConfig& cfg);

nlohmann::json correlation_json(const CorrelationReport& report);

// ---------------------------------------------------------------------------

struct RatioPoint {
  std::string id;
  double bc_ratio = 0.0;
  double sc_ratio = 0.0;
};

struct RatioComparison {
  stats::LinearFit fit;
  std::vector<RatioPoint> points;
};

/// p(y=1)/p(y=0) per example for both methods, fitted as sc = slope * bc + intercept.
/// Throws MismatchedIds when the id lists differ, InvalidArgument when C != 2.
RatioComparison ratio_compare(const std::vector<std::pair<std::string, LabelDistribution>>& sc,
                              const std::vector<std::pair<std::string, LabelDistribution>>& bc);

nlohmann::json ratio_json(const RatioComparison& cmp);

}  // namespace scal::harness
