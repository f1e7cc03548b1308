#include "scal/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "scal/episode_io.hpp"

namespace scal::harness {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(base ^ splitmix64(stream)) + index);
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> known, const std::string& where) {
  if (!obj.is_object()) throw Error(Errc::kConfigError, where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw Error(Errc::kConfigError, "unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void read_opt(const json& obj, const char* key, T& out) {
  if (obj.contains(key) && !obj.at(key).is_null()) out = obj.at(key).get<T>();
}

std::string path_string(const std::filesystem::path& p) { return p.generic_string(); }

bool uses(const ExperimentConfig& cfg, calib::Method m) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end();
}

struct FetchSpec {
  std::string id;
  std::vector<Demonstration> demos;
  Demonstration query;
  json meta = json::object();
};

std::vector<Episode> fetch_all(const std::vector<FetchSpec>& specs, backends::LogprobBackend& backend,
                               const ExperimentConfig& cfg, const LabelSpace& labels) {
  std::vector<std::optional<Episode>> out(specs.size());
  parallel_for(specs.size(), cfg.workers, [&](std::size_t i) {
    const auto& spec = specs[i];
    auto ep = backend.fetch_episode(cfg.prompt, spec.demos, spec.query.text, labels);
    ep.id = spec.id;
    ep.query.label = spec.query.label;
    for (const auto& [k, v] : spec.meta.items()) ep.meta[k] = v;
    out[i] = std::move(ep);
  });
  std::vector<Episode> episodes;
  episodes.reserve(out.size());
  for (auto& e : out) episodes.push_back(std::move(*e));
  return episodes;
}

std::map<std::string, std::vector<double>> read_embeddings(const std::filesystem::path& path) {
  std::map<std::string, std::vector<double>> out;
  std::size_t line = 0;
  for (const auto& rec : read_jsonl(path)) {
    ++line;
    try {
      out[rec.at("id").get<std::string>()] = rec.at("vector").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw ParseError(line, path.string() + ": " + e.what());
    }
  }
  return out;
}

const std::vector<double>& embedding_of(const std::map<std::string, std::vector<double>>& table, const std::string& id) {
  const auto it = table.find(id);
  if (it == table.end()) throw Error(Errc::kMissingEmbeddings, "no embedding for item '" + id + "'");
  return it->second;
}

LabelSpace oracle_labels(backends::LogprobBackend& backend, const std::optional<LabelSpace>& configured) {
  if (configured) return *configured;
  if (auto* oracle = dynamic_cast<backends::OracleBackend*>(&backend)) {
    return LabelSpace::generic(oracle->model().num_classes);
  }
  throw Error(Errc::kConfigError, "config needs \"labels\" for this backend");
}

std::vector<Demonstration> demos_of(std::span<const DatasetItem> items) {
  std::vector<Demonstration> out;
  for (const auto& it : items) out.push_back(it.demo);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

SelectStrategy parse_select_strategy(std::string_view name) {
  if (name == "random") return SelectStrategy::kRandom;
  if (name == "bm25") return SelectStrategy::kBm25;
  if (name == "topk") return SelectStrategy::kTopk;
  throw Error(Errc::kConfigError, "selection strategy must be random, bm25, or topk");
}

std::string_view select_strategy_name(SelectStrategy s) noexcept {
  switch (s) {
    case SelectStrategy::kRandom: return "random";
    case SelectStrategy::kBm25: return "bm25";
    case SelectStrategy::kTopk: return "topk";
  }
  return "?";
}

std::filesystem::path ExperimentConfig::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

bool ExperimentConfig::needs_training() const { return uses(*this, calib::Method::kSc) || uses(*this, calib::Method::kLinc); }

ExperimentConfig config_from_json(const json& doc, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  try {
    reject_unknown(doc, {"backend", "template", "labels", "verbalizer", "selection", "ordering", "methods", "calibrator",
                         "paths", "num_train", "num_test", "simulate", "correlate", "seed", "workers"},
                   "config");
    read_opt(doc, "seed", cfg.seed);
    cfg.select_seed = cfg.seed;
    cfg.calibrator.train.seed = cfg.seed;
    cfg.calibrator.support_seed = cfg.seed;
    cfg.simulate.seed = cfg.seed;
    cfg.correlate.seed = cfg.seed;

    if (doc.contains("backend")) cfg.backend = doc.at("backend");
    if (doc.contains("template")) {
      const auto& t = doc.at("template");
      reject_unknown(t, {"demo_format", "query_format", "delimiter"}, "template");
      read_opt(t, "demo_format", cfg.prompt.demo_format);
      read_opt(t, "query_format", cfg.prompt.query_format);
      read_opt(t, "delimiter", cfg.prompt.delimiter);
    }
    cfg.prompt.validate();
    if (doc.contains("labels")) {
      const auto labels = doc.at("labels").get<std::vector<std::string>>();
      const auto verbalizer = doc.contains("verbalizer") ? doc.at("verbalizer").get<std::vector<std::string>>() : labels;
      cfg.labels = LabelSpace::make(labels, verbalizer);
    }
    if (doc.contains("selection")) {
      const auto& s = doc.at("selection");
      reject_unknown(s, {"strategy", "k", "seed"}, "selection");
      if (s.contains("strategy")) cfg.select = parse_select_strategy(s.at("strategy").get<std::string>());
      read_opt(s, "k", cfg.k);
      read_opt(s, "seed", cfg.select_seed);
    }
    if (doc.contains("ordering")) cfg.ordering = selection::parse_ordering(doc.at("ordering").get<std::string>());
    if (doc.contains("methods")) {
      cfg.methods.clear();
      for (const auto& m : doc.at("methods")) cfg.methods.push_back(calib::parse_method(m.get<std::string>()));
      if (cfg.methods.empty()) throw Error(Errc::kConfigError, "methods must be nonempty");
    }
    if (doc.contains("calibrator")) {
      const auto& c = doc.at("calibrator");
      reject_unknown(c, {"epochs", "learning_rate", "hidden_dim", "batch_size", "seed", "ablation", "bc_space",
                         "support_per_class", "support_seed"},
                     "calibrator");
      cfg.calibrator.train = seqnet::train_config_from_json(c, cfg.calibrator.train);
      read_opt(c, "ablation", cfg.calibrator.ablation);
      if (c.contains("bc_space")) cfg.calibrator.bc_space = calib::parse_prior_space(c.at("bc_space").get<std::string>());
      read_opt(c, "support_per_class", cfg.calibrator.support_per_class);
      read_opt(c, "support_seed", cfg.calibrator.support_seed);
    }
    cfg.calibrator.train.validate();
    if (doc.contains("paths")) {
      const auto& p = doc.at("paths");
      reject_unknown(p, {"train", "test", "train_episodes", "test_episodes", "embeddings", "output_dir"}, "paths");
      auto path = [&](const char* key, std::filesystem::path& out) {
        if (p.contains(key) && !p.at(key).is_null()) out = p.at(key).get<std::string>();
      };
      path("train", cfg.paths.train);
      path("test", cfg.paths.test);
      path("train_episodes", cfg.paths.train_episodes);
      path("test_episodes", cfg.paths.test_episodes);
      path("embeddings", cfg.paths.embeddings);
      path("output_dir", cfg.paths.output_dir);
    }
    if (doc.contains("num_train") && !doc.at("num_train").is_null()) cfg.num_train = doc.at("num_train").get<std::size_t>();
    if (doc.contains("num_test") && !doc.at("num_test").is_null()) cfg.num_test = doc.at("num_test").get<std::size_t>();
    if (doc.contains("simulate")) {
      const auto& s = doc.at("simulate");
      reject_unknown(s, {"task", "num_train", "num_test", "k", "seed"}, "simulate");
      if (s.contains("task")) cfg.simulate.task = bayessim::task_config_from_json(s.at("task"));
      read_opt(s, "num_train", cfg.simulate.num_train);
      read_opt(s, "num_test", cfg.simulate.num_test);
      read_opt(s, "k", cfg.simulate.k);
      read_opt(s, "seed", cfg.simulate.seed);
    }
    if (doc.contains("correlate")) {
      const auto& c = doc.at("correlate");
      reject_unknown(c, {"context_size", "num_candidates", "pool_size", "probe_batch", "seed"}, "correlate");
      read_opt(c, "context_size", cfg.correlate.context_size);
      read_opt(c, "num_candidates", cfg.correlate.num_candidates);
      read_opt(c, "pool_size", cfg.correlate.pool_size);
      read_opt(c, "probe_batch", cfg.correlate.probe_batch);
      read_opt(c, "seed", cfg.correlate.seed);
    }
    read_opt(doc, "workers", cfg.workers);
    if (cfg.workers == 0) throw Error(Errc::kConfigError, "workers must be >= 1");
  } catch (const json::exception& e) {
    throw Error(Errc::kConfigError, e.what());
  }
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json methods = json::array();
  for (auto m : cfg.methods) methods.push_back(calib::method_name(m));
  auto calibrator = seqnet::train_config_to_json(cfg.calibrator.train);
  calibrator["ablation"] = cfg.calibrator.ablation;
  calibrator["bc_space"] = cfg.calibrator.bc_space == calib::PriorSpace::kLog ? "log" : "prob";
  calibrator["support_per_class"] = cfg.calibrator.support_per_class;
  calibrator["support_seed"] = cfg.calibrator.support_seed;
  json doc = {
      {"backend", cfg.backend},
      {"template",
       {{"demo_format", cfg.prompt.demo_format},
        {"query_format", cfg.prompt.query_format},
        {"delimiter", cfg.prompt.delimiter}}},
      {"selection", {{"strategy", select_strategy_name(cfg.select)}, {"k", cfg.k}, {"seed", cfg.select_seed}}},
      {"ordering", selection::ordering_name(cfg.ordering)},
      {"methods", methods},
      {"calibrator", calibrator},
      {"paths",
       {{"train", path_string(cfg.paths.train)},
        {"test", path_string(cfg.paths.test)},
        {"train_episodes", path_string(cfg.paths.train_episodes)},
        {"test_episodes", path_string(cfg.paths.test_episodes)},
        {"embeddings", path_string(cfg.paths.embeddings)},
        {"output_dir", path_string(cfg.paths.output_dir)}}},
      {"simulate",
       {{"task", bayessim::task_config_to_json(cfg.simulate.task)},
        {"num_train", cfg.simulate.num_train},
        {"num_test", cfg.simulate.num_test},
        {"k", cfg.simulate.k},
        {"seed", cfg.simulate.seed}}},
      {"correlate",
       {{"context_size", cfg.correlate.context_size},
        {"num_candidates", cfg.correlate.num_candidates},
        {"pool_size", cfg.correlate.pool_size},
        {"probe_batch", cfg.correlate.probe_batch},
        {"seed", cfg.correlate.seed}}},
      {"seed", cfg.seed},
      {"workers", cfg.workers},
  };
  if (cfg.labels) {
    doc["labels"] = cfg.labels->labels();
    doc["verbalizer"] = cfg.labels->verbalizer();
  }
  doc["num_train"] = cfg.num_train ? json(*cfg.num_train) : json(nullptr);
  doc["num_test"] = cfg.num_test ? json(*cfg.num_test) : json(nullptr);
  return doc;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(Errc::kConfigError, "override must look like key.path=value");
  const auto key = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(Errc::kConfigError, "empty segment in override key '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Workers and data

SimulatedData run_simulation(const ExperimentConfig& cfg) {
  const auto& sim = cfg.simulate;
  SimulatedData out{bayessim::generate_task(sim.task), {}, {}};
  const auto labels = cfg.labels ? *cfg.labels : LabelSpace::generic(out.model.num_classes);
  std::mt19937_64 rng(sim.seed);
  for (std::size_t i = 0; i < sim.num_train; ++i) {
    out.train.push_back(bayessim::sample_episode(out.model, sim.k, rng, "train-" + std::to_string(i), labels));
  }
  for (std::size_t i = 0; i < sim.num_test; ++i) {
    out.test.push_back(bayessim::sample_episode(out.model, sim.k, rng, "test-" + std::to_string(i), labels));
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t width = std::min(std::max<std::size_t>(workers, 1), n);
  if (width <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < width; ++w) {
    threads.emplace_back([&] {
      while (!failed.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

std::vector<DatasetItem> read_dataset(const std::filesystem::path& path, const LabelSpace& labels) {
  std::vector<DatasetItem> items;
  std::size_t line = 0;
  for (const auto& rec : read_jsonl(path)) {
    ++line;
    try {
      DatasetItem item;
      item.id = rec.contains("id") ? rec.at("id").get<std::string>() : path.stem().string() + "-" + std::to_string(line - 1);
      item.demo.text = rec.at("text").get<std::string>();
      const auto& label = rec.at("label");
      if (label.is_number_integer()) {
        item.demo.label = label.get<LabelIndex>();
      } else {
        const auto name = label.get<std::string>();
        const auto& names = labels.labels();
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ParseError(line, path.string() + ": unknown label '" + name + "'");
        item.demo.label = static_cast<LabelIndex>(it - names.begin());
      }
      if (*item.demo.label >= labels.size()) throw ParseError(line, path.string() + ": label index out of range");
      items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw ParseError(line, path.string() + ": " + e.what());
    }
  }
  return items;
}

EpisodeSets build_episodes(const ExperimentConfig& cfg, backends::LogprobBackend& backend,
                           backends::CallCounter& counter, bool with_train) {
  EpisodeSets sets;
  const bool episodes_mode = !cfg.paths.test_episodes.empty();

  if (episodes_mode) {
    auto test = read_episodes(cfg.resolve(cfg.paths.test_episodes));
    std::vector<Episode> train;
    if (with_train) {
      if (cfg.paths.train_episodes.empty()) throw Error(Errc::kConfigError, "SC/LinC need paths.train_episodes");
      train = read_episodes(cfg.resolve(cfg.paths.train_episodes));
    }
    if (cfg.num_test && test.size() > *cfg.num_test) test.resize(*cfg.num_test);
    if (cfg.num_train && train.size() > *cfg.num_train) train.resize(*cfg.num_train);
    if (test.empty()) throw Error(Errc::kConfigError, "no test episodes");
    sets.labels = test.front().labels;
    if (cfg.labels && !(*cfg.labels == sets.labels)) {
      throw Error(Errc::kLabelSpaceMismatch, "configured labels differ from the episode file");
    }

    // Re-serve through replay so every episode is charged like a live fetch.
    std::vector<Episode> all = test;
    all.insert(all.end(), train.begin(), train.end());
    backends::ReplayBackend replay(all);
    auto specs_of = [](const std::vector<Episode>& eps) {
      std::vector<FetchSpec> specs;
      for (const auto& e : eps) specs.push_back({e.id, e.demos, e.query, e.meta});
      return specs;
    };
    backends::CountingBackend train_fetch(replay, counter, "train");
    backends::CountingBackend test_fetch(replay, counter, "test");
    sets.train = fetch_all(specs_of(train), train_fetch, cfg, sets.labels);
    sets.test = fetch_all(specs_of(test), test_fetch, cfg, sets.labels);

    if (!cfg.paths.train.empty()) {
      sets.support_pool = demos_of(read_dataset(cfg.resolve(cfg.paths.train), sets.labels));
    } else {
      for (const auto& e : train) sets.support_pool.push_back(e.query);
    }
    return sets;
  }

  if (cfg.paths.test.empty()) throw Error(Errc::kConfigError, "config needs paths.test or paths.test_episodes");
  if (cfg.paths.train.empty()) throw Error(Errc::kConfigError, "dataset mode needs paths.train as the demonstration pool");
  sets.labels = oracle_labels(backend, cfg.labels);
  const auto train_items = read_dataset(cfg.resolve(cfg.paths.train), sets.labels);
  auto test_items = read_dataset(cfg.resolve(cfg.paths.test), sets.labels);
  if (cfg.num_test && test_items.size() > *cfg.num_test) test_items.resize(*cfg.num_test);
  const std::size_t m = with_train ? std::min(cfg.num_train.value_or(train_items.size()), train_items.size()) : 0;

  selection::Pool pool;
  pool.items = demos_of(train_items);
  std::map<std::string, std::vector<double>> embeddings;
  if (cfg.select == SelectStrategy::kTopk) {
    if (cfg.paths.embeddings.empty()) throw Error(Errc::kMissingEmbeddings, "top-k selection needs paths.embeddings");
    embeddings = read_embeddings(cfg.resolve(cfg.paths.embeddings));
    for (const auto& it : train_items) pool.embeddings.push_back(embedding_of(embeddings, it.id));
    pool.validate();
  }
  std::vector<std::string> docs;
  for (const auto& it : train_items) docs.push_back(it.demo.text);
  const selection::Bm25Index bm25(docs);

  auto make_specs = [&](std::span<const DatasetItem> queries, bool from_pool, std::uint64_t stream) {
    std::vector<FetchSpec> specs;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto exclude = from_pool ? std::optional<std::size_t>(i) : std::nullopt;
      std::vector<selection::ScoredPick> picks;
      switch (cfg.select) {
        case SelectStrategy::kRandom:
          picks = selection::select_random(pool, cfg.k, derive_seed(cfg.select_seed, stream, i), exclude);
          break;
        case SelectStrategy::kBm25:
          picks = selection::bm25_select(queries[i].demo.text, bm25, pool.items.size(), cfg.k, exclude);
          break;
        case SelectStrategy::kTopk:
          picks = selection::topk_select(embedding_of(embeddings, queries[i].id), pool, cfg.k, exclude);
          break;
      }
      if (cfg.select != SelectStrategy::kRandom) picks = selection::order(picks, cfg.ordering);
      FetchSpec spec{queries[i].id, {}, queries[i].demo, json::object()};
      json chosen = json::array();
      for (const auto& p : picks) {
        spec.demos.push_back(pool.items[p.index]);
        chosen.push_back(train_items[p.index].id);
      }
      spec.meta = {{"selection", select_strategy_name(cfg.select)},
                   {"ordering", cfg.select == SelectStrategy::kRandom ? "sampled" : selection::ordering_name(cfg.ordering)},
                   {"k", cfg.k},
                   {"seed", cfg.select_seed},
                   {"demo_ids", std::move(chosen)}};
      specs.push_back(std::move(spec));
    }
    return specs;
  };

  backends::CountingBackend train_fetch(backend, counter, "train");
  backends::CountingBackend test_fetch(backend, counter, "test");
  sets.train = fetch_all(make_specs(std::span(train_items).first(m), true, 1), train_fetch, cfg, sets.labels);
  sets.test = fetch_all(make_specs(test_items, false, 2), test_fetch, cfg, sets.labels);
  sets.support_pool = pool.items;
  return sets;
}

// ---------------------------------------------------------------------------
// Evaluation

const MethodResult& RunResult::result(calib::Method m) const {
  for (const auto& r : methods) {
    if (r.method == m) return r;
  }
  throw Error(Errc::kUnknownMethod, "method was not run: " + std::string(calib::method_name(m)));
}

RunResult evaluate_episodes(const ExperimentConfig& cfg, const EpisodeSets& sets, backends::LogprobBackend& aux,
                            backends::CallCounter& counter) {
  using calib::Method;
  const auto& test = sets.test;
  const auto& labels = sets.labels;
  if (test.empty()) throw Error(Errc::kConfigError, "no test episodes");
  for (const auto& e : test) {
    if (!e.query.label) throw Error(Errc::kConfigError, "test episode " + e.id + " has no query label");
  }

  RunResult result;
  result.num_train = sets.train.size();
  result.num_test = test.size();
  result.k = test.front().demos.size();
  result.examples.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    result.examples[i].id = test[i].id;
    result.examples[i].label = *test[i].query.label;
  }

  std::vector<Demonstration> support;
  if (uses(cfg, Method::kBcPlus) || uses(cfg, Method::kLincPlus)) {
    support = calib::select_support(sets.support_pool, labels.size(), cfg.calibrator.support_seed,
                                    cfg.calibrator.support_per_class);
  }
  result.support_size = support.size();

  std::vector<LabelDistribution> test_dists;
  for (const auto& e : test) test_dists.push_back(e.query_dist);

  for (const auto method : cfg.methods) {
    std::vector<std::optional<LabelDistribution>> out(test.size());
    switch (method) {
      case Method::kIcl:
        for (std::size_t i = 0; i < test.size(); ++i) out[i] = test[i].query_dist;
        break;
      case Method::kBc: {
        const auto prior = calib::bc_estimate(test_dists, cfg.calibrator.bc_space);
        for (std::size_t i = 0; i < test.size(); ++i) out[i] = calib::apply_prior(test[i].query_dist, prior);
        break;
      }
      case Method::kLinc: {
        if (sets.train.empty()) throw Error(Errc::kEmptyTrainingSet, "LinC needs training episodes");
        std::vector<LabelDistribution> dists;
        std::vector<LabelIndex> ys;
        for (const auto& e : sets.train) {
          if (!e.query.label) throw Error(Errc::kConfigError, "training episode " + e.id + " has no query label");
          dists.push_back(e.query_dist);
          ys.push_back(*e.query.label);
        }
        result.linc_model = calib::linc_train(dists, ys, cfg.calibrator.train);
        for (std::size_t i = 0; i < test.size(); ++i) out[i] = calib::linc_apply(*result.linc_model, test[i].query_dist);
        break;
      }
      case Method::kSc: {
        result.sc_model = calib::sc_train(sets.train, cfg.calibrator.train, cfg.calibrator.ablation);
        for (std::size_t i = 0; i < test.size(); ++i) {
          const auto a = calib::sc_adjust(*result.sc_model, surprise::build_sequence(test[i]));
          out[i] = calib::sc_calibrate(test[i].query_dist, a);
        }
        break;
      }
      case Method::kCcPlus: {
        backends::CountingBackend fetch(aux, counter, "cc+");
        parallel_for(test.size(), cfg.workers, [&](std::size_t i) {
          const auto prior = calib::cc_plus_estimate(fetch, cfg.prompt, test[i].demos, labels);
          out[i] = calib::apply_prior(test[i].query_dist, prior);
        });
        break;
      }
      case Method::kBcPlus: {
        backends::CountingBackend fetch(aux, counter, "bc+");
        parallel_for(test.size(), cfg.workers, [&](std::size_t i) {
          const auto prior = calib::bc_plus_estimate(fetch, cfg.prompt, test[i].demos, support, labels,
                                                     cfg.calibrator.bc_space);
          out[i] = calib::apply_prior(test[i].query_dist, prior);
        });
        break;
      }
      case Method::kLincPlus: {
        backends::CountingBackend fetch(aux, counter, "linc+");
        parallel_for(test.size(), cfg.workers, [&](std::size_t i) {
          const auto model = calib::linc_plus_model(fetch, cfg.prompt, test[i].demos, support, labels,
                                                    cfg.calibrator.train);
          out[i] = calib::linc_apply(model, test[i].query_dist);
        });
        break;
      }
    }

    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (argmax_label(*out[i]) == result.examples[i].label) ++correct;
      result.examples[i].calibrated.emplace(method, std::move(*out[i]));
    }
    MethodResult mr;
    mr.method = method;
    mr.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
    result.methods.push_back(mr);
  }

  const auto snap = counter.snapshot();
  auto tagged = [&](const std::string& tag) {
    const auto it = snap.logical_by_tag.find(tag);
    return it == snap.logical_by_tag.end() ? std::uint64_t{0} : it->second;
  };
  const std::uint64_t m = result.num_train, t = result.num_test, n = result.support_size;
  for (auto& mr : result.methods) {
    switch (mr.method) {
      case Method::kIcl:
      case Method::kBc: mr.inference_count = tagged("test"); break;
      case Method::kLinc:
      case Method::kSc: mr.inference_count = tagged("train") + tagged("test"); break;
      default: mr.inference_count = tagged(std::string(calib::method_name(mr.method))); break;
    }
    mr.expected_count = calib::count_inferences(mr.method, m, t, n);
  }
  result.physical_requests = snap.requests;
  return result;
}

RunResult run_evaluation(const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const auto backend = backends::make_backend(cfg.backend, cfg.base_dir);
  backends::CallCounter counter;
  const auto sets = build_episodes(cfg, *backend, counter, cfg.needs_training());
  auto result = evaluate_episodes(cfg, sets, *backend, counter);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string results_csv(const RunResult& result, const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "method,accuracy,inference_count,seed,K,selection,ordering\n";
  for (const auto& m : result.methods) {
    out << calib::method_name(m.method) << ',' << std::fixed << std::setprecision(6) << m.accuracy << ','
        << m.inference_count << ',' << cfg.seed << ',' << result.k << ',' << select_strategy_name(cfg.select) << ','
        << selection::ordering_name(cfg.ordering) << '\n';
  }
  return out.str();
}

json report_json(const RunResult& result, const ExperimentConfig& cfg) {
  json methods = json::array();
  for (const auto& m : result.methods) {
    methods.push_back({{"method", calib::method_name(m.method)},
                       {"accuracy", m.accuracy},
                       {"inference_count", m.inference_count},
                       {"expected_count", m.expected_count}});
  }
  json examples = json::array();
  for (const auto& ex : result.examples) {
    json preds = json::object(), dists = json::object();
    for (const auto& [method, dist] : ex.calibrated) {
      preds[std::string(calib::method_name(method))] = argmax_label(dist);
      dists[std::string(calib::method_name(method))] = dist.probs();
    }
    examples.push_back({{"id", ex.id}, {"label", ex.label}, {"predictions", preds}, {"calibrated", dists}});
  }
  return {{"config", config_to_json(cfg)},
          {"num_train", result.num_train},
          {"num_test", result.num_test},
          {"support_size", result.support_size},
          {"k", result.k},
          {"physical_requests", result.physical_requests},
          {"methods", methods},
          {"examples", examples}};
}

// ---------------------------------------------------------------------------
// Correlation study

namespace {

GroupStats group_stats(LabelIndex label, const std::vector<CorrelationPoint>& points, bool pooled) {
  GroupStats g;
  g.label = label;
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    if (!pooled && p.label != label) continue;
    xs.push_back(p.signed_surprise);
    ys.push_back(p.prior_after);
    g.mean_prior_before += p.prior_before;
    g.mean_prior_after += p.prior_after;
  }
  g.n = xs.size();
  if (g.n > 0) {
    g.mean_prior_before /= static_cast<double>(g.n);
    g.mean_prior_after /= static_cast<double>(g.n);
  }
  try {
    g.spearman = stats::spearman(xs, ys);
  } catch (const Error& e) {
    g.error = std::string(errc_name(e.code()));
  }
  return g;
}

json group_json(const GroupStats& g) {
  json out = {{"label", g.label},
              {"n", g.n},
              {"mean_prior_before", g.mean_prior_before},
              {"mean_prior_after", g.mean_prior_after}};
  if (g.spearman) {
    out["rho"] = g.spearman->rho;
    out["p_value"] = g.spearman->p_value;
  } else {
    out["rho"] = nullptr;
    out["p_value"] = nullptr;
    out["error"] = g.error;
  }
  return out;
}

}  // namespace

CorrelationReport correlate_surprise_prior(const ExperimentConfig& cfg, backends::LogprobBackend& backend,
                                           std::span<const Demonstration> context,
                                           std::span<const Demonstration> candidates,
                                           std::span<const Demonstration> probe) {
  const auto labels = oracle_labels(backend, cfg.labels);
  if (labels.size() != 2) throw Error(Errc::kInvalidArgument, "the insertion study is defined for two classes");
  if (candidates.empty()) throw Error(Errc::kInvalidArgument, "no insertion candidates");

  CorrelationReport report;
  report.context.assign(context.begin(), context.end());
  report.points.resize(candidates.size());

  if (auto* oracle = dynamic_cast<backends::OracleBackend*>(&backend)) {
    report.exact_priors = true;
    const auto records = bayessim::insertion_experiment(oracle->model(), oracle->observations(context),
                                                        oracle->observations(candidates));
    for (std::size_t i = 0; i < records.size(); ++i) {
      report.points[i] = {candidates[i].text, records[i].label, records[i].signed_surprise, records[i].prior_before,
                          records[i].prior_after};
    }
  } else {
    if (probe.empty()) throw Error(Errc::kEmptyBatch, "BC prior estimation needs a probe batch");
    auto positive_prior = [&](std::span<const Demonstration> ctx) {
      return calib::bc_estimate(calib::support_dists(backend, cfg.prompt, ctx, probe, labels)).mean_probs[1];
    };
    const double before = positive_prior(context);
    parallel_for(candidates.size(), cfg.workers, [&](std::size_t i) {
      const auto& cand = candidates[i];
      const LabelIndex y = cand.label.value();
      const double s = -std::log(backend.fetch_query(cfg.prompt, context, cand.text, labels)[y]);
      std::vector<Demonstration> extended(context.begin(), context.end());
      extended.push_back(cand);
      report.points[i] = {cand.text, y, y == 0 ? -s : s, before, positive_prior(extended)};
    });
  }

  for (LabelIndex y = 0; y < 2; ++y) report.groups.push_back(group_stats(y, report.points, false));
  report.pooled = group_stats(0, report.points, true);
  return report;
}

CorrelationReport run_correlation(const ExperimentConfig& cfg) {
  const auto backend = backends::make_backend(cfg.backend, cfg.base_dir);
  const auto& cc = cfg.correlate;
  std::mt19937_64 rng(cc.seed);

  std::vector<Demonstration> pool;
  if (!cfg.paths.train.empty()) {
    pool = demos_of(read_dataset(cfg.resolve(cfg.paths.train), oracle_labels(*backend, cfg.labels)));
  } else if (auto* oracle = dynamic_cast<backends::OracleBackend*>(backend.get())) {
    // Synthetic pool from the model's own generative process.
    const auto& m = oracle->model();
    for (std::size_t i = 0; i < cc.pool_size; ++i) {
      const auto ep = bayessim::sample_episode(m, 0, rng, "pool");
      pool.push_back({ep.query.text, ep.query.label});
    }
  } else {
    throw Error(Errc::kConfigError, "correlate needs paths.train for non-oracle backends");
  }

  const bool exact = dynamic_cast<backends::OracleBackend*>(backend.get()) != nullptr;
  const std::size_t probe_size = exact ? 0 : cc.probe_batch;
  const std::size_t needed = cc.context_size + cc.num_candidates + probe_size;
  if (pool.size() < needed) {
    throw Error(Errc::kPoolTooSmall, "correlate needs " + std::to_string(needed) + " pool items, have " +
                                         std::to_string(pool.size()));
  }
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  auto take = [&](std::size_t from, std::size_t count) {
    std::vector<Demonstration> out;
    for (std::size_t i = from; i < from + count; ++i) out.push_back(pool[idx[i]]);
    return out;
  };
  const auto context = take(0, cc.context_size);
  const auto candidates = take(cc.context_size, cc.num_candidates);
  const auto probe = take(cc.context_size + cc.num_candidates, probe_size);
  return correlate_surprise_prior(cfg, *backend, context, candidates, probe);
}

json correlation_json(const CorrelationReport& report) {
  json groups = json::array();
  for (const auto& g : report.groups) groups.push_back(group_json(g));
  json points = json::array();
  for (const auto& p : report.points) {
    points.push_back({{"text", p.text},
                      {"label", p.label},
                      {"signed_surprise", p.signed_surprise},
                      {"prior_before", p.prior_before},
                      {"prior_after", p.prior_after}});
  }
  json context = json::array();
  for (const auto& d : report.context) context.push_back({{"text", d.text}, {"label", d.label.value_or(0)}});
  auto pooled = group_json(report.pooled);
  pooled.erase("label");
  return {{"exact_priors", report.exact_priors},
          {"context", context},
          {"groups", groups},
          {"pooled", pooled},
          {"points", points}};
}

// ---------------------------------------------------------------------------
// Ratio comparison

RatioComparison ratio_compare(const std::vector<std::pair<std::string, LabelDistribution>>& sc,
                              const std::vector<std::pair<std::string, LabelDistribution>>& bc) {
  std::map<std::string, const LabelDistribution*> bc_by_id;
  for (const auto& [id, dist] : bc) {
    if (!bc_by_id.emplace(id, &dist).second) throw Error(Errc::kMismatchedIds, "duplicate id '" + id + "'");
  }
  if (bc_by_id.size() != sc.size()) throw Error(Errc::kMismatchedIds, "SC and BC cover different examples");
  RatioComparison out;
  std::vector<double> xs, ys;
  for (const auto& [id, dist] : sc) {
    const auto it = bc_by_id.find(id);
    if (it == bc_by_id.end()) throw Error(Errc::kMismatchedIds, "id '" + id + "' missing from BC results");
    if (dist.size() != 2 || it->second->size() != 2) throw Error(Errc::kInvalidArgument, "ratios need two classes");
    const auto ratio = [](const LabelDistribution& d) { return std::exp(std::log(d[1]) - std::log(d[0])); };
    out.points.push_back({id, ratio(*it->second), ratio(dist)});
    xs.push_back(out.points.back().bc_ratio);
    ys.push_back(out.points.back().sc_ratio);
  }
  out.fit = stats::linear_fit(xs, ys);
  return out;
}

json ratio_json(const RatioComparison& cmp) {
  json points = json::array();
  for (const auto& p : cmp.points) points.push_back({{"id", p.id}, {"bc_ratio", p.bc_ratio}, {"sc_ratio", p.sc_ratio}});
  return {{"slope", cmp.fit.slope}, {"intercept", cmp.fit.intercept}, {"r_squared", cmp.fit.r_squared}, {"points", points}};
}

}  // namespace scal::harness
