#include "scal/calibrators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace scal::calib {

using nlohmann::json;

namespace {

struct MethodName {
  Method method;
  std::string_view name;
};

constexpr MethodName kMethods[] = {
    {Method::kIcl, "icl"},     {Method::kBc, "bc"},        {Method::kLinc, "linc"}, {Method::kCcPlus, "cc+"},
    {Method::kBcPlus, "bc+"}, {Method::kLincPlus, "linc+"}, {Method::kSc, "sc"},
};

std::vector<double> centered(std::vector<double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (double& x : v) x -= mean;
  return v;
}

}  // namespace

Method parse_method(std::string_view name) {
  for (const auto& m : kMethods) {
    if (m.name == name) return m.method;
  }
  throw Error(Errc::kUnknownMethod, "unknown method '" + std::string(name) + "' (expected icl, bc, linc, cc+, bc+, linc+, sc)");
}

std::string_view method_name(Method method) noexcept {
  for (const auto& m : kMethods) {
    if (m.method == method) return m.name;
  }
  return "?";
}

std::uint64_t count_inferences(Method method, std::uint64_t m, std::uint64_t t, std::uint64_t n) {
  switch (method) {
    case Method::kIcl:
    case Method::kBc: return t;
    case Method::kLinc:
    case Method::kSc: return m + t;
    case Method::kCcPlus: return 3 * t;
    case Method::kBcPlus:
    case Method::kLincPlus: return n * t;
  }
  throw Error(Errc::kUnknownMethod, "unhandled method");
}

// ---------------------------------------------------------------------------
// SC

std::vector<double> sc_adjust(const SCModel& model, const surprise::SurpriseSequence& seq) {
  if (seq.length() == 0) throw Error(Errc::kEmptyContext, "SC needs at least one demonstration");
  if (seq.num_classes() != model.num_classes()) throw Error(Errc::kShapeMismatch, "surprise width != model C");
  const auto& input = model.binarized ? surprise::binarize_magnitude(seq) : seq;
  seqnet::Sequence xs;
  for (const auto& v : input.vectors) xs.push_back(v.values);
  const auto hidden = seqnet::gru_forward(model.net.gru, xs);
  return seqnet::decode_adjustment(model.net.decoder, hidden.back());
}

LabelDistribution sc_calibrate(const LabelDistribution& orig, std::span<const double> adjustment) {
  if (adjustment.size() != orig.size()) throw Error(Errc::kShapeMismatch, "adjustment width != C");
  auto logits = orig.log_probs();
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += adjustment[c];
  return softmax_distribution(logits);
}

seqnet::Example sc_example(const Episode& episode, bool binarized) {
  if (!episode.query.label) throw Error(Errc::kInvalidArgument, "episode " + episode.id + " has no query label");
  auto seq = surprise::build_sequence(episode);
  if (binarized) seq = surprise::binarize_magnitude(seq);
  seqnet::Example ex;
  for (const auto& v : seq.vectors) ex.seq.push_back(v.values);
  ex.base_logits = episode.query_dist.log_probs();
  ex.target = *episode.query.label;
  return ex;
}

SCModel sc_train(std::span<const Episode> train, const seqnet::TrainConfig& cfg, bool binarized) {
  cfg.validate();
  if (train.empty()) throw Error(Errc::kEmptyTrainingSet, "SC needs labeled training episodes");
  const auto& labels = train.front().labels;
  std::vector<seqnet::Example> examples;
  examples.reserve(train.size());
  for (const auto& ep : train) {
    if (!(ep.labels == labels)) throw Error(Errc::kLabelSpaceMismatch, "episode " + ep.id + " uses another label space");
    examples.push_back(sc_example(ep, binarized));
  }
  SCModel model{seqnet::init_params(cfg.seed, labels.size(), cfg.hidden_dim), cfg, binarized};
  seqnet::train(model.net, examples, cfg);
  return model;
}

json sc_to_json(const SCModel& model) {
  return {{"format", "scal-sc-v1"},
          {"binarized", model.binarized},
          {"config", seqnet::train_config_to_json(model.config)},
          {"net", seqnet::model_to_json(model.net)}};
}

SCModel sc_from_json(const json& doc) {
  try {
    SCModel model;
    model.binarized = doc.at("binarized").get<bool>();
    model.config = seqnet::train_config_from_json(doc.at("config"));
    model.net = seqnet::model_from_json(doc.at("net"));
    return model;
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, std::string("SC checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Priors

PriorSpace parse_prior_space(std::string_view name) {
  if (name == "log") return PriorSpace::kLog;
  if (name == "prob") return PriorSpace::kProb;
  throw Error(Errc::kConfigError, "bc_space must be log or prob");
}

PriorEstimate bc_estimate(std::span<const LabelDistribution> batch, PriorSpace space) {
  if (batch.empty()) throw Error(Errc::kEmptyBatch, "prior estimate over an empty batch");
  const std::size_t c = batch.front().size();
  std::vector<double> mean(c, 0.0);
  for (const auto& d : batch) {
    if (d.size() != c) throw Error(Errc::kShapeMismatch, "batch distributions differ in width");
    for (std::size_t i = 0; i < c; ++i) mean[i] += d[i];
  }
  for (double& m : mean) m /= static_cast<double>(batch.size());
  PriorEstimate est;
  est.mean_probs = mean;
  est.log_prior.resize(c);
  std::transform(mean.begin(), mean.end(), est.log_prior.begin(), [](double p) { return std::log(p); });
  est.log_prior = centered(std::move(est.log_prior));
  est.source = "bc";
  est.sample_count = batch.size();
  est.space = space;
  return est;
}

LabelDistribution apply_prior(const LabelDistribution& dist, const PriorEstimate& prior) {
  std::vector<double> logits;
  if (prior.space == PriorSpace::kLog) {
    if (prior.log_prior.size() != dist.size()) throw Error(Errc::kShapeMismatch, "prior width != C");
    logits = dist.log_probs();
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] -= prior.log_prior[c];
  } else {
    if (prior.mean_probs.size() != dist.size()) throw Error(Errc::kShapeMismatch, "prior width != C");
    logits = dist.probs();
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] -= prior.mean_probs[c];
  }
  return softmax_distribution(logits);
}

PriorEstimate cc_plus_estimate(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                               std::span<const Demonstration> context, const LabelSpace& labels) {
  std::vector<double> mean_log(labels.size(), 0.0);
  std::vector<double> mean_prob(labels.size(), 0.0);
  const auto& inputs = backends::content_free_inputs();
  for (const auto& text : inputs) {
    const auto dist = backend.fetch_query(tmpl, context, text, labels);
    for (std::size_t c = 0; c < labels.size(); ++c) {
      mean_log[c] += std::log(dist[c]) / static_cast<double>(inputs.size());
      mean_prob[c] += dist[c] / static_cast<double>(inputs.size());
    }
  }
  PriorEstimate est;
  est.log_prior = centered(std::move(mean_log));
  est.mean_probs = std::move(mean_prob);
  est.source = "cc+";
  est.sample_count = inputs.size();
  return est;
}

// ---------------------------------------------------------------------------
// LinC

LinCModel LinCModel::identity(std::size_t num_classes) {
  LinCModel m{seqnet::Matrix(num_classes, num_classes), std::vector<double>(num_classes, 0.0)};
  for (std::size_t i = 0; i < num_classes; ++i) m.w(i, i) = 1.0;
  return m;
}

LinCModel linc_train(std::span<const LabelDistribution> dists, std::span<const LabelIndex> labels,
                     const seqnet::TrainConfig& cfg) {
  cfg.validate();
  if (dists.empty()) throw Error(Errc::kEmptyTrainingSet, "LinC needs labeled examples");
  if (dists.size() != labels.size()) throw Error(Errc::kLengthMismatch, "LinC: dists and labels differ in length");
  const std::size_t c = dists.front().size();
  std::vector<std::vector<double>> features;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    if (dists[i].size() != c) throw Error(Errc::kLabelSpaceMismatch, "LinC: distributions differ in width");
    if (labels[i] >= c) throw Error(Errc::kInvalidArgument, "LinC: label out of range");
    features.push_back(dists[i].log_probs());
  }

  auto model = LinCModel::identity(c);
  LinCModel grad = model;
  std::vector<std::span<double>> params{model.w.data, model.b};
  const std::vector<std::span<const double>> grads{grad.w.data, grad.b};
  auto state = seqnet::AdamState::for_tensors(grads);

  const std::size_t n = features.size();
  const std::size_t batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> logits(c);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(start + batch, n);
      std::fill(grad.w.data.begin(), grad.w.data.end(), 0.0);
      std::fill(grad.b.begin(), grad.b.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const auto& x = features[order[k]];
        for (std::size_t r = 0; r < c; ++r) {
          logits[r] = model.b[r];
          for (std::size_t j = 0; j < c; ++j) logits[r] += model.w(r, j) * x[j];
        }
        const auto ce = seqnet::softmax_cross_entropy(logits, labels[order[k]]);
        for (std::size_t r = 0; r < c; ++r) {
          grad.b[r] += scale * ce.grad[r];
          for (std::size_t j = 0; j < c; ++j) grad.w(r, j) += scale * ce.grad[r] * x[j];
        }
      }
      seqnet::adam_step(params, grads, state, cfg.learning_rate);
    }
  }
  return model;
}

LabelDistribution linc_apply(const LinCModel& model, const LabelDistribution& dist) {
  const std::size_t c = model.b.size();
  if (dist.size() != c) throw Error(Errc::kShapeMismatch, "LinC width != C");
  const auto x = dist.log_probs();
  std::vector<double> logits(model.b);
  for (std::size_t r = 0; r < c; ++r) {
    for (std::size_t j = 0; j < c; ++j) logits[r] += model.w(r, j) * x[j];
  }
  return softmax_distribution(logits);
}

json linc_to_json(const LinCModel& model) {
  return {{"format", "scal-linc-v1"}, {"num_classes", model.b.size()}, {"w", model.w.data}, {"b", model.b}};
}

LinCModel linc_from_json(const json& doc) {
  try {
    const auto c = doc.at("num_classes").get<std::size_t>();
    auto model = LinCModel::identity(c);
    model.w.data = doc.at("w").get<std::vector<double>>();
    model.b = doc.at("b").get<std::vector<double>>();
    if (model.w.data.size() != c * c || model.b.size() != c) throw Error(Errc::kShapeMismatch, "LinC checkpoint sizes");
    return model;
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, std::string("LinC checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Support sets

std::vector<Demonstration> select_support(std::span<const Demonstration> pool, std::size_t num_classes,
                                          std::uint64_t seed, std::size_t per_class) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].label && *pool[i].label < num_classes) by_class[*pool[i].label].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<Demonstration> support;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < per_class) {
      throw Error(Errc::kInsufficientSupport, "class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                                  " labeled samples, need " + std::to_string(per_class));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < per_class; ++k) support.push_back(pool[idx[k]]);
  }
  return support;
}

std::vector<LabelDistribution> support_dists(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                                             std::span<const Demonstration> context,
                                             std::span<const Demonstration> support, const LabelSpace& labels) {
  std::vector<LabelDistribution> dists;
  dists.reserve(support.size());
  for (const auto& item : support) dists.push_back(backend.fetch_query(tmpl, context, item.text, labels));
  return dists;
}

PriorEstimate bc_plus_estimate(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                               std::span<const Demonstration> context, std::span<const Demonstration> support,
                               const LabelSpace& labels, PriorSpace space) {
  auto est = bc_estimate(support_dists(backend, tmpl, context, support, labels), space);
  est.source = "bc+";
  return est;
}

LinCModel linc_plus_model(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                          std::span<const Demonstration> context, std::span<const Demonstration> support,
                          const LabelSpace& labels, const seqnet::TrainConfig& cfg) {
  const auto dists = support_dists(backend, tmpl, context, support, labels);
  std::vector<LabelIndex> ys;
  for (const auto& item : support) ys.push_back(item.label.value());
  return linc_train(dists, ys, cfg);
}

}  // namespace scal::calib
