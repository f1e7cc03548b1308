#include "scal/bayessim.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

namespace scal::bayessim {

using nlohmann::json;

namespace {

void check_row(std::span<const double> row, const char* what) {
  double sum = 0.0;
  for (double v : row) {
    if (!std::isfinite(v) || v < 0.0) throw Error(Errc::kInvalidArgument, std::string(what) + ": negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(Errc::kInvalidArgument, std::string(what) + ": row does not sum to 1");
}

std::vector<double> dirichlet(std::size_t n, double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> draw(n);
  double sum = 0.0;
  for (double& v : draw) {
    v = gamma(rng);
    sum += v;
  }
  // Tiny alphas can underflow every gamma draw.
  if (sum <= 0.0 || !std::isfinite(sum)) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  for (double& v : draw) v /= sum;
  return draw;
}

std::size_t sample_index(std::span<const double> probs, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> dist(probs.begin(), probs.end());
  return dist(rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// ConceptModel

ConceptModel ConceptModel::from_tables(std::vector<double> concept_prior,
                                       const std::vector<std::vector<double>>& input_given_concept,
                                       const std::vector<std::vector<std::vector<double>>>& label_given) {
  ConceptModel m;
  m.num_concepts = concept_prior.size();
  if (m.num_concepts == 0 || input_given_concept.size() != m.num_concepts ||
      label_given.size() != m.num_concepts) {
    throw Error(Errc::kShapeMismatch, "concept tables disagree on |Z|");
  }
  m.num_inputs = input_given_concept.front().size();
  m.num_classes = label_given.front().empty() ? 0 : label_given.front().front().size();
  m.concept_prior = std::move(concept_prior);
  for (std::size_t z = 0; z < m.num_concepts; ++z) {
    if (input_given_concept[z].size() != m.num_inputs || label_given[z].size() != m.num_inputs) {
      throw Error(Errc::kShapeMismatch, "concept tables disagree on |E|");
    }
    m.input_given_concept.insert(m.input_given_concept.end(), input_given_concept[z].begin(),
                                 input_given_concept[z].end());
    for (const auto& row : label_given[z]) {
      if (row.size() != m.num_classes) throw Error(Errc::kShapeMismatch, "label rows disagree on C");
      m.label_given.insert(m.label_given.end(), row.begin(), row.end());
    }
  }
  m.unbiased_label_given = m.label_given;
  m.validate();
  return m;
}

double ConceptModel::label_marginal(std::size_t z, LabelIndex y) const {
  double total = 0.0;
  for (std::size_t e = 0; e < num_inputs; ++e) total += p_input(z, e) * p_label(z, e, y);
  return total;
}

void ConceptModel::validate() const {
  if (num_concepts < 1 || num_inputs < 1 || num_classes < 2) {
    throw Error(Errc::kInvalidArgument, "model needs |Z| >= 1, |E| >= 1, C >= 2");
  }
  const std::size_t label_size = num_concepts * num_inputs * num_classes;
  if (concept_prior.size() != num_concepts || input_given_concept.size() != num_concepts * num_inputs ||
      label_given.size() != label_size || unbiased_label_given.size() != label_size) {
    throw Error(Errc::kShapeMismatch, "model table sizes inconsistent with dimensions");
  }
  check_row(concept_prior, "concept_prior");
  for (std::size_t z = 0; z < num_concepts; ++z) {
    check_row(std::span(input_given_concept).subspan(z * num_inputs, num_inputs), "input_given_concept");
  }
  for (std::size_t r = 0; r < num_concepts * num_inputs; ++r) {
    check_row(std::span(label_given).subspan(r * num_classes, num_classes), "label_given");
    check_row(std::span(unbiased_label_given).subspan(r * num_classes, num_classes), "unbiased_label_given");
  }
}

json model_to_json(const ConceptModel& m) {
  auto nest2 = [&](const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
    json out = json::array();
    for (std::size_t r = 0; r < rows; ++r) {
      out.push_back(std::vector<double>(flat.begin() + r * cols, flat.begin() + (r + 1) * cols));
    }
    return out;
  };
  auto nest3 = [&](const std::vector<double>& flat) {
    json out = json::array();
    for (std::size_t z = 0; z < m.num_concepts; ++z) {
      out.push_back(nest2(std::vector<double>(flat.begin() + z * m.num_inputs * m.num_classes,
                                              flat.begin() + (z + 1) * m.num_inputs * m.num_classes),
                          m.num_inputs, m.num_classes));
    }
    return out;
  };
  return {
      {"num_concepts", m.num_concepts},
      {"num_inputs", m.num_inputs},
      {"num_classes", m.num_classes},
      {"seed", m.seed},
      {"concept_prior", m.concept_prior},
      {"input_given_concept", nest2(m.input_given_concept, m.num_concepts, m.num_inputs)},
      {"label_given", nest3(m.label_given)},
      {"unbiased_label_given", nest3(m.unbiased_label_given)},
      {"favored_label", m.favored_label},
      {"bias_weight", m.bias_weight},
  };
}

ConceptModel model_from_json(const json& doc) {
  try {
    auto m = ConceptModel::from_tables(
        doc.at("concept_prior").get<std::vector<double>>(),
        doc.at("input_given_concept").get<std::vector<std::vector<double>>>(),
        doc.at("label_given").get<std::vector<std::vector<std::vector<double>>>>());
    if (doc.contains("unbiased_label_given")) {
      m.unbiased_label_given.clear();
      for (const auto& rows : doc.at("unbiased_label_given")) {
        for (const auto& row : rows) {
          for (const auto& v : row) m.unbiased_label_given.push_back(v.get<double>());
        }
      }
    }
    m.seed = doc.value("seed", std::uint64_t{0});
    m.favored_label = doc.value("favored_label", std::vector<LabelIndex>{});
    m.bias_weight = doc.value("bias_weight", std::vector<double>{});
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, std::string("concept model: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Exact inference

BeliefState posterior_update(const BeliefState& belief, Observation obs, const ConceptModel& model) {
  if (obs.input >= model.num_inputs || obs.label >= model.num_classes) {
    throw Error(Errc::kInvalidArgument, "observation index out of range");
  }
  if (belief.posterior.size() != model.num_concepts) throw Error(Errc::kShapeMismatch, "belief size != |Z|");
  BeliefState next{std::vector<double>(model.num_concepts)};
  double evidence = 0.0;
  for (std::size_t z = 0; z < model.num_concepts; ++z) {
    next.posterior[z] = model.joint(z, obs.input, obs.label) * belief.posterior[z];
    evidence += next.posterior[z];
  }
  if (evidence <= 0.0) throw Error(Errc::kZeroEvidence, "observation has zero probability under the belief");
  for (double& p : next.posterior) p /= evidence;
  return next;
}

BeliefState posterior_after(const ConceptModel& model, std::span<const Observation> context) {
  auto belief = BeliefState::from_prior(model);
  for (const auto& obs : context) belief = posterior_update(belief, obs, model);
  return belief;
}

LabelDistribution class_prior(const BeliefState& belief, const ConceptModel& model) {
  std::vector<double> prior(model.num_classes, 0.0);
  for (std::size_t z = 0; z < model.num_concepts; ++z) {
    if (belief.posterior[z] == 0.0) continue;
    for (LabelIndex y = 0; y < model.num_classes; ++y) prior[y] += belief.posterior[z] * model.label_marginal(z, y);
  }
  return normalize_over_labels(prior);
}

LabelDistribution predictive_prob(const BeliefState& belief, std::size_t input, const ConceptModel& model) {
  if (input >= model.num_inputs) throw Error(Errc::kInvalidArgument, "input index out of range");
  std::vector<double> mix(model.num_classes, 0.0);
  for (std::size_t z = 0; z < model.num_concepts; ++z) {
    for (LabelIndex y = 0; y < model.num_classes; ++y) mix[y] += belief.posterior[z] * model.p_label(z, input, y);
  }
  return normalize_over_labels(mix);
}

PriorDecomposition decompose_prior_update(const BeliefState& belief, Observation obs, LabelIndex target,
                                          const ConceptModel& model) {
  if (target >= model.num_classes) throw Error(Errc::kInvalidArgument, "target label out of range");
  double e_marginal = 0.0;
  double e_likelihood = 0.0;
  double e_product = 0.0;
  for (std::size_t z = 0; z < model.num_concepts; ++z) {
    const double w = belief.posterior[z];
    const double marginal = model.label_marginal(z, target);
    const double likelihood = model.joint(z, obs.input, obs.label);
    e_marginal += w * marginal;
    e_likelihood += w * likelihood;
    e_product += w * marginal * likelihood;
  }
  if (e_likelihood <= 0.0) throw Error(Errc::kZeroEvidence, "observation has zero probability under the belief");
  PriorDecomposition out;
  out.expectation_term = e_marginal;
  out.covariance_term = (e_product - e_marginal * e_likelihood) / e_likelihood;
  out.direct_updated_prior = class_prior(posterior_update(belief, obs, model), model)[target];
  return out;
}

double surprise_of(const BeliefState& belief, Observation obs, const ConceptModel& model) {
  if (obs.label >= model.num_classes) throw Error(Errc::kInvalidArgument, "label out of range");
  // Clamp the -0.0 that -log(1) produces.
  return std::max(0.0, -std::log(predictive_prob(belief, obs.input, model)[obs.label]));
}

// ---------------------------------------------------------------------------
// Synthetic tasks

void SyntheticTaskConfig::validate() const {
  if (num_concepts < 2 || num_inputs < 2 || num_classes < 2) {
    throw Error(Errc::kConfigError, "synthetic task needs at least 2 concepts, inputs, and classes");
  }
  if (!(concentration > 0.0) || !std::isfinite(concentration)) {
    throw Error(Errc::kConfigError, "concentration must be a positive finite number");
  }
  if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) throw Error(Errc::kConfigError, "bias_strength must be in [0,1]");
}

json task_config_to_json(const SyntheticTaskConfig& cfg) {
  return {{"num_concepts", cfg.num_concepts}, {"num_inputs", cfg.num_inputs},
          {"num_classes", cfg.num_classes},   {"concentration", cfg.concentration},
          {"bias_strength", cfg.bias_strength},
          {"bias_mode", cfg.bias_mode == BiasMode::kFixed ? "fixed" : "uniform"},
          {"seed", cfg.seed}};
}

SyntheticTaskConfig task_config_from_json(const json& doc) {
  SyntheticTaskConfig cfg;
  cfg.num_concepts = doc.value("num_concepts", cfg.num_concepts);
  cfg.num_inputs = doc.value("num_inputs", cfg.num_inputs);
  cfg.num_classes = doc.value("num_classes", cfg.num_classes);
  cfg.concentration = doc.value("concentration", cfg.concentration);
  cfg.bias_strength = doc.value("bias_strength", cfg.bias_strength);
  cfg.seed = doc.value("seed", cfg.seed);
  const auto mode = doc.value("bias_mode", std::string("fixed"));
  if (mode == "fixed") {
    cfg.bias_mode = BiasMode::kFixed;
  } else if (mode == "uniform") {
    cfg.bias_mode = BiasMode::kUniform;
  } else {
    throw Error(Errc::kConfigError, "bias_mode must be fixed or uniform");
  }
  cfg.validate();
  return cfg;
}

ConceptModel generate_task(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ConceptModel m;
  m.num_concepts = cfg.num_concepts;
  m.num_inputs = cfg.num_inputs;
  m.num_classes = cfg.num_classes;
  m.seed = cfg.seed;
  m.concept_prior = dirichlet(cfg.num_concepts, cfg.concentration, rng);

  std::uniform_int_distribution<LabelIndex> pick_label(0, cfg.num_classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t z = 0; z < cfg.num_concepts; ++z) {
    const LabelIndex favored = pick_label(rng);
    const double weight = cfg.bias_mode == BiasMode::kFixed ? cfg.bias_strength : cfg.bias_strength * unit(rng);
    m.favored_label.push_back(favored);
    m.bias_weight.push_back(weight);

    const auto inputs = dirichlet(cfg.num_inputs, cfg.concentration, rng);
    m.input_given_concept.insert(m.input_given_concept.end(), inputs.begin(), inputs.end());
    for (std::size_t e = 0; e < cfg.num_inputs; ++e) {
      const auto clean = dirichlet(cfg.num_classes, cfg.concentration, rng);
      for (LabelIndex y = 0; y < cfg.num_classes; ++y) {
        m.unbiased_label_given.push_back(clean[y]);
        m.label_given.push_back((1.0 - weight) * clean[y] + (y == favored ? weight : 0.0));
      }
    }
  }
  m.validate();
  return m;
}

std::string input_text(std::size_t input) { return "input_" + std::to_string(input); }

std::optional<std::size_t> parse_input_text(std::string_view text) {
  constexpr std::string_view kPrefix = "input_";
  if (!text.starts_with(kPrefix) || text.size() == kPrefix.size()) return std::nullopt;
  std::size_t value = 0;
  const auto digits = text.substr(kPrefix.size());
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) return std::nullopt;
  return value;
}

Episode simulate_episode(const ConceptModel& model, std::span<const Observation> demos, std::size_t query_input,
                         std::optional<LabelIndex> query_label, const std::optional<LabelSpace>& labels,
                         std::string id) {
  Episode episode;
  episode.id = std::move(id);
  episode.labels = labels ? *labels : LabelSpace::generic(model.num_classes);
  if (episode.labels.size() != model.num_classes) {
    throw Error(Errc::kLabelSpaceMismatch, "label space size differs from model C");
  }
  auto belief = BeliefState::from_prior(model);
  for (const auto& obs : demos) {
    episode.demos.push_back({input_text(obs.input), obs.label});
    episode.demo_dists.push_back(predictive_prob(belief, obs.input, model));
    belief = posterior_update(belief, obs, model);
  }
  episode.query = {input_text(query_input), query_label};
  episode.query_dist = predictive_prob(belief, query_input, model);
  episode.meta = {{"backend", "oracle"}, {"model_seed", model.seed}};
  return episode;
}

Episode sample_episode(const ConceptModel& model, std::size_t num_demos, std::mt19937_64& rng,
                       const std::string& id, const std::optional<LabelSpace>& labels) {
  const std::size_t truth = sample_index(model.concept_prior, rng);
  auto draw = [&]() {
    const auto input = sample_index(
        std::span(model.input_given_concept).subspan(truth * model.num_inputs, model.num_inputs), rng);
    const auto label = sample_index(
        std::span(model.unbiased_label_given)
            .subspan((truth * model.num_inputs + input) * model.num_classes, model.num_classes),
        rng);
    return Observation{input, label};
  };
  std::vector<Observation> demos;
  for (std::size_t j = 0; j < num_demos; ++j) demos.push_back(draw());
  const auto query = draw();

  auto episode = simulate_episode(model, demos, query.input, query.label, labels, id);
  json inputs = json::array();
  for (const auto& d : demos) inputs.push_back(d.input);
  episode.meta["true_concept"] = truth;
  episode.meta["demo_inputs"] = std::move(inputs);
  episode.meta["query_input"] = query.input;
  return episode;
}

std::vector<InsertionRecord> insertion_experiment(const ConceptModel& model,
                                                  std::span<const Observation> fixed_context,
                                                  std::span<const Observation> candidates) {
  if (model.num_classes != 2) throw Error(Errc::kInvalidArgument, "insertion experiment is defined for C = 2");
  const auto belief = posterior_after(model, fixed_context);
  const double before = class_prior(belief, model)[1];
  std::vector<InsertionRecord> records;
  records.reserve(candidates.size());
  for (const auto& cand : candidates) {
    InsertionRecord rec;
    rec.label = cand.label;
    const double s = surprise_of(belief, cand, model);
    rec.signed_surprise = cand.label == 0 ? -s : s;
    rec.prior_before = before;
    rec.prior_after = class_prior(posterior_update(belief, cand, model), model)[1];
    records.push_back(rec);
  }
  return records;
}

}  // namespace scal::bayessim
