#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/core.hpp"

namespace scal::bayessim {

/// Finite latent-concept model. Inputs are identified by index.
///
/// Tables are stored row-major:
///   input_given_concept[z * E + e]            = p(e | z)
///   label_given[(z * E + e) * C + y]          = p(y | e, z)   (what the simulated LM believes)
///   unbiased_label_given[(z * E + e) * C + y] = labeling rule used to draw ground truth
///
/// For hand-built models the unbiased table equals label_given.
struct ConceptModel {
  std::size_t num_concepts = 0;
  std::size_t num_inputs = 0;
  std::size_t num_classes = 0;
  std::vector<double> concept_prior;
  std::vector<double> input_given_concept;
  std::vector<double> label_given;
  std::vector<double> unbiased_label_given;
  std::vector<LabelIndex> favored_label;  // empty for hand-built models
  std::vector<double> bias_weight;        // empty for hand-built models
  std::uint64_t seed = 0;

  /// Builds a model from nested tables and validates it.
  static ConceptModel from_tables(std::vector<double> concept_prior,
                                  const std::vector<std::vector<double>>& input_given_concept,
                                  const std::vector<std::vector<std::vector<double>>>& label_given);

  double p_input(std::size_t z, std::size_t e) const { return input_given_concept[z * num_inputs + e]; }
  double p_label(std::size_t z, std::size_t e, LabelIndex y) const {
    return label_given[(z * num_inputs + e) * num_classes + y];
  }
  /// p(e, y | z) = p(e | z) p(y | e, z).
  double joint(std::size_t z, std::size_t e, LabelIndex y) const { return p_input(z, e) * p_label(z, e, y); }
  /// p(y | z) = sum_e p(e | z) p(y | e, z).
  double label_marginal(std::size_t z, LabelIndex y) const;

  /// Every row sums to 1 within 1e-9 and all entries are >= 0.
  void validate() const;

  friend bool operator==(const ConceptModel&, const ConceptModel&) = default;
};

nlohmann::json model_to_json(const ConceptModel& model);
ConceptModel model_from_json(const nlohmann::json& doc);

struct BeliefState {
  std::vector<double> posterior;

  static BeliefState from_prior(const ConceptModel& model) { return {model.concept_prior}; }
};

struct Observation {
  std::size_t input = 0;
  LabelIndex label = 0;
};

BeliefState posterior_update(const BeliefState& belief, Observation obs, const ConceptModel& model);

/// Posterior after folding in every observation in order.
BeliefState posterior_after(const ConceptModel& model, std::span<const Observation> context);

/// p(y') = sum_z posterior(z) p(y' | z).
LabelDistribution class_prior(const BeliefState& belief, const ConceptModel& model);

/// p(y | e, D) = sum_z posterior(z) p(y | e, z), passed through normalize_over_labels.
LabelDistribution predictive_prob(const BeliefState& belief, std::size_t input, const ConceptModel& model);

struct PriorDecomposition {
  double expectation_term = 0.0;
  double covariance_term = 0.0;
  double direct_updated_prior = 0.0;
};

/// Splits the updated class prior of `target` into E_z[p(y'|z)] plus
/// Cov_z(p(y'|z), p(e,y|z)) / E_z[p(e,y|z)], alongside the directly computed value.
PriorDecomposition decompose_prior_update(const BeliefState& belief, Observation obs, LabelIndex target,
                                          const ConceptModel& model);

/// -ln p(y | e, D) under the current belief. Natural log.
double surprise_of(const BeliefState& belief, Observation obs, const ConceptModel& model);

enum class BiasMode {
  kFixed,    // every concept gets bias weight = bias_strength
  kUniform,  // each concept draws its weight from U(0, bias_strength)
};

struct SyntheticTaskConfig {
  std::size_t num_concepts = 8;
  std::size_t num_inputs = 16;
  std::size_t num_classes = 2;
  double concentration = 1.0;
  double bias_strength = 0.0;
  BiasMode bias_mode = BiasMode::kFixed;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json task_config_to_json(const SyntheticTaskConfig& cfg);
SyntheticTaskConfig task_config_from_json(const nlohmann::json& doc);

/// Symmetric-Dirichlet tables; each concept's label rows are mixed toward a
/// concept-specific favored label with its bias weight:
///   label_given = (1 - w_z) * unbiased + w_z * onehot(favored_z).
ConceptModel generate_task(const SyntheticTaskConfig& cfg);

/// Text used for input e in simulated episodes and by the oracle backend.
std::string input_text(std::size_t input);
/// Inverse of input_text; nullopt when the text does not have that form.
std::optional<std::size_t> parse_input_text(std::string_view text);

/// Exact-Bayes episode: demo_dists[j] is the predictive at demos[j].input
/// given demos[0..j), query_dist is the predictive after all demos.
Episode simulate_episode(const ConceptModel& model, std::span<const Observation> demos, std::size_t query_input,
                         std::optional<LabelIndex> query_label = std::nullopt,
                         const std::optional<LabelSpace>& labels = std::nullopt, std::string id = "sim");

/// Draws a ground-truth concept z* from the concept prior, K demonstrations and
/// one query from z* (inputs from p(e|z*), labels from the unbiased table),
/// and returns the exact-Bayes episode. meta records z*, inputs, and labels.
Episode sample_episode(const ConceptModel& model, std::size_t num_demos, std::mt19937_64& rng,
                       const std::string& id, const std::optional<LabelSpace>& labels = std::nullopt);

struct InsertionRecord {
  LabelIndex label = 0;
  double signed_surprise = 0.0;  // negated for label 0
  double prior_before = 0.0;     // positive-class (index 1) prior
  double prior_after = 0.0;
};

/// Binary-only. Records, for each candidate, its signed surprise under the
/// fixed-context posterior and the positive-class prior before/after adding it.
std::vector<InsertionRecord> insertion_experiment(const ConceptModel& model,
                                                  std::span<const Observation> fixed_context,
                                                  std::span<const Observation> candidates);

}  // namespace scal::bayessim
