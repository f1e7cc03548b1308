#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/error.hpp"

namespace scal {

/// Relative probability floor: after normalization no label falls below
/// kProbFloor times the largest label mass, so log-probabilities stay finite.
inline constexpr double kProbFloor = 1e-8;

using LabelIndex = std::size_t;

/// Ordered label strings plus the first-token string the backend reports for
/// each label. Construct through make(), which enforces distinctness.
class LabelSpace {
 public:
  static LabelSpace make(std::vector<std::string> labels, std::vector<std::string> verbalizer);

  /// Generic names ("label_0", ...) used by synthetic scenarios.
  static LabelSpace generic(std::size_t num_classes);

  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<std::string>& verbalizer() const noexcept { return verbalizer_; }

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  LabelSpace() = default;
  std::vector<std::string> labels_;
  std::vector<std::string> verbalizer_;
};

/// Throws DuplicateFirstToken or EmptyToken.
void validate_verbalizer(std::span<const std::string> verbalizer_tokens);

/// Probability vector over the label space. Always normalized and floored.
class LabelDistribution {
 public:
  /// Wraps an already-normalized vector; throws InvalidArgument when the
  /// entries are negative, non-finite, or do not sum to 1 within 1e-9.
  static LabelDistribution from_probs(std::vector<double> probs);

  std::size_t size() const noexcept { return probs_.size(); }
  const std::vector<double>& probs() const noexcept { return probs_; }
  double operator[](std::size_t i) const { return probs_[i]; }

  std::vector<double> log_probs() const;

  friend bool operator==(const LabelDistribution&, const LabelDistribution&) = default;

 private:
  explicit LabelDistribution(std::vector<double> probs) : probs_(std::move(probs)) {}
  std::vector<double> probs_;
  friend LabelDistribution normalize_over_labels(std::span<const double> raw);
};

/// probs[i] = max(raw[i], kProbFloor * max(raw)) / Z.
LabelDistribution normalize_over_labels(std::span<const double> raw);

/// Numerically stable softmax of arbitrary logits, returned as a distribution.
LabelDistribution softmax_distribution(std::span<const double> logits);

/// Index of the largest entry; ties go to the lowest index.
LabelIndex argmax_label(std::span<const double> scores);
inline LabelIndex argmax_label(const LabelDistribution& dist) { return argmax_label(dist.probs()); }

struct Demonstration {
  std::string text;
  std::optional<LabelIndex> label;

  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

struct Episode {
  std::string id;
  LabelSpace labels = LabelSpace::generic(2);
  std::vector<Demonstration> demos;
  Demonstration query;
  std::vector<LabelDistribution> demo_dists;  // j-th conditioned on demos[0..j)
  LabelDistribution query_dist = LabelDistribution::from_probs({0.5, 0.5});
  nlohmann::json meta = nlohmann::json::object();

  std::size_t num_demos() const noexcept { return demos.size(); }
  /// Checks label ranges, dist counts, and dist widths. Throws on violation.
  void validate() const;

  friend bool operator==(const Episode&, const Episode&) = default;
};

struct PromptTemplate {
  std::string demo_format = "{input} > {label}\n";
  std::string query_format = "{input} >";
  std::string delimiter = ">";

  /// Throws TemplateError when placeholders are missing or duplicated, the
  /// query format does not end with the delimiter, or no delimiter precedes
  /// {label} in the demonstration format.
  void validate() const;
};

struct AssembledPrompt {
  std::string text;
  /// K+1 character offsets; prefix text[0, cut) ends right after a delimiter.
  std::vector<std::size_t> cut_points;
};

AssembledPrompt assemble_prompt(const PromptTemplate& tmpl, std::span<const Demonstration> demos,
                                const std::string& query_text, const LabelSpace& labels);

}  // namespace scal
