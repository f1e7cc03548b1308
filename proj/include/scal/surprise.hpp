#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/core.hpp"

namespace scal::surprise {

/// Signed per-class surprise for one demonstration:
///   values[c] = (1 - 2[c == y]) ln p(c | e_j, D_{j-1})
/// so the true-label entry is -ln p(y) >= 0 and every other entry ln p(c) <= 0.
struct SurpriseVector {
  std::vector<double> values;

  friend bool operator==(const SurpriseVector&, const SurpriseVector&) = default;
};

struct SurpriseSequence {
  std::vector<SurpriseVector> vectors;
  std::optional<LabelIndex> true_query_label;

  std::size_t length() const noexcept { return vectors.size(); }
  std::size_t num_classes() const noexcept { return vectors.empty() ? 0 : vectors.front().values.size(); }

  friend bool operator==(const SurpriseSequence&, const SurpriseSequence&) = default;
};

SurpriseVector surprise_vector(const LabelDistribution& dist, LabelIndex y);

/// Throws EmptyContext for zero-shot episodes.
SurpriseSequence build_sequence(const Episode& episode);

/// Keeps each entry's sign and sets its magnitude to 1; zeros map to +1.
SurpriseSequence binarize_magnitude(const SurpriseSequence& seq);

/// Training-set record {"id","seq","query_dist","query_label"}.
nlohmann::json training_record(const Episode& episode);

}  // namespace scal::surprise
