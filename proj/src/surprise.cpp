#include "scal/surprise.hpp"

#include <cmath>

namespace scal::surprise {

SurpriseVector surprise_vector(const LabelDistribution& dist, LabelIndex y) {
  if (y >= dist.size()) throw Error(Errc::kInvalidArgument, "label out of range for surprise vector");
  SurpriseVector out;
  out.values.resize(dist.size());
  for (std::size_t c = 0; c < dist.size(); ++c) {
    const double sign = c == y ? -1.0 : 1.0;
    out.values[c] = sign * std::log(dist[c]);
  }
  return out;
}

SurpriseSequence build_sequence(const Episode& episode) {
  if (episode.demos.empty()) throw Error(Errc::kEmptyContext, "surprise sequence needs at least one demonstration");
  if (episode.demo_dists.size() != episode.demos.size()) {
    throw Error(Errc::kShapeMismatch, "episode has mismatched demo distributions");
  }
  SurpriseSequence seq;
  for (std::size_t j = 0; j < episode.demos.size(); ++j) {
    const auto& label = episode.demos[j].label;
    if (!label) throw Error(Errc::kInvalidArgument, "demonstration without label");
    seq.vectors.push_back(surprise_vector(episode.demo_dists[j], *label));
  }
  seq.true_query_label = episode.query.label;
  return seq;
}

SurpriseSequence binarize_magnitude(const SurpriseSequence& seq) {
  SurpriseSequence out = seq;
  for (auto& vec : out.vectors) {
    for (double& v : vec.values) v = v < 0.0 ? -1.0 : 1.0;
  }
  return out;
}

nlohmann::json training_record(const Episode& episode) {
  const auto seq = build_sequence(episode);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& v : seq.vectors) rows.push_back(v.values);
  nlohmann::json record = {{"id", episode.id}, {"seq", std::move(rows)}, {"query_dist", episode.query_dist.probs()}};
  record["query_label"] = episode.query.label ? nlohmann::json(*episode.query.label) : nlohmann::json(nullptr);
  return record;
}

}  // namespace scal::surprise
