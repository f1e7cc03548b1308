#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/backends.hpp"
#include "scal/core.hpp"
#include "scal/seqnet.hpp"
#include "scal/surprise.hpp"

namespace scal::calib {

enum class Method { kIcl, kBc, kLinc, kCcPlus, kBcPlus, kLincPlus, kSc };

/// CLI names: icl, bc, linc, cc+, bc+, linc+, sc. Throws UnknownMethod.
Method parse_method(std::string_view name);
std::string_view method_name(Method method) noexcept;

/// Logical inferences a method needs for M training and T test queries with a
/// per-query support set of n samples.
std::uint64_t count_inferences(Method method, std::uint64_t m, std::uint64_t t, std::uint64_t n);

// ---------------------------------------------------------------------------
// Surprise Calibration

struct SCModel {
  seqnet::SequenceModel net;
  seqnet::TrainConfig config;
  bool binarized = false;  // magnitude ablation: feed sign-only surprise

  std::size_t num_classes() const noexcept { return net.input_dim(); }
};

/// a = W_out h_K + b_out over the (optionally binarized) surprise sequence.
std::vector<double> sc_adjust(const SCModel& model, const surprise::SurpriseSequence& seq);

/// softmax(ln orig + a).
LabelDistribution sc_calibrate(const LabelDistribution& orig, std::span<const double> adjustment);

/// Builds the training example for one labeled episode.
seqnet::Example sc_example(const Episode& episode, bool binarized);

/// Trains GRU + decoder end to end on labeled episodes. Throws
/// EmptyTrainingSet, LabelSpaceMismatch, EmptyContext, ConfigError.
SCModel sc_train(std::span<const Episode> train, const seqnet::TrainConfig& cfg, bool binarized = false);

nlohmann::json sc_to_json(const SCModel& model);
SCModel sc_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Prior estimates

enum class PriorSpace { kLog, kProb };

PriorSpace parse_prior_space(std::string_view name);

struct PriorEstimate {
  /// Centered ln of the mean probability vector.
  std::vector<double> log_prior;
  /// The mean probability vector itself; subtracted directly in prob space.
  std::vector<double> mean_probs;
  std::string source;
  std::size_t sample_count = 0;
  PriorSpace space = PriorSpace::kLog;
};

/// Mean of the batch's probability vectors. Throws EmptyBatch.
PriorEstimate bc_estimate(std::span<const LabelDistribution> batch, PriorSpace space = PriorSpace::kLog);

/// Log space: softmax(ln dist - log_prior). Prob space: softmax(dist - mean_probs).
LabelDistribution apply_prior(const LabelDistribution& dist, const PriorEstimate& prior);

/// Three content-free queries under the same context; the mean of their
/// log-probability vectors, centered.
PriorEstimate cc_plus_estimate(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                               std::span<const Demonstration> context, const LabelSpace& labels);

// ---------------------------------------------------------------------------
// LinC

struct LinCModel {
  seqnet::Matrix w;  // C x C, applied to ln p
  std::vector<double> b;

  static LinCModel identity(std::size_t num_classes);
};

/// Adam on cross-entropy of softmax(W ln p + b), starting from identity.
LinCModel linc_train(std::span<const LabelDistribution> dists, std::span<const LabelIndex> labels,
                     const seqnet::TrainConfig& cfg);

LabelDistribution linc_apply(const LinCModel& model, const LabelDistribution& dist);

nlohmann::json linc_to_json(const LinCModel& model);
LinCModel linc_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Per-query support (BC+ / LinC+)

inline constexpr std::size_t kSupportPerClass = 5;

/// Fixed, seeded draw of `per_class` labeled items per class from a pool.
/// Throws InsufficientSupport.
std::vector<Demonstration> select_support(std::span<const Demonstration> pool, std::size_t num_classes,
                                          std::uint64_t seed, std::size_t per_class = kSupportPerClass);

/// Re-evaluates every support item as the query under `context`; n calls.
std::vector<LabelDistribution> support_dists(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                                             std::span<const Demonstration> context,
                                             std::span<const Demonstration> support, const LabelSpace& labels);

/// BC+: bc_estimate over the support evaluated under this query's context.
PriorEstimate bc_plus_estimate(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                               std::span<const Demonstration> context, std::span<const Demonstration> support,
                               const LabelSpace& labels, PriorSpace space = PriorSpace::kLog);

/// LinC+: linc_train on the support evaluated under this query's context.
LinCModel linc_plus_model(backends::LogprobBackend& backend, const PromptTemplate& tmpl,
                          std::span<const Demonstration> context, std::span<const Demonstration> support,
                          const LabelSpace& labels, const seqnet::TrainConfig& cfg);

}  // namespace scal::calib
