#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scal/core.hpp"

namespace scal::seqnet {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Single-layer GRU cell weights. W_* are H x C, U_* are H x H.
///   z = sigmoid(W_z x + U_z h + b_z)
///   r = sigmoid(W_r x + U_r h + b_r)
///   n = tanh(W_h x + U_h (r * h) + b_h)
///   h' = (1 - z) * h + z * n
struct GruParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Matrix w_z, w_r, w_h;
  Matrix u_z, u_r, u_h;
  std::vector<double> b_z, b_r, b_h;

  friend bool operator==(const GruParams&, const GruParams&) = default;
};

/// Affine read-out a = W_out h + b_out, W_out is C x H.
struct DecoderParams {
  Matrix w_out;
  std::vector<double> b_out;

  friend bool operator==(const DecoderParams&, const DecoderParams&) = default;
};

/// GRU plus decoder. Also used as the gradient container.
struct SequenceModel {
  GruParams gru;
  DecoderParams decoder;

  static SequenceModel zeros(std::size_t input_dim, std::size_t hidden_dim);

  std::size_t input_dim() const noexcept { return gru.input_dim; }
  std::size_t hidden_dim() const noexcept { return gru.hidden_dim; }

  /// Tensor views in checkpoint order:
  /// w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h, w_out, b_out.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  static const std::vector<std::string>& tensor_names();
  std::size_t parameter_count() const;

  friend bool operator==(const SequenceModel&, const SequenceModel&) = default;
};

using Vector = std::vector<double>;
using Sequence = std::vector<Vector>;

/// Hidden states h_1..h_K from h_0 = 0. Throws ShapeMismatch / EmptyContext.
std::vector<Vector> gru_forward(const GruParams& params, std::span<const Vector> seq);

Vector decode_adjustment(const DecoderParams& decoder, std::span<const double> hidden);

struct CrossEntropy {
  double loss = 0.0;
  Vector grad;  // softmax(logits) - onehot(target)
};

CrossEntropy softmax_cross_entropy(std::span<const double> logits, LabelIndex target);

/// One SC training example: the surprise sequence, the original query
/// log-probabilities, and the true query label.
struct Example {
  Sequence seq;
  Vector base_logits;
  LabelIndex target = 0;
};

/// Mean cross-entropy of softmax(base_logits + decode(gru(seq))).
double batch_loss(const SequenceModel& model, std::span<const Example> batch);

struct Gradient {
  double loss = 0.0;
  SequenceModel grads;
};

/// Exact reverse-mode gradient of batch_loss. Throws EmptyBatch / ShapeMismatch.
Gradient backward(const SequenceModel& model, std::span<const Example> batch);

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Central differences on a seeded random subsample of coordinates (all of
/// them when the model has fewer than `num_coordinates`). Relative error uses
/// max(|analytic|, |numeric|, 1e-8); coordinates where both sides are below
/// 1e-8 count as exact.
FiniteDiffReport finite_diff_check(const SequenceModel& model, std::span<const Example> batch, double eps = 1e-5,
                                   std::size_t num_coordinates = 200, std::uint64_t seed = 0);

struct AdamState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;

  /// Zero moments shaped like the given tensors.
  static AdamState for_tensors(std::span<const std::span<const double>> tensors);
};

/// Bias-corrected Adam update applied in place. Throws ShapeMismatch.
void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state, double learning_rate);

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, deterministic in seed.
SequenceModel init_params(std::uint64_t seed, std::size_t input_dim, std::size_t hidden_dim);

struct TrainConfig {
  std::size_t epochs = 200;
  double learning_rate = 1e-4;
  std::size_t hidden_dim = 32;
  /// Examples per Adam step; 0 (default) is full batch. Minibatches are
  /// reshuffled every epoch from seed.
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig defaults = {});

struct TrainReport {
  std::vector<double> epoch_loss;  // full-data loss after each epoch
};

/// Adam on mean cross-entropy; single-threaded and bit-deterministic.
TrainReport train(SequenceModel& model, std::span<const Example> examples, const TrainConfig& cfg);

/// {"format","input_dim","hidden_dim","tensors":{name:[row-major floats]}}.
nlohmann::json model_to_json(const SequenceModel& model);
SequenceModel model_from_json(const nlohmann::json& doc);

}  // namespace scal::seqnet
