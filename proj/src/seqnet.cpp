#include "scal/seqnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace scal::seqnet {

using nlohmann::json;

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// out += M v
void gemv_add(const Matrix& m, std::span<const double> v, Vector& out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * v[c];
    out[r] += acc;
  }
}

// out += M^T v
void gemv_t_add(const Matrix& m, std::span<const double> v, Vector& out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * v[r];
  }
}

// M += a b^T
void outer_add(Matrix& m, std::span<const double> a, std::span<const double> b) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double* row = m.data.data() + r * m.cols;
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += a[r] * b[c];
  }
}

void add_to(Vector& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct StepCache {
  Vector h_prev, z, r, n, rh;
};

struct Trace {
  std::vector<StepCache> steps;
  Vector h_last;
};

Trace forward_trace(const GruParams& p, std::span<const Vector> seq) {
  if (seq.empty()) throw Error(Errc::kEmptyContext, "GRU needs a non-empty sequence");
  const std::size_t hdim = p.hidden_dim;
  Trace trace;
  Vector h(hdim, 0.0);
  for (const auto& x : seq) {
    if (x.size() != p.input_dim) throw Error(Errc::kShapeMismatch, "sequence element width != GRU input_dim");
    StepCache step;
    step.h_prev = h;
    Vector az = p.b_z, ar = p.b_r, an = p.b_h;
    gemv_add(p.w_z, x, az);
    gemv_add(p.u_z, h, az);
    gemv_add(p.w_r, x, ar);
    gemv_add(p.u_r, h, ar);
    step.z.resize(hdim);
    step.r.resize(hdim);
    step.rh.resize(hdim);
    for (std::size_t i = 0; i < hdim; ++i) {
      step.z[i] = sigmoid(az[i]);
      step.r[i] = sigmoid(ar[i]);
      step.rh[i] = step.r[i] * h[i];
    }
    gemv_add(p.w_h, x, an);
    gemv_add(p.u_h, step.rh, an);
    step.n.resize(hdim);
    for (std::size_t i = 0; i < hdim; ++i) {
      step.n[i] = std::tanh(an[i]);
      h[i] = (1.0 - step.z[i]) * h[i] + step.z[i] * step.n[i];
    }
    trace.steps.push_back(std::move(step));
  }
  trace.h_last = std::move(h);
  return trace;
}

void check_example(const SequenceModel& model, const Example& ex) {
  const std::size_t c = model.decoder.b_out.size();
  if (ex.base_logits.size() != c) throw Error(Errc::kShapeMismatch, "base logits width != decoder output");
  if (ex.target >= c) throw Error(Errc::kInvalidArgument, "target label out of range");
}

Vector calibrated_logits(const SequenceModel& model, const Example& ex, const Vector& h_last) {
  auto logits = decode_adjustment(model.decoder, h_last);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += ex.base_logits[i];
  return logits;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter containers

SequenceModel SequenceModel::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  if (input_dim == 0 || hidden_dim == 0) throw Error(Errc::kShapeMismatch, "dimensions must be >= 1");
  SequenceModel m;
  auto& g = m.gru;
  g.input_dim = input_dim;
  g.hidden_dim = hidden_dim;
  g.w_z = g.w_r = g.w_h = Matrix(hidden_dim, input_dim);
  g.u_z = g.u_r = g.u_h = Matrix(hidden_dim, hidden_dim);
  g.b_z = g.b_r = g.b_h = Vector(hidden_dim, 0.0);
  m.decoder.w_out = Matrix(input_dim, hidden_dim);
  m.decoder.b_out = Vector(input_dim, 0.0);
  return m;
}

std::vector<std::span<double>> SequenceModel::tensors() {
  auto& g = gru;
  return {g.w_z.data, g.w_r.data, g.w_h.data, g.u_z.data, g.u_r.data, g.u_h.data,
          g.b_z,      g.b_r,      g.b_h,      decoder.w_out.data,      decoder.b_out};
}

std::vector<std::span<const double>> SequenceModel::tensors() const {
  const auto& g = gru;
  return {g.w_z.data, g.w_r.data, g.w_h.data, g.u_z.data, g.u_r.data, g.u_h.data,
          g.b_z,      g.b_r,      g.b_h,      decoder.w_out.data,      decoder.b_out};
}

const std::vector<std::string>& SequenceModel::tensor_names() {
  static const std::vector<std::string> names = {"w_z", "w_r", "w_h", "u_z", "u_r", "u_h",
                                                 "b_z", "b_r", "b_h", "w_out", "b_out"};
  return names;
}

std::size_t SequenceModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward pieces

std::vector<Vector> gru_forward(const GruParams& params, std::span<const Vector> seq) {
  const auto trace = forward_trace(params, seq);
  std::vector<Vector> hidden;
  for (std::size_t t = 1; t < trace.steps.size(); ++t) hidden.push_back(trace.steps[t].h_prev);
  hidden.push_back(trace.h_last);
  return hidden;
}

Vector decode_adjustment(const DecoderParams& decoder, std::span<const double> hidden) {
  if (hidden.size() != decoder.w_out.cols) throw Error(Errc::kShapeMismatch, "hidden width != decoder input");
  Vector a = decoder.b_out;
  gemv_add(decoder.w_out, hidden, a);
  return a;
}

CrossEntropy softmax_cross_entropy(std::span<const double> logits, LabelIndex target) {
  if (target >= logits.size()) throw Error(Errc::kInvalidArgument, "target out of range");
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - top);
  const double log_z = top + std::log(z);
  CrossEntropy out;
  out.loss = log_z - logits[target];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[target] -= 1.0;
  return out;
}

double batch_loss(const SequenceModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw Error(Errc::kEmptyBatch, "loss over an empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    check_example(model, ex);
    const auto trace = forward_trace(model.gru, ex.seq);
    total += softmax_cross_entropy(calibrated_logits(model, ex, trace.h_last), ex.target).loss;
  }
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Reverse mode

Gradient backward(const SequenceModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw Error(Errc::kEmptyBatch, "gradient over an empty batch");
  const auto& p = model.gru;
  const std::size_t hdim = p.hidden_dim;
  const double scale = 1.0 / static_cast<double>(batch.size());

  Gradient out;
  out.grads = SequenceModel::zeros(model.input_dim(), hdim);
  auto& g = out.grads.gru;
  auto& gd = out.grads.decoder;

  for (const auto& ex : batch) {
    check_example(model, ex);
    const auto trace = forward_trace(p, ex.seq);
    auto ce = softmax_cross_entropy(calibrated_logits(model, ex, trace.h_last), ex.target);
    out.loss += ce.loss * scale;
    for (double& v : ce.grad) v *= scale;

    outer_add(gd.w_out, ce.grad, trace.h_last);
    add_to(gd.b_out, ce.grad);
    Vector dh(hdim, 0.0);
    gemv_t_add(model.decoder.w_out, ce.grad, dh);

    for (std::size_t t = trace.steps.size(); t-- > 0;) {
      const auto& s = trace.steps[t];
      const auto& x = ex.seq[t];
      Vector daz(hdim), dar(hdim), dan(hdim), dh_prev(hdim);
      for (std::size_t i = 0; i < hdim; ++i) {
        const double dz = dh[i] * (s.n[i] - s.h_prev[i]);
        const double dn = dh[i] * s.z[i];
        dh_prev[i] = dh[i] * (1.0 - s.z[i]);
        dan[i] = dn * (1.0 - s.n[i] * s.n[i]);
        daz[i] = dz * s.z[i] * (1.0 - s.z[i]);
      }
      outer_add(g.w_h, dan, x);
      outer_add(g.u_h, dan, s.rh);
      add_to(g.b_h, dan);
      Vector drh(hdim, 0.0);
      gemv_t_add(p.u_h, dan, drh);
      for (std::size_t i = 0; i < hdim; ++i) {
        dh_prev[i] += drh[i] * s.r[i];
        dar[i] = drh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]);
      }
      outer_add(g.w_z, daz, x);
      outer_add(g.u_z, daz, s.h_prev);
      add_to(g.b_z, daz);
      outer_add(g.w_r, dar, x);
      outer_add(g.u_r, dar, s.h_prev);
      add_to(g.b_r, dar);
      gemv_t_add(p.u_z, daz, dh_prev);
      gemv_t_add(p.u_r, dar, dh_prev);
      dh = std::move(dh_prev);
    }
  }
  return out;
}

FiniteDiffReport finite_diff_check(const SequenceModel& model, std::span<const Example> batch, double eps,
                                   std::size_t num_coordinates, std::uint64_t seed) {
  const auto analytic = backward(model, batch);
  const auto grad_tensors = analytic.grads.tensors();

  // Flat (tensor, offset) addressing.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < grad_tensors.size(); ++t) {
    for (std::size_t i = 0; i < grad_tensors[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (coords.size() > num_coordinates) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(num_coordinates);
  }

  SequenceModel probe = model;
  auto probe_tensors = probe.tensors();
  FiniteDiffReport report;
  for (const auto& [t, i] : coords) {
    double& theta = probe_tensors[t][i];
    const double saved = theta;
    theta = saved + eps;
    const double up = batch_loss(probe, batch);
    theta = saved - eps;
    const double down = batch_loss(probe, batch);
    theta = saved;

    const double numeric = (up - down) / (2.0 * eps);
    const double exact = grad_tensors[t][i];
    double err = 0.0;
    if (std::abs(exact) >= 1e-8 || std::abs(numeric) >= 1e-8) {
      err = std::abs(exact - numeric) / std::max({std::abs(exact), std::abs(numeric), 1e-8});
    }
    report.max_rel_error = std::max(report.max_rel_error, err);
    ++report.coordinates_checked;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamState AdamState::for_tensors(std::span<const std::span<const double>> tensors) {
  AdamState state;
  for (const auto& t : tensors) {
    state.first_moment.emplace_back(t.size(), 0.0);
    state.second_moment.emplace_back(t.size(), 0.0);
  }
  return state;
}

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state, double learning_rate) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw Error(Errc::kShapeMismatch, "Adam: parameter/gradient/state tensor counts differ");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (params[k].size() != grads[k].size() || params[k].size() != m.size()) {
      throw Error(Errc::kShapeMismatch, "Adam: tensor shapes differ");
    }
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double gi = grads[k][i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      params[k][i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

SequenceModel init_params(std::uint64_t seed, std::size_t input_dim, std::size_t hidden_dim) {
  auto model = SequenceModel::zeros(input_dim, hidden_dim);
  std::mt19937_64 rng(seed);
  auto fill = [&](Matrix& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.data) v = dist(rng);
  };
  auto& g = model.gru;
  for (Matrix* m : {&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &model.decoder.w_out}) fill(*m);
  return model;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(Errc::kConfigError, "epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error(Errc::kConfigError, "learning_rate must be > 0");
  if (hidden_dim < 1) throw Error(Errc::kConfigError, "hidden_dim must be >= 1");
}

json train_config_to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"learning_rate", cfg.learning_rate},
          {"hidden_dim", cfg.hidden_dim},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const json& doc, TrainConfig defaults) {
  TrainConfig cfg = defaults;
  try {
    cfg.epochs = doc.value("epochs", cfg.epochs);
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.hidden_dim = doc.value("hidden_dim", cfg.hidden_dim);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    cfg.seed = doc.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw Error(Errc::kConfigError, std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainReport train(SequenceModel& model, std::span<const Example> examples, const TrainConfig& cfg) {
  cfg.validate();
  if (examples.empty()) throw Error(Errc::kEmptyTrainingSet, "no training examples");
  const std::size_t batch = cfg.batch_size == 0 ? examples.size() : std::min(cfg.batch_size, examples.size());

  auto params = model.tensors();
  auto state = AdamState::for_tensors(std::as_const(model).tensors());
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Example> chunk;

  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < examples.size()) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      chunk.clear();
      for (std::size_t i = start; i < std::min(start + batch, order.size()); ++i) chunk.push_back(examples[order[i]]);
      const auto grad = backward(model, chunk);
      adam_step(params, std::as_const(grad.grads).tensors(), state, cfg.learning_rate);
    }
    report.epoch_loss.push_back(batch_loss(model, examples));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

json model_to_json(const SequenceModel& model) {
  json tensors = json::object();
  const auto views = model.tensors();
  const auto& names = SequenceModel::tensor_names();
  for (std::size_t i = 0; i < views.size(); ++i) {
    tensors[names[i]] = std::vector<double>(views[i].begin(), views[i].end());
  }
  return {{"format", "scal-seqnet-gru-v1"},
          {"input_dim", model.input_dim()},
          {"hidden_dim", model.hidden_dim()},
          {"tensor_order", names},
          {"tensors", std::move(tensors)}};
}

SequenceModel model_from_json(const json& doc) {
  try {
    auto model = SequenceModel::zeros(doc.at("input_dim").get<std::size_t>(), doc.at("hidden_dim").get<std::size_t>());
    auto views = model.tensors();
    const auto& names = SequenceModel::tensor_names();
    for (std::size_t i = 0; i < views.size(); ++i) {
      const auto values = doc.at("tensors").at(names[i]).get<std::vector<double>>();
      if (values.size() != views[i].size()) throw Error(Errc::kShapeMismatch, "tensor " + names[i] + " has wrong size");
      std::copy(values.begin(), values.end(), views[i].begin());
    }
    return model;
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, std::string("seqnet checkpoint: ") + e.what());
  }
}

}  // namespace scal::seqnet
