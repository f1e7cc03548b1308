#include "doctest.h"

#include <cmath>
#include <random>

#include "scal/seqnet.hpp"

using namespace scal;
using namespace scal::seqnet;

namespace {

std::vector<Example> random_batch(std::uint64_t seed, std::size_t c, std::size_t k, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> label(0, c - 1);
  std::vector<Example> batch(n);
  for (auto& ex : batch) {
    ex.seq.assign(k, Vector(c));
    for (auto& v : ex.seq) {
      for (double& x : v) x = normal(rng);
    }
    ex.base_logits.resize(c);
    for (double& x : ex.base_logits) x = normal(rng);
    ex.target = label(rng);
  }
  return batch;
}

double max_abs_diff(const SequenceModel& a, const SequenceModel& b) {
  double m = 0.0;
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t t = 0; t < ta.size(); ++t) {
    for (std::size_t i = 0; i < ta[t].size(); ++i) m = std::max(m, std::abs(ta[t][i] - tb[t][i]));
  }
  return m;
}

}  // namespace

TEST_CASE("gru_forward") {
  const auto zero = SequenceModel::zeros(2, 4);
  const Sequence seq{{0.3, -1.0}, {2.0, 0.5}, {-0.7, 0.1}};
  for (const auto& h : gru_forward(zero.gru, seq)) CHECK(h == Vector(4, 0.0));

  const auto model = init_params(1, 2, 4);
  const auto one = gru_forward(model.gru, Sequence{seq[0]});
  const auto two = gru_forward(model.gru, Sequence{seq[0], seq[1]});
  CHECK(one[0] == two[0]);
  CHECK(gru_forward(model.gru, seq) == gru_forward(model.gru, seq));

  CHECK_THROWS_AS(gru_forward(model.gru, Sequence{{1.0, 2.0, 3.0}}), Error);
  CHECK_THROWS_AS(gru_forward(model.gru, Sequence{}), Error);
}

TEST_CASE("gru_forward matches a hand-evaluated cell") {
  auto m = SequenceModel::zeros(1, 1);
  m.gru.w_z(0, 0) = 0.5;
  m.gru.w_h(0, 0) = 1.0;
  m.gru.b_r[0] = 0.2;
  const auto h = gru_forward(m.gru, Sequence{{2.0}});
  const double z = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(h[0][0] == doctest::Approx(z * std::tanh(2.0)).epsilon(1e-15));
}

TEST_CASE("decode_adjustment") {
  auto dec = SequenceModel::zeros(2, 2).decoder;
  dec.b_out = {0.3, -0.2};
  CHECK(decode_adjustment(dec, Vector{5.0, 7.0}) == dec.b_out);

  dec.w_out(0, 0) = 1.0;
  dec.w_out(1, 1) = 1.0;
  dec.b_out = {0.0, 0.0};
  CHECK(decode_adjustment(dec, Vector{1.0, 0.0}) == Vector{1.0, 0.0});

  auto rnd = init_params(4, 3, 5).decoder;
  rnd.b_out = {0.1, 0.2, 0.3};
  const Vector h{0.2, -0.4, 0.9, 0.0, 0.3};
  Vector h2;
  for (double v : h) h2.push_back(2.0 * v);
  const auto a = decode_adjustment(rnd, h);
  const auto a2 = decode_adjustment(rnd, h2);
  for (std::size_t c = 0; c < 3; ++c) CHECK((a2[c] - rnd.b_out[c]) == doctest::Approx(2.0 * (a[c] - rnd.b_out[c])));
}

TEST_CASE("softmax_cross_entropy") {
  const auto even = softmax_cross_entropy(Vector{0.0, 0.0}, 0);
  CHECK(std::abs(even.loss - std::log(2.0)) <= 1e-12);
  CHECK(even.grad[0] == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(even.grad[1] == doctest::Approx(0.5).epsilon(1e-15));

  const auto sharp = softmax_cross_entropy(Vector{10.0, -10.0}, 0);
  CHECK(sharp.loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
  CHECK(sharp.loss == doctest::Approx(2.06e-9).epsilon(1e-2));
  CHECK(sharp.grad[1] == doctest::Approx(2.06e-9).epsilon(1e-2));
  CHECK(sharp.grad[0] == doctest::Approx(-2.06e-9).epsilon(1e-2));

  const Vector logits{0.3, -1.2, 2.5};
  const auto base = softmax_cross_entropy(logits, 2);
  const auto shifted = softmax_cross_entropy(Vector{100.3, 98.8, 102.5}, 2);
  CHECK(std::abs(base.loss - shifted.loss) <= 1e-12);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(base.grad[i] - shifted.grad[i]) <= 1e-12);
}

TEST_CASE("backward") {
  const auto model = init_params(7, 3, 6);
  auto batch = random_batch(8, 3, 4, 5);

  SUBCASE("duplicating the batch leaves the mean gradient unchanged") {
    auto doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    const auto g1 = backward(model, batch);
    const auto g2 = backward(model, doubled);
    CHECK(max_abs_diff(g1.grads, g2.grads) <= 1e-12);
    CHECK(std::abs(g1.loss - batch_loss(model, batch)) <= 1e-12);
  }

  SUBCASE("balanced symmetric batch gives zero decoder-bias gradient at zero params") {
    const auto zero = SequenceModel::zeros(2, 4);
    std::vector<Example> sym{{{{0.4, -0.4}}, {0.0, 0.0}, 0}, {{{-0.4, 0.4}}, {0.0, 0.0}, 1}};
    const auto g = backward(zero, sym);
    for (double v : g.grads.decoder.b_out) CHECK(std::abs(v) <= 1e-10);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(backward(model, std::vector<Example>{}), Error);
    batch[0].base_logits.push_back(0.0);
    CHECK_THROWS_AS(backward(model, batch), Error);
  }
}

TEST_CASE("finite differences agree with backward") {
  for (std::size_t c : {2, 3}) {
    for (std::size_t h : {4, 32}) {
      for (std::size_t k : {1, 3, 5}) {
        const auto model = init_params(100 + c * h + k, c, h);
        const auto batch = random_batch(200 + k, c, k, 4);
        const auto report = finite_diff_check(model, batch, 1e-5, 200, 3);
        CAPTURE(c);
        CAPTURE(h);
        CAPTURE(k);
        CHECK(report.coordinates_checked >= std::min<std::size_t>(200, model.parameter_count()));
        CHECK(report.max_rel_error < 1e-4);
      }
    }
  }
}

TEST_CASE("finite-difference error does not blow up when eps is halved") {
  const auto model = init_params(5, 2, 4);
  const auto batch = random_batch(6, 2, 3, 3);
  // Large enough that truncation, not rounding, dominates the error.
  const auto coarse = finite_diff_check(model, batch, 1e-2, 500, 1);
  const auto fine = finite_diff_check(model, batch, 5e-3, 500, 1);
  CHECK(fine.max_rel_error <= 4.0 * coarse.max_rel_error + 1e-9);
}

TEST_CASE("adam_step") {
  std::vector<double> theta{0.0, 2.0, 2.0};
  const std::vector<double> grad{1.0, 0.5, 0.5};
  std::vector<std::span<double>> params{theta};
  std::vector<std::span<const double>> grads{grad};
  auto state = AdamState::for_tensors(std::vector<std::span<const double>>{theta});
  adam_step(params, grads, state, 0.1);
  CHECK(state.step == 1);
  CHECK(theta[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(theta[1] == theta[2]);

  std::vector<double> still{0.5, -0.5};
  const std::vector<double> zero(2, 0.0);
  std::vector<std::span<double>> p2{still};
  std::vector<std::span<const double>> g2{zero};
  auto s2 = AdamState::for_tensors(std::vector<std::span<const double>>{still});
  adam_step(p2, g2, s2, 0.1);
  CHECK(still == std::vector<double>{0.5, -0.5});

  const std::vector<double> wrong(3, 0.0);
  std::vector<std::span<const double>> bad{wrong};
  CHECK_THROWS_AS(adam_step(p2, bad, s2, 0.1), Error);
}

TEST_CASE("init_params") {
  const auto a = init_params(3, 2, 8);
  CHECK(a == init_params(3, 2, 8));
  CHECK_FALSE(a == init_params(4, 2, 8));
  auto within = [](const Matrix& m, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    return std::all_of(m.data.begin(), m.data.end(), [&](double v) { return std::abs(v) <= bound; });
  };
  CHECK(within(a.gru.w_z, 2));
  CHECK(within(a.gru.w_h, 2));
  CHECK(within(a.gru.u_r, 8));
  CHECK(within(a.decoder.w_out, 8));
  CHECK(a.gru.b_z == Vector(8, 0.0));
  CHECK(a.decoder.b_out == Vector(2, 0.0));
}

TEST_CASE("full-batch training descends and is deterministic") {
  const auto batch = random_batch(31, 2, 3, 64);
  TrainConfig cfg;
  cfg.batch_size = 0;
  cfg.learning_rate = 1e-3;
  cfg.hidden_dim = 8;
  auto model = init_params(cfg.seed, 2, cfg.hidden_dim);
  auto again = model;
  const double start = batch_loss(model, batch);
  const auto report = train(model, batch, cfg);
  REQUIRE(report.epoch_loss.size() == cfg.epochs);
  for (std::size_t i = 20; i < report.epoch_loss.size(); ++i) {
    CHECK(report.epoch_loss[i] <= report.epoch_loss[i - 20] * 1.05);
  }
  CHECK(report.epoch_loss.back() < start);

  train(again, batch, cfg);
  CHECK(again == model);
}

TEST_CASE("minibatch training is deterministic in the seed") {
  const auto batch = random_batch(12, 3, 2, 40);
  TrainConfig cfg{.epochs = 5, .learning_rate = 1e-3, .hidden_dim = 4, .batch_size = 8, .seed = 9};
  auto a = init_params(1, 3, 4);
  auto b = a;
  train(a, batch, cfg);
  train(b, batch, cfg);
  CHECK(a == b);

  TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(train(a, batch, bad), Error);
  CHECK_THROWS_AS(train(a, std::vector<Example>{}, cfg), Error);
}

TEST_CASE("checkpoint round trip") {
  const auto m = init_params(21, 3, 5);
  const auto doc = model_to_json(m);
  CHECK(doc.at("tensors").at("w_z").size() == 15);
  CHECK(model_from_json(nlohmann::json::parse(doc.dump())) == m);
  auto broken = doc;
  broken["tensors"]["b_out"] = {1.0};
  CHECK_THROWS_AS(model_from_json(broken), Error);
}
