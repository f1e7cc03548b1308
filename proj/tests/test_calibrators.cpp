#include "doctest.h"

#include <cmath>
#include <random>

#include "scal/bayessim.hpp"
#include "scal/calibrators.hpp"

using namespace scal;
using namespace scal::calib;

namespace {

template <class Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return Errc::kInvalidArgument;
}

LabelDistribution dist(std::vector<double> p) { return LabelDistribution::from_probs(std::move(p)); }

// Plain softmax written out for two or more logits.
std::vector<double> ref_softmax(const std::vector<double>& z) {
  double s = 0.0;
  for (double v : z) s += std::exp(v);
  std::vector<double> out;
  for (double v : z) out.push_back(std::exp(v) / s);
  return out;
}

bayessim::ConceptModel biased_model(double bias, std::uint64_t seed, double concentration = 1.0) {
  bayessim::SyntheticTaskConfig cfg;
  cfg.bias_strength = bias;
  cfg.concentration = concentration;
  cfg.seed = seed;
  return bayessim::generate_task(cfg);
}

std::vector<Demonstration> labeled_pool(std::size_t n, std::size_t num_classes) {
  std::vector<Demonstration> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back({bayessim::input_text(i % 16), i % num_classes});
  return pool;
}

}  // namespace

TEST_CASE("method names and counts") {
  for (auto m : {Method::kIcl, Method::kBc, Method::kLinc, Method::kCcPlus, Method::kBcPlus, Method::kLincPlus,
                 Method::kSc}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK(code_of([] { parse_method("platt"); }) == Errc::kUnknownMethod);

  CHECK(count_inferences(Method::kSc, 100, 500, 0) == 600);
  CHECK(count_inferences(Method::kLinc, 100, 500, 0) == 600);
  CHECK(count_inferences(Method::kBc, 100, 500, 0) == 500);
  CHECK(count_inferences(Method::kIcl, 100, 500, 0) == 500);
  CHECK(count_inferences(Method::kCcPlus, 100, 500, 0) == 1500);
  CHECK(count_inferences(Method::kBcPlus, 100, 500, 10) == 5000);
  CHECK(count_inferences(Method::kLincPlus, 100, 500, 10) == 5000);
}

TEST_CASE("sc_calibrate") {
  const auto orig = dist({0.4, 0.6});
  const std::vector<double> a{0.5, -0.5};
  const auto cal = sc_calibrate(orig, a);
  const auto ref = ref_softmax({std::log(0.4) + 0.5, std::log(0.6) - 0.5});
  CHECK(cal[0] == doctest::Approx(ref[0]).epsilon(1e-12));
  CHECK(cal[1] == doctest::Approx(ref[1]).epsilon(1e-12));
  CHECK(std::abs(cal[0] - 0.644430) < 5e-5);
  CHECK(argmax_label(orig) == 1);
  CHECK(argmax_label(cal) == 0);

  const std::vector<double> zero{0.0, 0.0};
  const auto same = sc_calibrate(orig, zero);
  CHECK(std::abs(same[0] - 0.4) < 1e-12);

  const std::vector<double> shifted{3.5, 2.5};
  const auto cal2 = sc_calibrate(orig, shifted);
  CHECK(std::abs(cal2[0] - cal[0]) < 1e-12);

  const std::vector<double> wrong{1.0};
  CHECK(code_of([&] { sc_calibrate(orig, wrong); }) == Errc::kShapeMismatch);
}

TEST_CASE("bc_estimate and apply_prior") {
  const std::vector<LabelDistribution> same(4, dist({0.8, 0.2}));
  const auto est = bc_estimate(same);
  const double mid = 0.5 * (std::log(0.8) + std::log(0.2));
  CHECK(est.log_prior[0] == doctest::Approx(std::log(0.8) - mid).epsilon(1e-12));
  CHECK(est.log_prior[1] == doctest::Approx(std::log(0.2) - mid).epsilon(1e-12));
  CHECK(est.sample_count == 4);

  // Removing a batch's own prior from one of its members makes it uniform.
  const auto flat = apply_prior(same.front(), est);
  CHECK(flat[0] == doctest::Approx(0.5).epsilon(1e-12));

  const std::vector<LabelDistribution> balanced{dist({0.9, 0.1}), dist({0.1, 0.9})};
  const auto zero = bc_estimate(balanced);
  CHECK(std::abs(zero.log_prior[0]) < 1e-12);
  CHECK(std::abs(zero.log_prior[1]) < 1e-12);
  const auto unchanged = apply_prior(dist({0.3, 0.7}), zero);
  CHECK(unchanged[0] == doctest::Approx(0.3).epsilon(1e-12));

  const std::vector<LabelDistribution> one{dist({0.2, 0.3, 0.5})};
  const auto single = bc_estimate(one);
  const double m3 = (std::log(0.2) + std::log(0.3) + std::log(0.5)) / 3.0;
  CHECK(single.log_prior[2] == doctest::Approx(std::log(0.5) - m3).epsilon(1e-12));

  CHECK(code_of([] { bc_estimate(std::span<const LabelDistribution>{}); }) == Errc::kEmptyBatch);
  CHECK(code_of([&] { apply_prior(dist({0.2, 0.3, 0.5}), est); }) == Errc::kShapeMismatch);
}

TEST_CASE("bc in probability space") {
  const std::vector<LabelDistribution> batch{dist({0.7, 0.3}), dist({0.9, 0.1})};
  const auto est = bc_estimate(batch, PriorSpace::kProb);
  CHECK(est.mean_probs[0] == doctest::Approx(0.8).epsilon(1e-12));
  const auto cal = apply_prior(dist({0.6, 0.4}), est);
  const auto ref = ref_softmax({0.6 - 0.8, 0.4 - 0.2});
  CHECK(cal[0] == doctest::Approx(ref[0]).epsilon(1e-12));
  CHECK(parse_prior_space("prob") == PriorSpace::kProb);
  CHECK(code_of([] { parse_prior_space("logit"); }) == Errc::kConfigError);
}

TEST_CASE("cc_plus_estimate uses three content-free queries") {
  const auto model = biased_model(0.8, 3);
  backends::OracleBackend oracle(model);
  backends::CallCounter counter;
  backends::CountingBackend counted(oracle, counter, "cc+");
  const std::vector<Demonstration> context{{"input_1", 1}, {"input_4", 0}, {"input_9", 1}};
  const auto labels = LabelSpace::generic(2);
  const auto est = cc_plus_estimate(counted, PromptTemplate{}, context, labels);
  CHECK(counter.logical() == 3);

  // Content-free inputs see the context's exact class prior.
  const auto prior = bayessim::class_prior(bayessim::posterior_after(model, oracle.observations(context)), model);
  const double mid = 0.5 * (std::log(prior[0]) + std::log(prior[1]));
  CHECK(est.log_prior[0] == doctest::Approx(std::log(prior[0]) - mid).epsilon(1e-12));
  CHECK(est.log_prior[1] == doctest::Approx(std::log(prior[1]) - mid).epsilon(1e-12));
}

TEST_CASE("LinC") {
  const auto id = LinCModel::identity(3);
  const auto d = dist({0.2, 0.3, 0.5});
  const auto out = linc_apply(id, d);
  for (std::size_t c = 0; c < 3; ++c) CHECK(out[c] == doctest::Approx(d[c]).epsilon(1e-12));

  LinCModel shifted = LinCModel::identity(2);
  shifted.b = {1.0, 0.0};
  const auto s = linc_apply(shifted, dist({0.5, 0.5}));
  CHECK(s[0] == doctest::Approx(ref_softmax({1.0, 0.0})[0]).epsilon(1e-12));

  // Every example labeled 0 while the inputs lean to 1: training must move mass to 0.
  std::vector<LabelDistribution> xs;
  std::vector<LabelIndex> ys;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.55, 0.9);
  for (int i = 0; i < 40; ++i) {
    const double p = u(rng);
    xs.push_back(dist({1.0 - p, p}));
    ys.push_back(0);
  }
  seqnet::TrainConfig cfg;
  cfg.learning_rate = 0.05;
  const auto trained = linc_train(xs, ys, cfg);
  std::size_t zeros = 0;
  for (const auto& x : xs) zeros += argmax_label(linc_apply(trained, x)) == 0;
  CHECK(zeros == xs.size());

  const auto back = linc_from_json(linc_to_json(trained));
  CHECK(back.w.data == trained.w.data);
  CHECK(back.b == trained.b);

  CHECK(code_of([&] { linc_train({}, {}, cfg); }) == Errc::kEmptyTrainingSet);
  const std::vector<LabelIndex> short_ys{0};
  CHECK(code_of([&] { linc_train(xs, short_ys, cfg); }) == Errc::kLengthMismatch);
}

TEST_CASE("support selection and BC+ / LinC+") {
  const auto pool = labeled_pool(40, 2);
  const auto support = select_support(pool, 2, 11);
  REQUIRE(support.size() == 2 * kSupportPerClass);
  for (std::size_t i = 0; i < support.size(); ++i) CHECK(*support[i].label == i / kSupportPerClass);
  CHECK(select_support(pool, 2, 11) == support);

  const auto few = labeled_pool(6, 2);
  CHECK(code_of([&] { select_support(few, 2, 0); }) == Errc::kInsufficientSupport);

  const auto model = biased_model(0.8, 4);
  backends::OracleBackend oracle(model);
  backends::CallCounter counter;
  backends::CountingBackend counted(oracle, counter, "bc+");
  const std::vector<Demonstration> context{{"input_2", 0}, {"input_3", 1}};
  const auto labels = LabelSpace::generic(2);
  const auto est = bc_plus_estimate(counted, PromptTemplate{}, context, support, labels);
  CHECK(counter.logical() == support.size());

  // Same estimate assembled by hand from direct fetches.
  std::vector<LabelDistribution> direct;
  for (const auto& s : support) direct.push_back(oracle.fetch_query(PromptTemplate{}, context, s.text, labels));
  const auto manual = bc_estimate(direct);
  CHECK(est.log_prior[0] == doctest::Approx(manual.log_prior[0]).epsilon(1e-12));

  backends::CallCounter counter2;
  backends::CountingBackend counted2(oracle, counter2, "linc+");
  linc_plus_model(counted2, PromptTemplate{}, context, support, labels, seqnet::TrainConfig{});
  CHECK(counter2.logical() == support.size());
}

TEST_CASE("sc_train errors and checkpoint") {
  seqnet::TrainConfig cfg;
  cfg.epochs = 5;
  cfg.hidden_dim = 4;
  CHECK(code_of([&] { sc_train(std::span<const Episode>{}, cfg); }) == Errc::kEmptyTrainingSet);

  const auto model = biased_model(0.5, 2);
  std::mt19937_64 rng(1);
  std::vector<Episode> train;
  for (int i = 0; i < 10; ++i) train.push_back(bayessim::sample_episode(model, 3, rng, "e" + std::to_string(i)));
  auto other = train;
  other.back().labels = LabelSpace::make({"neg", "pos"}, {"neg", "pos"});
  CHECK(code_of([&] { sc_train(other, cfg); }) == Errc::kLabelSpaceMismatch);

  seqnet::TrainConfig zero = cfg;
  zero.epochs = 0;
  CHECK(code_of([&] { sc_train(train, zero); }) == Errc::kConfigError);

  const auto sc = sc_train(train, cfg);
  const auto back = sc_from_json(sc_to_json(sc));
  const auto seq = surprise::build_sequence(train.front());
  CHECK(sc_adjust(back, seq) == sc_adjust(sc, seq));
  CHECK(sc_train(train, cfg).net.tensors().front().size() == sc.net.tensors().front().size());

  auto zero_shot = train.front();
  zero_shot.demos.clear();
  zero_shot.demo_dists.clear();
  CHECK(code_of([&] { sc_example(zero_shot, false); }) == Errc::kEmptyContext);
}

TEST_CASE("sc does not hurt an already accurate oracle") {
  // Sharp, unbiased tables: the oracle is right on most queries already.
  const auto model = biased_model(0.0, 21, 0.05);
  std::mt19937_64 rng(21);
  std::vector<Episode> train, test;
  for (int i = 0; i < 200; ++i) train.push_back(bayessim::sample_episode(model, 3, rng, "tr"));
  for (int i = 0; i < 300; ++i) test.push_back(bayessim::sample_episode(model, 3, rng, "te"));
  seqnet::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  const auto sc = sc_train(train, cfg);
  int icl = 0, cal = 0;
  for (const auto& e : test) {
    icl += argmax_label(e.query_dist) == *e.query.label;
    cal += argmax_label(sc_calibrate(e.query_dist, sc_adjust(sc, surprise::build_sequence(e)))) == *e.query.label;
  }
  CHECK(icl >= 0.8 * 300);
  CHECK(cal >= icl - 3);  // one point of 300
}
