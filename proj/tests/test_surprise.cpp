#include "doctest.h"

#include <cmath>

#include "scal/surprise.hpp"

using namespace scal;
using namespace scal::surprise;

namespace {

Episode three_demo_episode() {
  Episode ep;
  ep.id = "e";
  ep.demos = {{"a", 0}, {"b", 1}, {"c", 1}};
  ep.query = {"q", 0};
  ep.demo_dists = {LabelDistribution::from_probs({0.5, 0.5}), LabelDistribution::from_probs({0.3, 0.7}),
                   LabelDistribution::from_probs({0.9, 0.1})};
  ep.query_dist = LabelDistribution::from_probs({0.6, 0.4});
  return ep;
}

}  // namespace

TEST_CASE("surprise_vector follows the signed-log formula") {
  const auto s = surprise_vector(LabelDistribution::from_probs({0.3, 0.7}), 1);
  CHECK(s.values[0] == doctest::Approx(-1.203973).epsilon(1e-6));
  CHECK(s.values[1] == doctest::Approx(0.356675).epsilon(1e-6));
  CHECK(s.values[0] == std::log(0.3));
  CHECK(s.values[1] == -std::log(0.7));

  const auto u = surprise_vector(LabelDistribution::from_probs({0.5, 0.5}), 0);
  CHECK(u.values[0] == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(u.values[1] == doctest::Approx(-0.693147).epsilon(1e-6));

  const double eps = 1e-6;
  const auto sure = surprise_vector(LabelDistribution::from_probs({1.0 - eps, eps}), 0);
  CHECK(sure.values[0] == doctest::Approx(eps).epsilon(1e-5));
  CHECK(sure.values[1] < -13.0);
}

TEST_CASE("true-label entry is nonnegative, others nonpositive") {
  const auto dist = LabelDistribution::from_probs({0.1, 0.25, 0.65});
  for (LabelIndex y = 0; y < 3; ++y) {
    const auto s = surprise_vector(dist, y);
    for (std::size_t c = 0; c < 3; ++c) {
      if (c == y) {
        CHECK(s.values[c] == -std::log(dist[c]));
        CHECK(s.values[c] >= 0.0);
      } else {
        CHECK(s.values[c] <= 0.0);
      }
    }
  }
}

TEST_CASE("build_sequence") {
  auto ep = three_demo_episode();
  const auto seq = build_sequence(ep);
  REQUIRE(seq.length() == 3);
  CHECK(seq.num_classes() == 2);
  CHECK(seq.true_query_label == std::optional<LabelIndex>(0));
  for (std::size_t j = 0; j < 3; ++j) CHECK(seq.vectors[j] == surprise_vector(ep.demo_dists[j], *ep.demos[j].label));

  std::swap(ep.demos[0], ep.demos[2]);
  std::swap(ep.demo_dists[0], ep.demo_dists[2]);
  const auto swapped = build_sequence(ep);
  CHECK(swapped.vectors[0] == seq.vectors[2]);
  CHECK(swapped.vectors[2] == seq.vectors[0]);

  Episode empty;
  try {
    build_sequence(empty);
    FAIL("expected EmptyContext");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::kEmptyContext);
  }
}

TEST_CASE("binarize_magnitude") {
  SurpriseSequence seq{{{{-1.204, 0.357}}, {{0.0, -5.0}}}, std::nullopt};
  const auto bin = binarize_magnitude(seq);
  CHECK(bin.vectors[0].values == std::vector<double>{-1.0, 1.0});
  CHECK(bin.vectors[1].values == std::vector<double>{1.0, -1.0});
  CHECK(binarize_magnitude(bin) == bin);
}

TEST_CASE("training_record layout") {
  const auto rec = training_record(three_demo_episode());
  CHECK(rec.at("id") == "e");
  CHECK(rec.at("seq").size() == 3);
  CHECK(rec.at("seq")[1][1].get<double>() == -std::log(0.7));
  CHECK(rec.at("query_label") == 0);
  CHECK(rec.at("query_dist")[0].get<double>() == 0.6);
}
