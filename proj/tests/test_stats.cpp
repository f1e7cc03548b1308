#include "doctest.h"

#include <cmath>
#include <random>

#include <boost/math/distributions/students_t.hpp>

#include "scal/stats.hpp"

using namespace scal;
using namespace scal::stats;

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

double boost_two_sided(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace

TEST_CASE("average ranks") {
  const std::vector<double> v{10.0, 30.0, 20.0, 30.0};
  CHECK(average_ranks(v) == std::vector<double>{1.0, 3.5, 2.0, 3.5});
}

TEST_CASE("spearman examples") {
  const std::vector<double> x{1, 2, 3};
  const std::vector<double> up{10, 20, 30};
  const std::vector<double> mixed{3, 1, 2};
  CHECK(spearman(x, up).rho == 1.0);
  CHECK(spearman(x, up).p_value == 0.0);
  CHECK(spearman(x, mixed).rho == -0.5);
  const std::vector<double> down{-1, -2, -3};
  CHECK(spearman(x, down).rho == -1.0);

  const std::vector<double> flat{4, 4, 4};
  CHECK(code_of([&] { spearman(x, flat); }) == Errc::kDegenerateInput);
  const std::vector<double> two{1, 2};
  CHECK(code_of([&] { spearman(x, two); }) == Errc::kLengthMismatch);
  CHECK(code_of([&] { spearman(two, two); }) == Errc::kDegenerateInput);
}

TEST_CASE("spearman against the textbook d^2 formula and a t-distribution oracle") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + 3 * static_cast<std::size_t>(trial);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = g(rng);
      y[i] = 0.5 * x[i] + g(rng);
    }
    const auto r = spearman(x, y);
    // No ties with continuous draws, so 1 - 6 sum d^2 / (n (n^2 - 1)) applies.
    const auto rx = average_ranks(x), ry = average_ranks(y);
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    const double nn = static_cast<double>(n);
    CHECK(r.rho == doctest::Approx(1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0))).epsilon(1e-12));

    const double df = nn - 2.0;
    const double t = r.rho * std::sqrt(df / (1.0 - r.rho * r.rho));
    CHECK(std::abs(r.p_value - boost_two_sided(t, df)) < 1e-6);
  }
}

TEST_CASE("student t tail") {
  for (double df : {1.0, 2.0, 5.0, 30.0, 198.0}) {
    for (double t : {0.0, 0.3, 1.0, 2.5, 6.0, 40.0}) {
      CHECK(std::abs(student_t_two_sided_p(t, df) - boost_two_sided(t, df)) < 1e-9);
    }
  }
}

TEST_CASE("spearman rank invariance") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  std::vector<double> x(30), y(30), fx(30), gy(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = u(rng);
    y[i] = x[i] + u(rng);
    fx[i] = std::exp(x[i]);
    gy[i] = std::pow(y[i], 3.0) - 7.0;
  }
  const auto a = spearman(x, y), b = spearman(fx, gy);
  CHECK(a.rho == b.rho);
  CHECK(a.p_value == b.p_value);
}

TEST_CASE("linear fit") {
  const std::vector<double> x{0, 1, 2, 3, 4};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 1.0);
  const auto fit = linear_fit(x, y);
  CHECK(fit.slope == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit.intercept == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.r_squared == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<double> flat(5, 3.0);
  CHECK(code_of([&] { linear_fit(x, flat); }) == Errc::kDegenerateInput);
  CHECK(code_of([&] { linear_fit(flat, x); }) == Errc::kDegenerateInput);
  const std::vector<double> one{1.0};
  CHECK(code_of([&] { linear_fit(one, one); }) == Errc::kDegenerateInput);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::vector<double> nx, ny;
  for (int i = 0; i < 200; ++i) {
    nx.push_back(u(rng));
    ny.push_back(nx.back() + noise(rng));
  }
  const auto noisy = linear_fit(nx, ny);
  CHECK(noisy.slope >= 0.8);
  CHECK(noisy.slope <= 1.2);
  CHECK(noisy.r_squared > 0.8);
}
