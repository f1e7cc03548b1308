#include "scal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace scal::stats {

namespace {

void check_lengths(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::kLengthMismatch, "x and y differ in length");
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(Errc::kDegenerateInput, "correlation of a constant vector is undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double simpson(double a, double b, double fa, double fm, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

template <class F>
double adaptive(F& f, double a, double b, double fa, double fm, double fb, double whole, double tol, int depth,
                int level = 0) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = simpson(a, m, fa, flm, fm);
  const double right = simpson(m, b, fm, frm, fb);
  // A few forced levels keep a sharply peaked integrand from passing the
  // error test by coincidence on the coarsest grid.
  const bool converged = level >= 4 && std::abs(left + right - whole) <= 15.0 * tol;
  if (depth <= 0 || converged) return left + right + (left + right - whole) / 15.0;
  return adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, level + 1) +
         adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, level + 1);
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw Error(Errc::kInvalidArgument, "degrees of freedom must be positive");
  if (std::isnan(t)) throw Error(Errc::kInvalidArgument, "t statistic is NaN");
  const double a = std::abs(t);
  if (a == 0.0) return 1.0;
  if (std::isinf(a)) return 0.0;
  const double log_norm = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) - 0.5 * std::log(df * M_PI);
  auto density = [&](double x) { return std::exp(log_norm - 0.5 * (df + 1.0) * std::log1p(x * x / df)); };
  // Tail over [a, inf) mapped onto s in (0, 1] by x = a / s.
  auto integrand = [&](double s) { return s <= 0.0 ? 0.0 : density(a / s) * a / (s * s); };
  const double f0 = integrand(0.0), fm = integrand(0.5), f1 = integrand(1.0);
  const double whole = simpson(0.0, 1.0, f0, fm, f1);
  const double tail = adaptive(integrand, 0.0, 1.0, f0, fm, f1, whole, 1e-12, 40);
  return std::clamp(2.0 * tail, 0.0, 1.0);
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  check_lengths(x, y);
  if (x.size() < 3) throw Error(Errc::kDegenerateInput, "Spearman correlation needs n >= 3");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  SpearmanResult out;
  out.n = x.size();
  out.rho = pearson(rx, ry);
  const double df = static_cast<double>(out.n - 2);
  const double denom = 1.0 - out.rho * out.rho;
  out.p_value = denom <= 0.0 ? 0.0 : student_t_two_sided_p(out.rho * std::sqrt(df / denom), df);
  return out;
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  check_lengths(x, y);
  if (x.size() < 2) throw Error(Errc::kDegenerateInput, "linear fit needs n >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error(Errc::kDegenerateInput, "x is constant");
  if (syy == 0.0) throw Error(Errc::kDegenerateInput, "y is constant, R^2 undefined");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (fit.slope * x[i] + fit.intercept);
    ss_res += r * r;
  }
  fit.r_squared = 1.0 - ss_res / syy;
  return fit;
}

}  // namespace scal::stats
