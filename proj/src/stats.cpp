#include "slip/stats.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace slip::stats {

Interval wilson(std::uint64_t successes, std::uint64_t trials, double z) {
  if (trials == 0) return {0, 1};
  const double n = static_cast<double>(trials);
  const double phat = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1 + z2 / n;
  const double centre = (phat + z2 / (2 * n)) / denom;
  const double half =
      z * std::sqrt(phat * (1 - phat) / n + z2 / (4 * n * n)) / denom;
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half),
          successes == trials ? 1.0 : std::min(1.0, centre + half)};
}

Interval poisson_interval(std::uint64_t count, double confidence) {
  using boost::math::chi_squared;
  using boost::math::quantile;
  const double alpha = 1 - confidence;
  const double k = static_cast<double>(count);
  const double lo =
      count == 0 ? 0.0 : quantile(chi_squared(2 * k), alpha / 2) / 2;
  const double hi = quantile(chi_squared(2 * k + 2), 1 - alpha / 2) / 2;
  return {lo, hi};
}

double chi_square_sf(double statistic, double dof) {
  if (dof <= 0) throw std::invalid_argument("chi-square needs dof > 0");
  if (statistic <= 0) return 1.0;
  return boost::math::cdf(
      boost::math::complement(boost::math::chi_squared(dof), statistic));
}

UniformityTest chi_square_uniform(std::span<const std::uint64_t> counts) {
  if (counts.size() < 2) throw std::invalid_argument("need at least two bins");
  const double total = static_cast<double>(
      std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
  if (total == 0) throw std::invalid_argument("empty histogram");
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0;
  for (std::uint64_t c : counts) {
    const double diff = static_cast<double>(c) - expected;
    stat += diff * diff / expected;
  }
  const double dof = static_cast<double>(counts.size() - 1);
  return {stat, dof, chi_square_sf(stat, dof)};
}

double total_variation(std::span<const std::uint64_t> a,
                       std::span<const std::uint64_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("bin count mismatch");
  const double na = static_cast<double>(
      std::accumulate(a.begin(), a.end(), std::uint64_t{0}));
  const double nb = static_cast<double>(
      std::accumulate(b.begin(), b.end(), std::uint64_t{0}));
  if (na == 0 || nb == 0) throw std::invalid_argument("empty histogram");
  double tv = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    tv += std::abs(static_cast<double>(a[i]) / na - static_cast<double>(b[i]) / nb);
  return tv / 2;
}

}  // namespace slip::stats
