#pragma once

#include <cstdint>
#include <span>

namespace slip::stats {

struct Interval {
  double lo = 0;
  double hi = 0;
  bool contains(double x) const noexcept { return lo <= x && x <= hi; }
};

/// Wilson score interval for a binomial proportion.
Interval wilson(std::uint64_t successes, std::uint64_t trials, double z = 1.959963984540054);

/// Exact (Garwood) two-sided interval for a Poisson mean given one count.
Interval poisson_interval(std::uint64_t count, double confidence);

/// Upper-tail probability of a chi-square statistic.
double chi_square_sf(double statistic, double dof);

struct UniformityTest {
  double statistic = 0;
  double dof = 0;
  double p_value = 1;
};

/// Pearson goodness-of-fit against the uniform distribution on the bins.
UniformityTest chi_square_uniform(std::span<const std::uint64_t> counts);

/// Total variation distance between two histograms over the same bins.
double total_variation(std::span<const std::uint64_t> a,
                       std::span<const std::uint64_t> b);

}  // namespace slip::stats
