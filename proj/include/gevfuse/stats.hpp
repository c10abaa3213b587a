#pragma once

#include <span>
#include <vector>

namespace gevfuse::stats {

double normal_cdf(double z);

/// Sample median (average of the two middle values for even sizes).
double median(std::vector<double> v);

/// Linear-interpolation quantile (type 7), q in [0, 1].
double quantile(std::vector<double> v, double q);

double mean(std::span<const double> v);

/// Sample standard deviation with n-1 denominator; 0 for fewer than 2 values.
double sd(std::span<const double> v);

/// Survival function of the Kolmogorov limiting distribution, P(K > x).
double kolmogorov_sf(double x);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// One-sample Kolmogorov-Smirnov test of values in [0,1] against U(0,1).
/// The p-value uses Stephens' small-sample scaling of the limiting law.
KsResult ks_uniform(std::vector<double> u);

/// Anderson-Darling A^2 of probability-integral-transformed values against
/// U(0,1). Values are clamped into (0,1) to keep the logarithms finite.
double anderson_darling(std::vector<double> u);

}  // namespace gevfuse::stats
