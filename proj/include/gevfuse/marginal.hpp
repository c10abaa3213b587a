#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include <Eigen/Dense>

#include "gevfuse/data.hpp"
#include "gevfuse/parallel.hpp"

namespace gevfuse {

/// Shape values with |xi| below this use the Gumbel limit.
inline constexpr double kGumbelThreshold = 1e-8;

/// GEV parameters. When `mu1` is set the location is
/// mu0 + mu1 * (t - t_ref); otherwise mu0 is the stationary location.
struct GevParams {
  double mu0 = 0.0;
  std::optional<double> mu1;
  double log_sigma = 0.0;
  double xi = 0.0;
  double t_ref = 2000.0;

  double sigma() const;
  double location(std::optional<double> t = std::nullopt) const;
};

double gev_cdf(double y, const GevParams& p, std::optional<double> t = std::nullopt);
double gev_logpdf(double y, const GevParams& p, std::optional<double> t = std::nullopt);

/// Quantile at probability `prob` in (0,1) at time t.
double gev_quantile(double prob, const GevParams& p,
                    std::optional<double> t = std::nullopt);

double sample_gev(Rng& rng, const GevParams& p, std::optional<double> t = std::nullopt);

/// Log-density and its partial derivatives with respect to the effective
/// location, log-scale and shape. `value` is -inf outside the support.
struct GevLogpdfTerms {
  double value;
  double d_location;
  double d_log_sigma;
  double d_xi;
};
GevLogpdfTerms gev_logpdf_terms(double y, double location, double log_sigma,
                                double xi);

/// T-year return level, using mu0 (the t_ref intercept) as location.
double return_level(double mu, double log_sigma, double xi, double T);
double return_level(const GevParams& p, double T);

/// (dr/dmu, dr/dlog_sigma, dr/dxi) of the T-year return level.
Eigen::Vector3d return_level_gradient(double mu, double log_sigma, double xi,
                                      double T);
Eigen::Vector3d return_level_gradient(const GevParams& p, double T);

struct GevFitOptions {
  bool nonstationary = false;
  double t_ref = 2000.0;
  /// Holds the trend slope at this value instead of estimating it.
  std::optional<double> fixed_mu1;
  bool compute_se = true;
  double xi_lower = -0.5;
  double xi_upper = 1.5;
  int restarts = 3;
  std::uint64_t seed = 0;
};

struct GevStandardErrors {
  double mu0 = 0.0;
  std::optional<double> mu1;
  double log_sigma = 0.0;
  double xi = 0.0;
};

struct GevFitResult {
  GevParams params;
  double nll = 0.0;
  bool converged = false;
  int n_used = 0;
  GevStandardErrors se;
  /// Present iff the fit is nonstationary.
  std::optional<double> t_ref;
};

/// Negative log-likelihood of (time, value) pairs.
double gev_nll(std::span<const double> times, std::span<const double> values,
               const GevParams& p);

/// Maximum-likelihood GEV fit on (time, value) pairs. Times may repeat
/// (bootstrap resamples). Throws DataError for fewer than 10 values or a
/// constant sample.
GevFitResult fit_gev(std::span<const double> times,
                     std::span<const double> values,
                     const GevFitOptions& options = {});

GevFitResult fit_gev(const AnnualMaximaSeries& series, bool nonstationary,
                     double t_ref = 2000.0);

struct TrendTestResult {
  long s_stat = 0;
  double z = 0.0;
  double p_value = 1.0;
  std::optional<double> sen_slope;
};

/// Mann-Kendall test with tie-corrected variance and continuity correction.
TrendTestResult mann_kendall(std::span<const double> values);

/// Median of all pairwise slopes.
double sen_slope(std::span<const double> years, std::span<const double> values);

/// Mann-Kendall plus Sen's slope for one series.
TrendTestResult trend_test(const AnnualMaximaSeries& series);

struct AdResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int n_boot_used = 0;
  int n_skipped = 0;
};

/// Anderson-Darling goodness of fit of `series` to `fit`, with a parametric
/// bootstrap p-value (each resample refit with the same model form).
AdResult ad_gof(const AnnualMaximaSeries& series, const GevFitResult& fit,
                int n_boot = 999, std::uint64_t seed = 0);

std::vector<double> years_as_times(const AnnualMaximaSeries& series);

/// Which sources get a trend in location during Stage 1.
struct Stage1Options {
  bool nonstationary_obs = true;
  bool nonstationary_sim = false;
  double t_ref = 2000.0;

  bool nonstationary_for(Source s) const {
    return s == Source::Obs ? nonstationary_obs : nonstationary_sim;
  }
};

/// Fits every site of `ds` (fits[i] belongs to ds.sites[i]).
std::vector<GevFitResult> fit_stage1(const Dataset& ds, const Stage1Options& options,
                                     int jobs = 1);

}  // namespace gevfuse
