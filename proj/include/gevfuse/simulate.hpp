#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/data.hpp"
#include "gevfuse/lmc.hpp"
#include "gevfuse/parallel.hpp"
#include "gevfuse/stack.hpp"

namespace gevfuse {

/// Draws the latent field at `sites`: row l is theta(s_l) = beta + A delta(s_l)
/// with each delta_i a unit-variance exponential process of range rho_i.
Eigen::MatrixXd simulate_latent(const LmcParams& p, const Eigen::MatrixXd& site_dist,
                                Rng& rng);

/// Stack mode: latent field, partial observation by source, plus noise
/// N(0, w) on the stacked rows (no noise when `w` is null). Sites are
/// stacked canonically; `w` must be in that row order.
StackedObservations simulate_stack(const LmcParams& p, const std::vector<Site>& sites,
                                   const Eigen::MatrixXd* w, std::uint64_t seed);

/// Same, reusing a precomputed square root of W (w = root * root^T).
StackedObservations simulate_stack_with_root(const LmcParams& p,
                                             const std::vector<Site>& sites,
                                             const Eigen::MatrixXd* w_root,
                                             std::uint64_t seed);

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped to 0).
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

struct FullModeOptions {
  int n_years = 43;
  int first_year = 1979;
  /// Linear location trend (units/yr) added at OBS sites, centred on t_ref.
  double obs_trend = 0.0;
  double t_ref = 2000.0;
};

/// Full mode: latent field, then annual maxima sampled from each site's GEV
/// (its own source's parameters) so that Stage 1 runs on real samples.
Dataset simulate_full(const LmcParams& p, const std::vector<Site>& sites,
                      const FullModeOptions& options, std::uint64_t seed);

/// A synthetic Atlantic/Gulf coastline with `n_obs` gauges interleaved among
/// `n_sim` model nodes. Ids sort in along-coast order within each source.
std::vector<Site> coastal_design(int n_obs = 29, int n_sim = 100);

/// Two-source truth with strong cross-source coupling: cross-source
/// correlations (0.995, 0.443, 0.837) for (mu, log sigma, xi).
LmcParams reference_truth();

struct SyntheticNoise {
  /// Stage-1 standard errors of (mu, log sigma, xi) per source.
  Eigen::Vector3d obs_se{0.06, 0.12, 0.20};
  Eigen::Vector3d sim_se{0.05, 0.11, 0.17};
  /// Within-site correlations (mu-logsigma, mu-xi, logsigma-xi).
  Eigen::Vector3d within{0.3, -0.25, -0.4};
  /// Peak same-source cross-site correlation, tapered over `range_km`.
  double cross_site = 0.3;
  double range_km = 300.0;
};

/// A plausible measurement covariance for `stack`: sites of different
/// sources are uncorrelated; same-source sites correlate with Wendland decay.
Eigen::MatrixXd synthetic_measurement_cov(const StackedObservations& stack,
                                          const SyntheticNoise& noise = {});

}  // namespace gevfuse
