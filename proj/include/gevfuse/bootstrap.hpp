#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/data.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/stack.hpp"

namespace gevfuse {

/// Stage-1 measurement-error covariance of the stacked estimates, held fixed
/// during Stage 2.
struct MeasurementCov {
  Eigen::MatrixXd w;
  double taper_km = 300.0;
  int b_replicates = 0;
  bool repaired = false;
  std::uint64_t seed = 0;
  std::uint64_t layout_hash = 0;
};

struct BootstrapReplicates {
  /// One row per surviving replicate, columns in stack row order.
  Eigen::MatrixXd rows;
  int n_requested = 0;
  int n_dropped = 0;
};

/// Year indices drawn for one replicate, per source (indices into the
/// source's sorted union of years).
struct YearDraw {
  std::vector<int> obs_years;
  std::vector<int> sim_years;
};

/// Sorted union of the years observed at sites of `source`.
std::vector<int> source_years(const Dataset& ds, Source source);

/// Refits Stage 1 at every site on the resampled (year, value) pairs and
/// returns the replicate in canonical stack order, or nothing if any site
/// fails (fewer than 10 values, degenerate, or unconverged).
std::optional<Eigen::VectorXd> bootstrap_replicate(const Dataset& ds,
                                                   const Stage1Options& options,
                                                   const YearDraw& draw,
                                                   std::uint64_t seed = 0);

/// Block bootstrap of years: within each source one draw (with replacement)
/// is shared by all its sites; sources are drawn independently. Replicate b
/// uses an RNG stream derived from (seed, b), so results do not depend on
/// `jobs`. Throws FitError when more than 20% of replicates are dropped.
BootstrapReplicates block_bootstrap_stage1(const Dataset& ds,
                                           const Stage1Options& options, int B,
                                           std::uint64_t seed, int jobs = 1);

/// Wendland C4 taper psi(d / lambda); zero for d >= lambda.
double wendland_c4(double d, double lambda);

struct SpdRepair {
  Eigen::MatrixXd matrix;
  bool repaired = false;
};

/// Clips eigenvalues below 1e-8 * lambda_max and reconstructs. Throws
/// std::invalid_argument for a non-symmetric input.
SpdRepair spd_repair(const Eigen::MatrixXd& m);

/// Empirical covariance of replicate rows, tapered entrywise by the
/// Wendland weight of the rows' site distance, then repaired to SPD. Entries
/// for site pairs at distance >= lambda are exactly zero.
MeasurementCov build_measurement_cov(const BootstrapReplicates& replicates,
                                     const StackedObservations& stack,
                                     double lambda_km = 300.0,
                                     int min_replicates = 50);

/// Rows/columns `rows` of W (for a restricted stack).
MeasurementCov restrict_cov(const MeasurementCov& w, std::span<const Eigen::Index> rows,
                            std::uint64_t layout_hash);

}  // namespace gevfuse
