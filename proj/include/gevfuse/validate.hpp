#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/lmc.hpp"
#include "gevfuse/stack.hpp"

namespace gevfuse {

/// Quantities scored per held-out site: the three parameters and the return level.
inline constexpr int kScoredQuantities = 4;
inline constexpr std::array<const char*, kScoredQuantities> kQuantityNames{
    "mu", "log_sigma", "xi", "rl"};

/// Predictive for one held-out site's noisy Stage-1 triplet.
struct LooSiteResult {
  std::string site_id;
  Eigen::Vector3d predicted = Eigen::Vector3d::Zero();
  Eigen::Matrix3d pred_cov = Eigen::Matrix3d::Zero();
  Eigen::Vector3d observed = Eigen::Vector3d::Zero();
  double lpd = 0.0;
  double rl_pred = 0.0;
  double rl_obs = 0.0;
  /// Monte Carlo standard deviation of the predictive return level.
  double rl_sd = 0.0;
  std::array<double, kScoredQuantities> pit{};
};

inline constexpr std::array<double, 3> kCoverageLevels{0.50, 0.80, 0.95};

struct CvReport {
  int n_sites = 0;
  double rmse_mu = 0.0;
  double rmse_logsigma = 0.0;
  double rmse_xi = 0.0;
  double rmse_rl = 0.0;
  double total_lpd = 0.0;
  /// Sites where this model's return level error beats the comparison
  /// model's (set by compare()).
  int sites_won = 0;
  /// coverage[level][quantity]: fraction of sites whose central interval at
  /// kCoverageLevels[level] covers the observation. NaN when not computed.
  std::array<std::array<double, kScoredQuantities>, 3> coverage{};
  std::array<double, kScoredQuantities> ks_p{};
};

struct LooOptions {
  double T = 100.0;
  int n_draws = 10000;
  std::uint64_t seed = 0;
};

struct LooOutput {
  std::vector<LooSiteResult> sites;
  CvReport report;
};

/// Predictive mean and covariance of the stacked rows of `test_sites`
/// (each site's 3 rows) given all other rows, from the full-data V.
struct BlockPredictive {
  std::vector<Eigen::Vector3d> mean;
  std::vector<Eigen::Matrix3d> cov;
};
BlockPredictive delete_block_predictive(const LmcParams& p, const StackedObservations& stack,
                                        const Eigen::MatrixXd& w,
                                        const Eigen::MatrixXd& site_dist,
                                        std::span<const std::size_t> test_sites);

/// Scores a predictive for one site: lpd, return levels and PITs.
LooSiteResult score_site(const std::string& site_id, const Eigen::Vector3d& predicted,
                         const Eigen::Matrix3d& pred_cov, const Eigen::Vector3d& observed,
                         const LooOptions& options);

/// Leave-one-site-out over the sites of `target` with the closed-form
/// shortcut: mean = obs_b - [(V^-1)_bb]^-1 (V^-1 r)_b, cov = [(V^-1)_bb]^-1.
/// Covariance parameters are not refit.
LooOutput loo_block(const LmcParams& p, const StackedObservations& stack,
                    const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist,
                    Source target = Source::Obs, const LooOptions& options = {});

/// RMSEs, total lpd, and (for at least 5 sites) coverage and KS p-values.
CvReport summarize(std::span<const LooSiteResult> results);

struct CalibrationTable {
  std::array<std::array<double, kScoredQuantities>, 3> coverage{};
  std::array<double, kScoredQuantities> ks_p{};
};

/// Central-interval coverage at 50/80/95% read off the PITs, and KS tests of
/// the PITs against uniform. Needs at least 5 sites.
CalibrationTable pit_and_coverage(std::span<const LooSiteResult> results);

/// Counts sites where `model` has the smaller absolute return-level error,
/// and stores it in model.report.sites_won. Sites must match.
int compare(LooOutput& model, const LooOutput& reference);

struct DecompositionRow {
  std::string label;
  double rmse_rl = 0.0;
  double reduction_pct = 0.0;
};

/// Return-level RMSE with one parameter at a time taken from the joint
/// predictions (others from the baseline), plus all-baseline and all-joint.
std::vector<DecompositionRow> rmse_decomposition(std::span<const LooSiteResult> joint,
                                                 std::span<const LooSiteResult> baseline,
                                                 double T);

struct BlockCvOptions {
  LooOptions loo;
  LmcFitOptions lmc;
  /// Refit both models per fold; when false the supplied fits are reused.
  bool refit = true;
  /// Allow folds that leave fewer than 4 target-source training sites.
  bool force = false;
  Source target = Source::Obs;
  int jobs = 1;
};

struct BlockCvFold {
  std::vector<std::string> held_out;
  LooOutput joint;
  LooOutput baseline;
};

struct BlockCvResult {
  std::vector<BlockCvFold> folds;
  LooOutput joint_pooled;
  LooOutput baseline_pooled;
};

/// Geographic block CV. `blocks` lists stack site indices and must
/// partition the target-source sites. Each fold drops its block, restricts
/// W, refits the joint and the single-source model, and predicts the held-out
/// noisy triplets. `joint_fit` and `baseline_fit` are used when refit is off
/// and are otherwise ignored.
BlockCvResult geographic_block_cv(const StackedObservations& stack, const Eigen::MatrixXd& w,
                                  const std::vector<std::vector<std::size_t>>& blocks,
                                  const BlockCvOptions& options,
                                  const std::optional<LmcParams>& joint_fit = std::nullopt,
                                  const std::optional<LmcParams>& baseline_fit = std::nullopt);

/// `n_blocks` contiguous blocks of the `source` sites ordered by latitude.
std::vector<std::vector<std::size_t>> contiguous_blocks(const StackedObservations& stack,
                                                        Source source, int n_blocks);

struct RecoveryRow {
  std::string quantity;
  double truth = 0.0;
  double median = 0.0;
  double sd = 0.0;
  double iqr = 0.0;
  double q05 = 0.0;
  double q95 = 0.0;
};

struct IdentifiabilityResult {
  std::vector<RecoveryRow> rows;  // mu, log_sigma, xi
  std::vector<std::array<double, 3>> estimates;
  int n_failed = 0;
};

/// Simulates `n_reps` stacks from `truth` with noise N(0, w) at `sites`,
/// refits the LMC to each and summarizes the recovered cross-source
/// correlations. Throws FitError if more than 30% of the refits fail.
IdentifiabilityResult identifiability_study(const LmcParams& truth,
                                            const std::vector<Site>& sites,
                                            const Eigen::MatrixXd& w, int n_reps,
                                            std::uint64_t seed, const LmcFitOptions& lmc,
                                            int jobs = 1);

struct SaturationRow {
  int size = 0;
  int draw = 0;
  double rmse_rl = 0.0;
  double reduction_pct = 0.0;
};

/// For each size, `n_draws_per_size` random subsets of simulation sites are
/// added to all target sites, the joint model refit (with `joint_lmc`) and
/// scored by LOO; the reduction is relative to the single-source baseline
/// fitted with `baseline_lmc` (size 0).
std::vector<SaturationRow> saturation_experiment(const StackedObservations& stack,
                                                 const Eigen::MatrixXd& w,
                                                 std::span<const int> sizes,
                                                 int n_draws_per_size, std::uint64_t seed,
                                                 const LooOptions& loo,
                                                 const LmcFitOptions& joint_lmc,
                                                 const LmcFitOptions& baseline_lmc,
                                                 int jobs = 1);

}  // namespace gevfuse
