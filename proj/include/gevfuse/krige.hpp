#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/lmc.hpp"
#include "gevfuse/stack.hpp"

namespace gevfuse {

/// Predicted latent parameters at a location and their prediction covariance.
struct KrigingResult {
  Eigen::VectorXd theta;
  Eigen::MatrixXd cov;
};

struct ReturnLevelEstimate {
  double rl = 0.0;
  double se_mc = 0.0;
  double se_delta = 0.0;
  double T = 100.0;
  int n_draws = 0;
  std::uint64_t seed = 0;
};

/// Cokriging predictor for one fitted model and data set. V is factorized
/// once at construction and shared by every prediction.
class Kriger {
 public:
  Kriger(LmcParams params, const StackedObservations& stack, const Eigen::MatrixXd& w,
         const Eigen::MatrixXd& site_dist);

  KrigingResult predict(double lat, double lon) const;
  const ObservedFactor& factor() const { return factor_; }

 private:
  LmcParams p_;
  const StackedObservations& stack_;
  ObservedFactor factor_;
  Eigen::MatrixXd loadings_;  // A[p(m), :] per row
};

/// theta = beta + C^T V^{-1} r and cov = A A^T - C^T V^{-1} C, with
/// C(m,k) = sum_i A[p(m),i] A[k,i] exp(-d(s(m), s0) / rho_i).
KrigingResult krige_point(const LmcParams& p, const StackedObservations& stack,
                          const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist,
                          double lat, double lon);

/// Return levels of `n_draws` samples from N(mean, cov) over (mu, log sigma, xi).
/// The same seed gives the same underlying normal draws for any mean/cov.
std::vector<double> return_level_draws(const Eigen::Vector3d& mean,
                                       const Eigen::Matrix3d& cov, double T,
                                       int n_draws, std::uint64_t seed);

/// Return level at the kriged OBS-scale parameters (components 0..2) with
/// delta-method and Monte Carlo standard errors from the upper-left 3x3 block.
ReturnLevelEstimate return_level_from_kriging(const KrigingResult& kr, double T,
                                              int n_draws = 10000,
                                              std::uint64_t seed = 0);

struct GridPoint {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
};

struct GridRow {
  GridPoint point;
  KrigingResult kriged;
  std::vector<ReturnLevelEstimate> levels;  // one per requested T
};

/// Predicts every grid point with one shared factorization. Every point uses
/// the same Monte Carlo seed, so rows do not depend on grid order.
std::vector<GridRow> krige_grid(const LmcParams& p, const StackedObservations& stack,
                                const Eigen::MatrixXd& w,
                                const Eigen::MatrixXd& site_dist,
                                std::span<const GridPoint> grid,
                                std::span<const double> return_periods, int n_draws = 10000,
                                std::uint64_t seed = 0, int jobs = 1);

/// Reads `point_id,lat,lon`.
std::vector<GridPoint> load_grid(const std::filesystem::path& path);

}  // namespace gevfuse
