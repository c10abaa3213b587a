#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/optimize.hpp"
#include "gevfuse/stack.hpp"

namespace gevfuse {

/// Linear model of coregionalization: theta(s) = beta + A delta(s), with
/// independent unit-variance exponential-covariance processes delta_i of
/// range rho_i (km). A is lower triangular.
struct LmcParams {
  Eigen::VectorXd beta;
  Eigen::MatrixXd a;
  Eigen::VectorXd rho;

  int dim() const { return static_cast<int>(beta.size()); }
  /// Marginal covariance A A^T at any single location.
  Eigen::MatrixXd marginal_cov() const { return a * a.transpose(); }
};

/// Length of the packed vector: dim means, dim(dim+1)/2 loadings, dim log-ranges.
constexpr Eigen::Index packed_size(int dim) { return dim + dim * (dim + 1) / 2 + dim; }

/// (beta, vech(A) row-major over the lower triangle, log rho).
Eigen::VectorXd pack(const LmcParams& p);
LmcParams unpack(const Eigen::VectorXd& theta, int dim);

/// Cross-covariance between theta(s) and theta(s') at distance d:
/// A diag(exp(-d/rho)) A^T.
Eigen::MatrixXd cross_cov(const LmcParams& p, double d_km);

/// Signal covariance of the stacked observations, entry (m,n) =
/// sum_i A[p(m),i] A[p(n),i] exp(-d(s(m),s(n))/rho_i). `site_dist` is the
/// L x L distance matrix of stack.sites.
Eigen::MatrixXd sigma_obs(const LmcParams& p, const StackedObservations& stack,
                          const Eigen::MatrixXd& site_dist);

/// Cholesky factor of V = Sigma_obs + W with the jitter policy applied:
/// on failure add tau * mean(diag V) for tau = 1e-10 .. 1e-6 by decades.
struct ObservedFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  Eigen::VectorXd residual;  // values - beta[p(m)]
  Eigen::VectorXd alpha;     // V^{-1} residual
  double log_det = 0.0;
};

/// Throws FitError (listing the attempted jitters) if V stays indefinite.
ObservedFactor factorize_observed(const LmcParams& p, const StackedObservations& stack,
                                  const Eigen::MatrixXd& w,
                                  const Eigen::MatrixXd& site_dist);

/// Gaussian negative log-likelihood of the stacked estimates and its
/// analytic gradient in the packed parameterization.
class LmcLikelihood {
 public:
  LmcLikelihood(const StackedObservations& stack, const Eigen::MatrixXd& w,
                const Eigen::MatrixXd& site_dist);

  double value(const Eigen::VectorXd& theta) const;
  double value_and_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;

  int dim() const { return stack_.dim; }

 private:
  const StackedObservations& stack_;
  const Eigen::MatrixXd& w_;
  Eigen::MatrixXd site_dist_;
};

double nll(const Eigen::VectorXd& theta, const StackedObservations& stack,
           const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist);
Eigen::VectorXd nll_grad(const Eigen::VectorXd& theta, const StackedObservations& stack,
                         const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist);

struct FitDiagnostics {
  std::vector<double> nll_per_start;
  std::vector<std::string> status_per_start;
  int best_start = -1;
  double grad_norm_at_opt = 0.0;
  long n_fn_evals = 0;
  long n_grad_evals = 0;
  double wall_time = 0.0;
};

struct LmcFitOptions {
  int n_starts = 20;
  std::uint64_t seed = 0;
  double rho_min = 50.0;
  double rho_max = 5000.0;
  int jobs = 1;
  LbfgsOptions lbfgs{10, 3000, 1e-5, 1e-10, 1e-4, 40};
  /// Optional extra start point, tried after the random starts.
  std::optional<LmcParams> initial;
};

struct LmcFit {
  LmcParams params;
  double nll = 0.0;
  FitDiagnostics diagnostics;
};

/// Random start `k` of a multi-start fit (deterministic in seed and k).
LmcParams start_values(const StackedObservations& stack, const LmcFitOptions& options,
                       int k);

/// Multi-start quasi-Newton maximum likelihood. Returns the best converged
/// start (ties broken by start index); throws FitError if none converges.
LmcFit fit_lmc(const StackedObservations& stack, const Eigen::MatrixXd& w,
               const Eigen::MatrixXd& site_dist, const LmcFitOptions& options);

struct CrossSourceCorrelations {
  double mu = 0.0;
  double log_sigma = 0.0;
  double xi = 0.0;
};

/// Correlations between matching OBS and SIM parameters implied by A A^T.
CrossSourceCorrelations cross_source_correlations(const LmcParams& p);

}  // namespace gevfuse
