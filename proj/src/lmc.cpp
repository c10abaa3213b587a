#include "gevfuse/lmc.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "gevfuse/errors.hpp"
#include "gevfuse/parallel.hpp"
#include "gevfuse/stats.hpp"

namespace gevfuse {

Eigen::VectorXd pack(const LmcParams& p) {
  const int q = p.dim();
  if (p.a.rows() != q || p.a.cols() != q || p.rho.size() != q)
    throw std::invalid_argument("pack: inconsistent LMC dimensions");
  if (!p.beta.allFinite() || !p.a.allFinite() || !p.rho.allFinite())
    throw std::invalid_argument("pack: non-finite parameter");
  if ((p.rho.array() <= 0.0).any()) throw std::invalid_argument("pack: ranges must be positive");
  Eigen::VectorXd theta(packed_size(q));
  Eigen::Index k = 0;
  for (int i = 0; i < q; ++i) theta[k++] = p.beta[i];
  for (int i = 0; i < q; ++i)
    for (int j = 0; j <= i; ++j) theta[k++] = p.a(i, j);
  for (int i = 0; i < q; ++i) theta[k++] = std::log(p.rho[i]);
  return theta;
}

LmcParams unpack(const Eigen::VectorXd& theta, int dim) {
  if (theta.size() != packed_size(dim))
    throw std::invalid_argument("unpack: expected " + std::to_string(packed_size(dim)) +
                                " entries, got " + std::to_string(theta.size()));
  if (!theta.allFinite()) throw std::invalid_argument("unpack: non-finite parameter");
  LmcParams p;
  p.beta.resize(dim);
  p.a = Eigen::MatrixXd::Zero(dim, dim);
  p.rho.resize(dim);
  Eigen::Index k = 0;
  for (int i = 0; i < dim; ++i) p.beta[i] = theta[k++];
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j <= i; ++j) p.a(i, j) = theta[k++];
  for (int i = 0; i < dim; ++i) p.rho[i] = std::exp(theta[k++]);
  return p;
}

Eigen::MatrixXd cross_cov(const LmcParams& p, double d_km) {
  if (d_km < 0.0) throw std::invalid_argument("cross_cov: negative distance");
  const Eigen::VectorXd decay = (-d_km / p.rho.array()).exp().matrix();
  return p.a * decay.asDiagonal() * p.a.transpose();
}

namespace {

// Loadings of each row on each latent process: rows(m, i) = A[p(m), i].
Eigen::MatrixXd row_loadings(const LmcParams& p, const StackedObservations& stack) {
  Eigen::MatrixXd out(stack.size(), p.dim());
  for (Eigen::Index m = 0; m < stack.size(); ++m) out.row(m) = p.a.row(stack.p_index[m]);
  return out;
}

void check_layout(const LmcParams& p, const StackedObservations& stack) {
  if (p.dim() != stack.dim)
    throw std::invalid_argument("LMC dimension " + std::to_string(p.dim()) +
                                " does not match stack dimension " +
                                std::to_string(stack.dim));
}

constexpr double kLog2Pi = 1.8378770664093454836;

void check_sites(const StackedObservations& stack, const Eigen::MatrixXd& site_dist) {
  const auto l = static_cast<Eigen::Index>(stack.n_sites());
  if (site_dist.rows() != l || site_dist.cols() != l)
    throw std::invalid_argument("distance matrix does not match the stack's sites");
  if (stack.size() != kParamsPerSite * l)
    throw std::invalid_argument("stack is not in the parameter-major layout");
}

// V = W + sum_i (a_i a_i^T) o exp(-D / rho_i). Rows are parameter-major
// (row = slot * L + site), so each slot pair is an L x L block scaled by the
// loadings on both sides. Optionally keeps each site-level decay matrix.
Eigen::MatrixXd assemble(const LmcParams& p, const Eigen::MatrixXd& loadings,
                         const Eigen::MatrixXd& site_dist, const Eigen::MatrixXd* w,
                         std::vector<Eigen::MatrixXd>* decays) {
  const auto n = loadings.rows();
  const auto l = site_dist.rows();
  Eigen::MatrixXd v = w ? *w : Eigen::MatrixXd::Zero(n, n);
  if (decays) decays->resize(static_cast<std::size_t>(p.dim()));
  for (int i = 0; i < p.dim(); ++i) {
    Eigen::MatrixXd e = (site_dist.array() * (-1.0 / p.rho[i])).exp().matrix();
    const auto& ai = loadings.col(i);
    for (int s = 0; s < kParamsPerSite; ++s)
      for (int t = s; t < kParamsPerSite; ++t) {
        Eigen::MatrixXd b =
            ai.segment(s * l, l).asDiagonal() * e * ai.segment(t * l, l).asDiagonal();
        // Mirror rather than recompute so V stays exactly symmetric.
        if (t == s) b.triangularView<Eigen::StrictlyLower>() = b.transpose();
        v.block(s * l, t * l, l, l) += b;
        if (t != s) v.block(t * l, s * l, l, l) += b.transpose();
      }
    if (decays) (*decays)[static_cast<std::size_t>(i)] = std::move(e);
  }
  return v;
}

ObservedFactor factorize(Eigen::MatrixXd v, const LmcParams& p,
                         const StackedObservations& stack) {
  ObservedFactor f;
  f.residual.resize(stack.size());
  for (Eigen::Index m = 0; m < stack.size(); ++m)
    f.residual[m] = stack.values[m] - p.beta[stack.p_index[m]];

  const double scale = v.diagonal().mean();
  std::ostringstream tried;
  Eigen::MatrixXd trial;
  for (int step = 0; step <= 5; ++step) {
    const double tau = step == 0 ? 0.0 : std::pow(10.0, step - 11);
    if (step > 0) tried << (step > 1 ? ", " : "") << tau;
    trial = v;
    trial.diagonal().array() += tau * scale;
    f.llt.compute(trial);
    if (f.llt.info() == Eigen::Success && f.llt.matrixLLT().diagonal().minCoeff() > 0.0) {
      f.jitter = tau * scale;
      f.alpha = f.llt.solve(f.residual);
      f.log_det = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
      return f;
    }
  }
  throw FitError("covariance V is not positive definite after jitter (tau tried: " +
                 tried.str() + " x mean(diag V))");
}

}  // namespace

Eigen::MatrixXd sigma_obs(const LmcParams& p, const StackedObservations& stack,
                          const Eigen::MatrixXd& site_dist) {
  check_layout(p, stack);
  check_sites(stack, site_dist);
  return assemble(p, row_loadings(p, stack), site_dist, nullptr, nullptr);
}

ObservedFactor factorize_observed(const LmcParams& p, const StackedObservations& stack,
                                  const Eigen::MatrixXd& w,
                                  const Eigen::MatrixXd& site_dist) {
  check_layout(p, stack);
  check_sites(stack, site_dist);
  return factorize(assemble(p, row_loadings(p, stack), site_dist, &w, nullptr), p, stack);
}

LmcLikelihood::LmcLikelihood(const StackedObservations& stack, const Eigen::MatrixXd& w,
                             const Eigen::MatrixXd& site_dist)
    : stack_(stack), w_(w), site_dist_(site_dist) {
  check_sites(stack, site_dist);
  if (w.rows() != stack.size() || w.cols() != stack.size())
    throw std::invalid_argument("measurement covariance does not match the stack size");
}

double LmcLikelihood::value(const Eigen::VectorXd& theta) const {
  const auto p = unpack(theta, dim());
  const auto f = factorize(assemble(p, row_loadings(p, stack_), site_dist_, &w_, nullptr),
                           p, stack_);
  return 0.5 * (static_cast<double>(stack_.size()) * kLog2Pi + f.log_det +
                f.residual.dot(f.alpha));
}

double LmcLikelihood::value_and_gradient(const Eigen::VectorXd& theta,
                                         Eigen::VectorXd& grad) const {
  const int q = dim();
  const auto p = unpack(theta, q);
  const auto n = stack_.size();
  const Eigen::MatrixXd loadings = row_loadings(p, stack_);
  std::vector<Eigen::MatrixXd> decays;
  const auto f =
      factorize(assemble(p, loadings, site_dist_, &w_, &decays), p, stack_);
  const double value = 0.5 * (static_cast<double>(n) * kLog2Pi + f.log_det +
                              f.residual.dot(f.alpha));

  // dl/deta = 1/2 tr(Q dV/deta) with Q = V^{-1} - alpha alpha^T.
  Eigen::MatrixXd q_mat = f.llt.solve(Eigen::MatrixXd::Identity(n, n));
  q_mat.noalias() -= f.alpha * f.alpha.transpose();

  grad.setZero(packed_size(q));
  for (Eigen::Index m = 0; m < n; ++m) grad[stack_.p_index[m]] -= f.alpha[m];

  // Offset of A(j, k) in the packed vector.
  auto a_slot = [q](int j, int k) { return q + j * (j + 1) / 2 + k; };
  const Eigen::Index rho_base = q + q * (q + 1) / 2;
  const auto l = site_dist_.rows();
  for (int k = 0; k < q; ++k) {
    const auto& e = decays[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd e_dist = e.cwiseProduct(site_dist_);
    const Eigen::VectorXd ak = loadings.col(k);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
    double rho_term = 0.0;
    for (int s = 0; s < kParamsPerSite; ++s)
      for (int t = 0; t < kParamsPerSite; ++t) {
        const auto qb = q_mat.block(s * l, t * l, l, l);
        const auto at = ak.segment(t * l, l);
        u.segment(s * l, l).noalias() += qb.cwiseProduct(e) * at;
        rho_term += ak.segment(s * l, l).dot(qb.cwiseProduct(e_dist) * at);
      }
    for (Eigen::Index m = 0; m < n; ++m) {
      const int j = stack_.p_index[m];
      if (j >= k) grad[a_slot(j, k)] += u[m];
    }
    grad[rho_base + k] = 0.5 * rho_term / p.rho[k];
  }
  return value;
}

double nll(const Eigen::VectorXd& theta, const StackedObservations& stack,
           const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist) {
  return LmcLikelihood(stack, w, site_dist).value(theta);
}

Eigen::VectorXd nll_grad(const Eigen::VectorXd& theta, const StackedObservations& stack,
                         const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist) {
  Eigen::VectorXd g;
  LmcLikelihood(stack, w, site_dist).value_and_gradient(theta, g);
  return g;
}

LmcParams start_values(const StackedObservations& stack, const LmcFitOptions& options,
                       int k) {
  const int q = stack.dim;
  Rng rng = make_rng(options.seed, static_cast<std::uint64_t>(k));
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(std::log(options.rho_min),
                                              std::log(options.rho_max));
  std::vector<std::vector<double>> by_param(static_cast<std::size_t>(q));
  for (Eigen::Index m = 0; m < stack.size(); ++m)
    by_param[static_cast<std::size_t>(stack.p_index[m])].push_back(stack.values[m]);

  LmcParams p;
  p.beta = Eigen::VectorXd::Zero(q);
  p.a = Eigen::MatrixXd::Zero(q, q);
  p.rho.resize(q);
  for (int j = 0; j < q; ++j) {
    const auto& v = by_param[static_cast<std::size_t>(j)];
    p.beta[j] = v.empty() ? 0.0 : stats::mean(v);
    const double s = stats::sd(v);
    const double scale = s > 0.0 ? s : 1.0;
    p.a(j, j) = scale;
    for (int i = 0; i < j; ++i) p.a(j, i) = 0.1 * scale * normal(rng);
  }
  for (int i = 0; i < q; ++i) p.rho[i] = std::exp(unif(rng));
  return p;
}

LmcFit fit_lmc(const StackedObservations& stack, const Eigen::MatrixXd& w,
               const Eigen::MatrixXd& site_dist, const LmcFitOptions& options) {
  if (options.n_starts < 1) throw std::invalid_argument("fit_lmc: n_starts must be >= 1");
  if (!(options.rho_min > 0.0 && options.rho_max >= options.rho_min))
    throw std::invalid_argument("fit_lmc: invalid range interval for starts");
  const auto t0 = std::chrono::steady_clock::now();
  const LmcLikelihood lik(stack, w, site_dist);
  const Objective fn = [&lik](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    try {
      return lik.value_and_gradient(x, g);
    } catch (const FitError&) {
      return std::numeric_limits<double>::infinity();
    } catch (const std::invalid_argument&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  // Ranges are kept within [1 km, 1e5 km]; everything else is free.
  const auto np = packed_size(stack.dim);
  Eigen::VectorXd lower = Eigen::VectorXd::Constant(np, -std::numeric_limits<double>::infinity());
  Eigen::VectorXd upper = Eigen::VectorXd::Constant(np, std::numeric_limits<double>::infinity());
  lower.tail(stack.dim).setConstant(0.0);
  upper.tail(stack.dim).setConstant(std::log(1e5));

  const int total = options.n_starts + (options.initial ? 1 : 0);
  std::vector<LbfgsResult> runs(static_cast<std::size_t>(total));
  parallel_for(runs.size(), options.jobs, [&](std::size_t k) {
    const auto start = static_cast<int>(k) < options.n_starts
                           ? start_values(stack, options, static_cast<int>(k))
                           : *options.initial;
    runs[k] = minimize_lbfgs(fn, pack(start), lower, upper, options.lbfgs);
    spdlog::debug("lmc start {}: nll={} status={} iters={} evals={}", k, runs[k].f,
                  to_string(runs[k].status), runs[k].iterations, runs[k].n_evals);
  });

  LmcFit out;
  auto& d = out.diagnostics;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k];
    d.nll_per_start.push_back(r.f);
    d.status_per_start.emplace_back(to_string(r.status));
    d.n_fn_evals += r.n_evals;
    d.n_grad_evals += r.n_evals;
    if (!r.converged() || !std::isfinite(r.f)) continue;
    if (d.best_start < 0 || r.f < runs[static_cast<std::size_t>(d.best_start)].f)
      d.best_start = static_cast<int>(k);
  }
  if (d.best_start < 0) throw FitError("fit_lmc: no start converged");
  const auto& best = runs[static_cast<std::size_t>(d.best_start)];
  out.params = unpack(best.x, stack.dim);
  out.nll = best.f;
  d.grad_norm_at_opt = best.grad.cwiseAbs().maxCoeff();
  d.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

CrossSourceCorrelations cross_source_correlations(const LmcParams& p) {
  if (p.dim() != 6)
    throw std::invalid_argument("cross_source_correlations: needs the 6-dimensional model");
  const Eigen::MatrixXd m = p.marginal_cov();
  auto cor = [&m](int i, int j) {
    const double denom = m(i, i) * m(j, j);
    if (!(m(i, i) > 0.0) || !(m(j, j) > 0.0))
      throw std::domain_error("cross_source_correlations: zero marginal variance");
    return m(i, j) / std::sqrt(denom);
  };
  return {cor(0, 3), cor(1, 4), cor(2, 5)};
}

}  // namespace gevfuse
