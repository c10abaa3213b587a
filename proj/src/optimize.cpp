#include "gevfuse/optimize.hpp"

#include <cmath>
#include <deque>
#include <limits>

namespace gevfuse {

std::string_view to_string(LbfgsStatus s) {
  switch (s) {
    case LbfgsStatus::GradientTolerance: return "gradient_tolerance";
    case LbfgsStatus::RelativeTolerance: return "relative_tolerance";
    case LbfgsStatus::MaxIterations: return "max_iterations";
    case LbfgsStatus::LineSearchFailed: return "line_search_failed";
    case LbfgsStatus::InfeasibleStart: return "infeasible_start";
  }
  return "unknown";
}

namespace {

struct Box {
  Eigen::VectorXd lo, hi;

  Eigen::VectorXd project(const Eigen::VectorXd& x) const {
    return x.cwiseMax(lo).cwiseMin(hi);
  }

  // Gradient with components zeroed where a bound blocks descent.
  Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& g) const {
    Eigen::VectorXd pg = g;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if ((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
        pg[i] = 0.0;
    }
    return pg;
  }
};

struct Pair {
  Eigen::VectorXd s, y;
  double rho;
};

Eigen::VectorXd two_loop(const std::deque<Pair>& mem, const Eigen::VectorXd& g) {
  Eigen::VectorXd q = g;
  std::vector<double> alpha(mem.size());
  for (std::size_t k = mem.size(); k-- > 0;) {
    alpha[k] = mem[k].rho * mem[k].s.dot(q);
    q -= alpha[k] * mem[k].y;
  }
  if (!mem.empty()) {
    const auto& last = mem.back();
    q *= last.s.dot(last.y) / last.y.squaredNorm();
  }
  for (std::size_t k = 0; k < mem.size(); ++k) {
    const double beta = mem[k].rho * mem[k].y.dot(q);
    q += (alpha[k] - beta) * mem[k].s;
  }
  return -q;
}

}  // namespace

LbfgsResult minimize_lbfgs(const Objective& fn, Eigen::VectorXd x0,
                           const Eigen::VectorXd& lower,
                           const Eigen::VectorXd& upper,
                           const LbfgsOptions& options) {
  const auto n = x0.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  Box box{lower.size() ? lower : Eigen::VectorXd::Constant(n, -inf),
          upper.size() ? upper : Eigen::VectorXd::Constant(n, inf)};

  LbfgsResult res;
  res.x = box.project(x0);
  res.grad = Eigen::VectorXd::Zero(n);
  res.f = fn(res.x, res.grad);
  res.n_evals = 1;
  if (!std::isfinite(res.f) || !res.grad.allFinite()) {
    res.status = LbfgsStatus::InfeasibleStart;
    return res;
  }

  std::deque<Pair> mem;
  Eigen::VectorXd g_new(n), x_new(n);
  bool just_reset = false;
  for (res.iterations = 0; res.iterations < options.max_iterations;
       ++res.iterations) {
    const Eigen::VectorXd pg = box.projected_gradient(res.x, res.grad);
    res.projected_grad_norm = pg.cwiseAbs().maxCoeff();
    if (res.projected_grad_norm < options.gradient_tolerance) {
      res.status = LbfgsStatus::GradientTolerance;
      return res;
    }

    Eigen::VectorXd d = two_loop(mem, pg);
    for (Eigen::Index i = 0; i < n; ++i)
      if (pg[i] == 0.0 && res.grad[i] != 0.0) d[i] = 0.0;
    double slope = res.grad.dot(d);
    if (!(slope < 0.0)) {
      mem.clear();
      d = -pg;
      slope = res.grad.dot(d);
    }
    double step = mem.empty() ? std::min(1.0, 1.0 / pg.norm()) : 1.0;

    bool accepted = false;
    double f_new = inf;
    for (int bt = 0; bt < options.max_backtracks; ++bt) {
      x_new = box.project(res.x + step * d);
      f_new = fn(x_new, g_new);
      ++res.n_evals;
      const double decrease = res.grad.dot(x_new - res.x);
      if (std::isfinite(f_new) && g_new.allFinite() &&
          f_new <= res.f + options.armijo * decrease) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!just_reset && !mem.empty()) {
        mem.clear();
        just_reset = true;
        continue;
      }
      res.status = LbfgsStatus::LineSearchFailed;
      return res;
    }
    just_reset = false;

    Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd y = g_new - res.grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      mem.push_back({std::move(s), std::move(y), 1.0 / sy});
      if (static_cast<int>(mem.size()) > options.memory) mem.pop_front();
    }

    const double rel = std::abs(res.f - f_new) /
                       std::max({std::abs(res.f), std::abs(f_new), 1.0});
    res.x = x_new;
    res.f = f_new;
    res.grad = g_new;
    if (rel < options.relative_tolerance) {
      res.projected_grad_norm =
          box.projected_gradient(res.x, res.grad).cwiseAbs().maxCoeff();
      res.status = LbfgsStatus::RelativeTolerance;
      return res;
    }
  }
  res.status = LbfgsStatus::MaxIterations;
  return res;
}

}  // namespace gevfuse
