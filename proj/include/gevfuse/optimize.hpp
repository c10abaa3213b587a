#pragma once

#include <functional>
#include <string>

#include <Eigen/Dense>

namespace gevfuse {

/// Objective: returns f(x) and writes the gradient into `grad`. May return
/// +inf (or NaN) to signal an infeasible point; the line search backs off.
using Objective =
    std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 1000;
  /// Converged when the max-norm of the projected gradient drops below this.
  double gradient_tolerance = 1e-5;
  /// ... or when |f_k - f_{k+1}| / max(|f_k|, |f_{k+1}|, 1) drops below this.
  double relative_tolerance = 1e-10;
  double armijo = 1e-4;
  int max_backtracks = 40;
};

enum class LbfgsStatus {
  GradientTolerance,
  RelativeTolerance,
  MaxIterations,
  LineSearchFailed,
  InfeasibleStart,
};

std::string_view to_string(LbfgsStatus s);

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  double projected_grad_norm = 0.0;
  int iterations = 0;
  int n_evals = 0;
  LbfgsStatus status = LbfgsStatus::MaxIterations;

  bool converged() const {
    return status == LbfgsStatus::GradientTolerance ||
           status == LbfgsStatus::RelativeTolerance;
  }
};

/// Limited-memory BFGS with simple bounds (projected search directions and
/// an Armijo backtracking search along the projected path). Pass empty
/// bound vectors for an unconstrained problem; infinite entries are allowed.
LbfgsResult minimize_lbfgs(const Objective& fn, Eigen::VectorXd x0,
                           const Eigen::VectorXd& lower,
                           const Eigen::VectorXd& upper,
                           const LbfgsOptions& options = {});

}  // namespace gevfuse
