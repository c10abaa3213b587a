#include "gevfuse/marginal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "gevfuse/errors.hpp"
#include "gevfuse/optimize.hpp"
#include "gevfuse/stats.hpp"

namespace gevfuse {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kSeriesThreshold = 1e-4;
constexpr double kEulerGamma = 0.5772156649015329;

// h(z, xi) = log(1 + xi z) / xi, the exponent of the GEV survival term,
// and its derivative in xi at fixed z. Returns false outside the support.
bool exponent_terms(double z, double xi, double& h, double& h_xi) {
  if (std::abs(xi) < kGumbelThreshold) {
    h = z;
    h_xi = -0.5 * z * z;
    return true;
  }
  const double u = xi * z;
  if (!(1.0 + u > 0.0)) return false;
  if (std::abs(u) < kSeriesThreshold) {
    h = z * (1.0 - u / 2.0 + u * u / 3.0 - u * u * u / 4.0);
    h_xi = z * z * (-0.5 + 2.0 * u / 3.0 - 0.75 * u * u + 0.8 * u * u * u);
    return true;
  }
  h = std::log1p(u) / xi;
  h_xi = (z / (1.0 + u) - h) / xi;
  return true;
}

// (y_T^{-xi} - 1) / xi with y_T = -log(1 - 1/T), and its xi-derivative.
void growth_terms(double xi, double T, double& g, double& g_xi) {
  if (!(T > 1.0)) throw std::invalid_argument("return period T must exceed 1");
  const double L = std::log(-std::log1p(-1.0 / T));
  if (std::abs(xi) < kGumbelThreshold) {
    g = -L;
    g_xi = 0.5 * L * L;
    return;
  }
  if (std::abs(xi) < kSeriesThreshold) {
    g = -L + xi * L * L / 2.0 - xi * xi * L * L * L / 6.0;
    g_xi = L * L / 2.0 - xi * L * L * L / 3.0 + xi * xi * L * L * L * L / 8.0;
    return;
  }
  const double e = std::expm1(-xi * L);
  g = e / xi;
  g_xi = (-L * xi * (e + 1.0) - e) / (xi * xi);
}

}  // namespace

double GevParams::sigma() const { return std::exp(log_sigma); }

double GevParams::location(std::optional<double> t) const {
  if (t && mu1) return mu0 + *mu1 * (*t - t_ref);
  return mu0;
}

GevLogpdfTerms gev_logpdf_terms(double y, double location, double log_sigma,
                                double xi) {
  const double sigma = std::exp(log_sigma);
  const double z = (y - location) / sigma;
  double h = 0.0, h_xi = 0.0;
  if (!exponent_terms(z, xi, h, h_xi)) return {-kInf, 0.0, 0.0, 0.0};
  const double t = std::abs(xi) < kGumbelThreshold ? 1.0 : 1.0 + xi * z;
  const double eh = std::exp(-h);
  const double d_z = (eh - 1.0 - xi) / t;
  return {
      -log_sigma - (1.0 + xi) * h - eh,
      -d_z / sigma,
      -1.0 - z * d_z,
      -h - (1.0 + xi) * h_xi + eh * h_xi,
  };
}

double gev_logpdf(double y, const GevParams& p, std::optional<double> t) {
  return gev_logpdf_terms(y, p.location(t), p.log_sigma, p.xi).value;
}

double gev_cdf(double y, const GevParams& p, std::optional<double> t) {
  const double z = (y - p.location(t)) / p.sigma();
  double h = 0.0, h_xi = 0.0;
  if (!exponent_terms(z, p.xi, h, h_xi)) return p.xi > 0.0 ? 0.0 : 1.0;
  return std::exp(-std::exp(-h));
}

double gev_quantile(double prob, const GevParams& p, std::optional<double> t) {
  if (!(prob > 0.0 && prob < 1.0))
    throw std::invalid_argument("GEV quantile probability must be in (0,1)");
  const double L = std::log(-std::log(prob));
  const double g = std::abs(p.xi) < kGumbelThreshold
                       ? -L
                       : std::expm1(-p.xi * L) / p.xi;
  return p.location(t) + p.sigma() * g;
}

double sample_gev(Rng& rng, const GevParams& p, std::optional<double> t) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  while (u <= 0.0) u = unif(rng);
  return gev_quantile(u, p, t);
}

double return_level(double mu, double log_sigma, double xi, double T) {
  double g = 0.0, g_xi = 0.0;
  growth_terms(xi, T, g, g_xi);
  return mu + std::exp(log_sigma) * g;
}

double return_level(const GevParams& p, double T) {
  return return_level(p.mu0, p.log_sigma, p.xi, T);
}

Eigen::Vector3d return_level_gradient(double mu, double log_sigma, double xi,
                                      double T) {
  (void)mu;
  double g = 0.0, g_xi = 0.0;
  growth_terms(xi, T, g, g_xi);
  const double sigma = std::exp(log_sigma);
  return {1.0, sigma * g, sigma * g_xi};
}

Eigen::Vector3d return_level_gradient(const GevParams& p, double T) {
  return return_level_gradient(p.mu0, p.log_sigma, p.xi, T);
}

double gev_nll(std::span<const double> times, std::span<const double> values,
               const GevParams& p) {
  double nll = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double lp = gev_logpdf(values[i], p, times[i]);
    if (!std::isfinite(lp)) return kInf;
    nll -= lp;
  }
  return nll;
}

namespace {

// Maps the optimizer vector to parameters: (mu0, [mu1,] log_sigma, xi).
struct GevModel {
  std::span<const double> times, values;
  const GevFitOptions& opt;
  bool free_mu1() const { return opt.nonstationary && !opt.fixed_mu1; }
  Eigen::Index dim() const { return free_mu1() ? 4 : 3; }

  GevParams params(const Eigen::VectorXd& x) const {
    GevParams p;
    p.t_ref = opt.t_ref;
    p.mu0 = x[0];
    if (free_mu1()) {
      p.mu1 = x[1];
    } else if (opt.fixed_mu1) {
      p.mu1 = *opt.fixed_mu1;
    }
    p.log_sigma = x[dim() - 2];
    p.xi = x[dim() - 1];
    return p;
  }

  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& g) const {
    const GevParams p = params(x);
    g.setZero(dim());
    double nll = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto terms =
          gev_logpdf_terms(values[i], p.location(times[i]), p.log_sigma, p.xi);
      if (!std::isfinite(terms.value)) return kInf;
      nll -= terms.value;
      g[0] -= terms.d_location;
      if (free_mu1()) g[1] -= terms.d_location * (times[i] - opt.t_ref);
      g[dim() - 2] -= terms.d_log_sigma;
      g[dim() - 1] -= terms.d_xi;
    }
    return nll;
  }
};

Eigen::VectorXd initial_guess(const GevModel& model) {
  const auto n = model.values.size();
  double slope = 0.0;
  if (model.free_mu1()) {
    const double tm = stats::mean(model.times), ym = stats::mean(model.values);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (model.times[i] - tm) * (model.values[i] - ym);
      sxx += (model.times[i] - tm) * (model.times[i] - tm);
    }
    if (sxx > 0.0) slope = sxy / sxx;
  } else if (model.opt.fixed_mu1) {
    slope = *model.opt.fixed_mu1;
  }
  std::vector<double> detrended(n);
  for (std::size_t i = 0; i < n; ++i)
    detrended[i] = model.values[i] - slope * (model.times[i] - model.opt.t_ref);
  const double sigma0 = stats::sd(detrended) * std::sqrt(6.0) / std::numbers::pi;
  const double mu0 = stats::mean(detrended) - kEulerGamma * sigma0;
  Eigen::VectorXd x(model.dim());
  x[0] = mu0;
  if (model.free_mu1()) x[1] = slope;
  x[model.dim() - 2] = std::log(sigma0);
  x[model.dim() - 1] = 0.1;
  return x;
}

GevStandardErrors standard_errors(const GevModel& model, const Eigen::VectorXd& x) {
  const auto k = model.dim();
  Eigen::MatrixXd hess(k, k);
  Eigen::VectorXd gp(k), gm(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(x[j]));
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    const double fp = model(xp, gp), fm = model(xm, gm);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      hess.col(j).setConstant(std::nan(""));
    } else {
      hess.col(j) = (gp - gm) / (2.0 * h);
    }
  }
  GevStandardErrors se;
  const double nan = std::nan("");
  se.mu0 = se.log_sigma = se.xi = nan;
  if (model.free_mu1()) se.mu1 = nan;
  if (!hess.allFinite()) return se;
  hess = 0.5 * (hess + hess.transpose()).eval();
  Eigen::LLT<Eigen::MatrixXd> llt(hess);
  if (llt.info() != Eigen::Success) return se;
  const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
  se.mu0 = std::sqrt(cov(0, 0));
  if (model.free_mu1()) se.mu1 = std::sqrt(cov(1, 1));
  se.log_sigma = std::sqrt(cov(k - 2, k - 2));
  se.xi = std::sqrt(cov(k - 1, k - 1));
  return se;
}

}  // namespace

GevFitResult fit_gev(std::span<const double> times,
                     std::span<const double> values,
                     const GevFitOptions& options) {
  if (times.size() != values.size())
    throw std::invalid_argument("fit_gev: times/values length mismatch");
  if (values.size() < 10)
    throw DataError("fit_gev: need at least 10 values, got " +
                    std::to_string(values.size()));
  if (stats::sd(values) <= 0.0) throw DataError("degenerate sample");

  const GevModel model{times, values, options};
  const Objective fn = [&model](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    return model(x, g);
  };
  const auto k = model.dim();
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(k, -kInf);
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(k, kInf);
  lo[k - 1] = options.xi_lower;
  hi[k - 1] = options.xi_upper;

  LbfgsOptions lopt;
  lopt.gradient_tolerance = 1e-6;
  lopt.relative_tolerance = 1e-13;
  lopt.max_iterations = 500;

  const Eigen::VectorXd x0 = initial_guess(model);
  auto accept = [&](const LbfgsResult& r) {
    return r.converged() && std::isfinite(r.f) && r.projected_grad_norm < 1e-3;
  };

  LbfgsResult best = minimize_lbfgs(fn, x0, lo, hi, lopt);
  if (best.status == LbfgsStatus::InfeasibleStart) {
    Eigen::VectorXd x1 = x0;
    x1[k - 1] = 0.0;
    best = minimize_lbfgs(fn, x1, lo, hi, lopt);
  }
  bool ok = accept(best);
  if (!ok) {
    Rng rng = make_rng(options.seed, 0x6765760aULL);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif(-0.2, 0.4);
    const double scale = std::exp(x0[k - 2]);
    for (int r = 0; r < options.restarts && !ok; ++r) {
      Eigen::VectorXd xr = x0;
      xr[0] += 0.1 * scale * normal(rng);
      xr[k - 2] += 0.1 * normal(rng);
      xr[k - 1] = unif(rng);
      const auto res = minimize_lbfgs(fn, xr, lo, hi, lopt);
      const bool res_ok = accept(res);
      if ((res_ok && !ok) || (res_ok == ok && res.f < best.f) ||
          !std::isfinite(best.f)) {
        best = res;
        ok = res_ok;
      }
    }
  }

  GevFitResult out;
  out.params = model.params(best.x);
  out.nll = best.f;
  out.converged = ok;
  out.n_used = static_cast<int>(values.size());
  if (options.nonstationary) out.t_ref = options.t_ref;
  if (options.compute_se && std::isfinite(best.f)) {
    out.se = standard_errors(model, best.x);
  } else {
    const double nan = std::nan("");
    out.se = {nan, model.free_mu1() ? std::optional<double>(nan) : std::nullopt,
              nan, nan};
  }
  return out;
}

std::vector<double> years_as_times(const AnnualMaximaSeries& series) {
  return {series.years.begin(), series.years.end()};
}

GevFitResult fit_gev(const AnnualMaximaSeries& series, bool nonstationary,
                     double t_ref) {
  GevFitOptions opt;
  opt.nonstationary = nonstationary;
  opt.t_ref = t_ref;
  const auto times = years_as_times(series);
  return fit_gev(times, series.values, opt);
}

TrendTestResult mann_kendall(std::span<const double> values) {
  const auto n = values.size();
  if (n < 3) throw std::invalid_argument("mann_kendall: need at least 3 values");
  long s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      s += (values[j] > values[i]) - (values[j] < values[i]);

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * (t - 1.0) * (2.0 * t + 5.0);
    i = j;
  }
  const double nn = static_cast<double>(n);
  const double var = (nn * (nn - 1.0) * (2.0 * nn + 5.0) - tie_term) / 18.0;

  TrendTestResult r;
  r.s_stat = s;
  if (var <= 0.0 || s == 0) {
    r.z = 0.0;
    r.p_value = 1.0;
    return r;
  }
  const double sd = std::sqrt(var);
  r.z = s > 0 ? (static_cast<double>(s) - 1.0) / sd
              : (static_cast<double>(s) + 1.0) / sd;
  r.p_value = std::min(1.0, std::erfc(std::abs(r.z) / std::numbers::sqrt2));
  return r;
}

double sen_slope(std::span<const double> years, std::span<const double> values) {
  if (years.size() != values.size())
    throw std::invalid_argument("sen_slope: length mismatch");
  if (values.size() < 2) throw std::invalid_argument("sen_slope: need at least 2 values");
  std::vector<double> slopes;
  slopes.reserve(values.size() * (values.size() - 1) / 2);
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      if (years[j] == years[i])
        throw std::invalid_argument("sen_slope: years must be distinct");
      slopes.push_back((values[j] - values[i]) / (years[j] - years[i]));
    }
  return stats::median(std::move(slopes));
}

TrendTestResult trend_test(const AnnualMaximaSeries& series) {
  auto r = mann_kendall(series.values);
  const auto times = years_as_times(series);
  r.sen_slope = sen_slope(times, series.values);
  return r;
}

AdResult ad_gof(const AnnualMaximaSeries& series, const GevFitResult& fit,
                int n_boot, std::uint64_t seed) {
  if (n_boot <= 0) throw std::invalid_argument("n_boot must be positive");
  if (!fit.converged) throw std::invalid_argument("ad_gof: fit did not converge");
  const auto times = years_as_times(series);
  const auto n = series.size();

  auto statistic = [&](std::span<const double> vals, const GevParams& p) {
    std::vector<double> u(n);
    for (std::size_t i = 0; i < n; ++i) u[i] = gev_cdf(vals[i], p, times[i]);
    return stats::anderson_darling(std::move(u));
  };

  GevFitOptions opt;
  opt.nonstationary = fit.params.mu1.has_value();
  opt.t_ref = fit.params.t_ref;
  opt.compute_se = false;

  AdResult res;
  res.statistic = statistic(series.values, fit.params);
  int exceed = 0;
  std::vector<double> sample(n);
  for (int b = 0; b < n_boot; ++b) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(b));
    for (std::size_t i = 0; i < n; ++i)
      sample[i] = sample_gev(rng, fit.params, times[i]);
    opt.seed = mix_seed(seed, static_cast<std::uint64_t>(b) + 0x100000000ULL);
    GevFitResult refit;
    try {
      refit = fit_gev(times, sample, opt);
    } catch (const DataError&) {
      ++res.n_skipped;
      continue;
    }
    if (!refit.converged) {
      ++res.n_skipped;
      continue;
    }
    ++res.n_boot_used;
    if (statistic(sample, refit.params) >= res.statistic) ++exceed;
  }
  res.p_value = (1.0 + exceed) / (1.0 + res.n_boot_used);
  return res;
}

std::vector<GevFitResult> fit_stage1(const Dataset& ds, const Stage1Options& options,
                                     int jobs) {
  std::vector<GevFitResult> fits(ds.size());
  parallel_for(ds.size(), jobs, [&](std::size_t i) {
    GevFitOptions opt;
    opt.nonstationary = options.nonstationary_for(ds.sites[i].source);
    opt.t_ref = options.t_ref;
    opt.seed = i;
    const auto times = years_as_times(ds.series[i]);
    try {
      fits[i] = fit_gev(times, ds.series[i].values, opt);
    } catch (const DataError& e) {
      throw DataError("site '" + ds.sites[i].id + "': " + e.what());
    }
  });
  return fits;
}

}  // namespace gevfuse
