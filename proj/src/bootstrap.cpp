#include "gevfuse/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "gevfuse/errors.hpp"
#include "gevfuse/parallel.hpp"

namespace gevfuse {

std::vector<int> source_years(const Dataset& ds, Source source) {
  std::set<int> years;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.sites[i].source == source)
      years.insert(ds.series[i].years.begin(), ds.series[i].years.end());
  return {years.begin(), years.end()};
}

std::optional<Eigen::VectorXd> bootstrap_replicate(const Dataset& ds,
                                                   const Stage1Options& options,
                                                   const YearDraw& draw,
                                                   std::uint64_t seed) {
  const auto order = canonical_order(ds);
  const auto obs_years = source_years(ds, Source::Obs);
  const auto sim_years = source_years(ds, Source::Sim);
  const auto L = static_cast<Eigen::Index>(ds.size());
  Eigen::VectorXd out(kParamsPerSite * L);

  std::vector<double> times, values;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto i = order[k];
    const auto& series = ds.series[i];
    const bool obs = ds.sites[i].source == Source::Obs;
    const auto& pool = obs ? obs_years : sim_years;
    const auto& picks = obs ? draw.obs_years : draw.sim_years;
    times.clear();
    values.clear();
    for (int pick : picks) {
      const int year = pool.at(static_cast<std::size_t>(pick));
      const auto it = std::lower_bound(series.years.begin(), series.years.end(), year);
      if (it == series.years.end() || *it != year) continue;
      times.push_back(year);
      values.push_back(series.values[static_cast<std::size_t>(it - series.years.begin())]);
    }
    GevFitOptions opt;
    opt.nonstationary = options.nonstationary_for(ds.sites[i].source);
    opt.t_ref = options.t_ref;
    opt.compute_se = false;
    opt.seed = mix_seed(seed, k);
    GevFitResult fit;
    try {
      fit = fit_gev(times, values, opt);
    } catch (const DataError&) {
      return std::nullopt;
    }
    if (!fit.converged) return std::nullopt;
    const auto kk = static_cast<Eigen::Index>(k);
    out[kk] = fit.params.mu0;
    out[L + kk] = fit.params.log_sigma;
    out[2 * L + kk] = fit.params.xi;
  }
  return out;
}

BootstrapReplicates block_bootstrap_stage1(const Dataset& ds,
                                           const Stage1Options& options, int B,
                                           std::uint64_t seed, int jobs) {
  if (B <= 0) throw std::invalid_argument("bootstrap: B must be positive");
  const auto obs_years = source_years(ds, Source::Obs);
  const auto sim_years = source_years(ds, Source::Sim);
  if (ds.count(Source::Obs) > 0 && obs_years.size() < 10)
    throw DataError("bootstrap: fewer than 10 years available for OBS sites");
  if (ds.count(Source::Sim) > 0 && sim_years.size() < 10)
    throw DataError("bootstrap: fewer than 10 years available for SIM sites");

  const auto n_obs = static_cast<Eigen::Index>(kParamsPerSite * ds.size());
  std::vector<std::optional<Eigen::VectorXd>> results(static_cast<std::size_t>(B));
  parallel_for(results.size(), jobs, [&](std::size_t b) {
    Rng rng = make_rng(seed, b);
    YearDraw draw;
    auto draw_from = [&rng](std::size_t n) {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(n) - 1);
      std::vector<int> out(n);
      for (auto& v : out) v = pick(rng);
      return out;
    };
    if (!obs_years.empty()) draw.obs_years = draw_from(obs_years.size());
    if (!sim_years.empty()) draw.sim_years = draw_from(sim_years.size());
    results[b] = bootstrap_replicate(ds, options, draw, mix_seed(seed, b + 0x5bd1e995ULL));
  });

  BootstrapReplicates out;
  out.n_requested = B;
  Eigen::Index kept = 0;
  for (const auto& r : results) kept += r.has_value();
  out.n_dropped = B - static_cast<int>(kept);
  if (out.n_dropped > 0.2 * B)
    throw FitError("bootstrap: " + std::to_string(out.n_dropped) + " of " +
                   std::to_string(B) + " replicates dropped (unstable Stage-1 fits)");
  out.rows.resize(kept, n_obs);
  Eigen::Index r = 0;
  for (const auto& rep : results)
    if (rep) out.rows.row(r++) = rep->transpose();
  return out;
}

double wendland_c4(double d, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("wendland_c4: lambda must be positive");
  if (d < 0.0) throw std::invalid_argument("wendland_c4: negative distance");
  const double r = d / lambda;
  if (r >= 1.0) return 0.0;
  const double a = 1.0 - r;
  const double a2 = a * a;
  return a2 * a2 * a2 * (35.0 * r * r + 18.0 * r + 3.0) / 3.0;
}

namespace {

bool is_symmetric(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale;
}

}  // namespace

SpdRepair spd_repair(const Eigen::MatrixXd& m) {
  if (!is_symmetric(m)) throw std::invalid_argument("spd_repair: matrix is not symmetric");
  SpdRepair out;
  if (m.size() == 0) return out;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd vals = eig.eigenvalues();
  const double floor = 1e-8 * std::max(vals.maxCoeff(), 0.0);
  if (vals.minCoeff() >= floor && floor > 0.0) {
    out.matrix = m;
    return out;
  }
  const Eigen::VectorXd clipped = vals.cwiseMax(floor);
  const Eigen::MatrixXd& q = eig.eigenvectors();
  out.matrix = q * clipped.asDiagonal() * q.transpose();
  out.matrix = 0.5 * (out.matrix + out.matrix.transpose()).eval();
  out.repaired = true;
  return out;
}

MeasurementCov build_measurement_cov(const BootstrapReplicates& replicates,
                                     const StackedObservations& stack,
                                     double lambda_km, int min_replicates) {
  const auto& x = replicates.rows;
  if (x.rows() < min_replicates)
    throw FitError("measurement covariance: " + std::to_string(x.rows()) +
                   " replicates, at least " + std::to_string(min_replicates) +
                   " required");
  if (x.cols() != stack.size())
    throw std::invalid_argument("measurement covariance: replicate width != n_obs");

  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);

  const auto n = stack.size();
  Eigen::MatrixXd taper(n, n);
  for (Eigen::Index m = 0; m < n; ++m)
    for (Eigen::Index k = m; k < n; ++k) {
      const double d =
          haversine_km(stack.sites[stack.s_index[m]], stack.sites[stack.s_index[k]]);
      taper(m, k) = taper(k, m) = stack.s_index[m] == stack.s_index[k]
                                      ? 1.0
                                      : wendland_c4(d, lambda_km);
    }
  cov = cov.cwiseProduct(taper);
  cov = 0.5 * (cov + cov.transpose()).eval();

  MeasurementCov out;
  out.taper_km = lambda_km;
  out.b_replicates = static_cast<int>(x.rows());
  out.layout_hash = stack.layout_hash();
  auto repaired = spd_repair(cov);
  out.repaired = repaired.repaired;
  out.w = std::move(repaired.matrix);
  if (out.repaired) {
    // Reconstruction smears the taper's exact zeros; restore them and shift
    // the diagonal if that pushed an eigenvalue below zero.
    for (Eigen::Index m = 0; m < n; ++m)
      for (Eigen::Index k = 0; k < n; ++k)
        if (taper(m, k) == 0.0) out.w(m, k) = 0.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.w, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double floor = 1e-8 * eig.eigenvalues().maxCoeff();
    if (lo < floor) out.w.diagonal().array() += floor - lo;
  }
  return out;
}

MeasurementCov restrict_cov(const MeasurementCov& w, std::span<const Eigen::Index> rows,
                            std::uint64_t layout_hash) {
  MeasurementCov out = w;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.w.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out.w(i, j) = w.w(rows[i], rows[j]);
  out.layout_hash = layout_hash;
  return out;
}

}  // namespace gevfuse
