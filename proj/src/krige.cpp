#include "gevfuse/krige.hpp"

#include <cmath>
#include <stdexcept>

#include "gevfuse/csv.hpp"
#include "gevfuse/data.hpp"
#include "gevfuse/errors.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/parallel.hpp"

namespace gevfuse {

namespace {

// Symmetrizes and clamps tiny negative variances; larger negativity means
// the fit or the factorization is broken.
void clean_covariance(Eigen::MatrixXd& cov, const Eigen::MatrixXd& prior) {
  cov = 0.5 * (cov + cov.transpose()).eval();
  for (Eigen::Index k = 0; k < cov.rows(); ++k) {
    const double tol = 1e-10 * std::max(1.0, prior(k, k));
    if (cov(k, k) < -tol)
      throw FitError("kriging variance of component " + std::to_string(k) +
                     " is negative (" + std::to_string(cov(k, k)) + ")");
    if (cov(k, k) < 0.0) cov(k, k) = 0.0;
  }
}

}  // namespace

Kriger::Kriger(LmcParams params, const StackedObservations& stack,
               const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist)
    : p_(std::move(params)), stack_(stack),
      factor_(factorize_observed(p_, stack, w, site_dist)) {
  loadings_.resize(stack.size(), p_.dim());
  for (Eigen::Index m = 0; m < stack.size(); ++m) loadings_.row(m) = p_.a.row(stack.p_index[m]);
}

KrigingResult Kriger::predict(double lat, double lon) const {
  const auto n = stack_.size();
  const int q = p_.dim();
  Eigen::MatrixXd decay(n, q);
  for (std::size_t l = 0; l < stack_.n_sites(); ++l) {
    const auto& s = stack_.sites[l];
    const double d = haversine_km(s.lat, s.lon, lat, lon);
    for (int slot = 0; slot < kParamsPerSite; ++slot)
      decay.row(stack_.row(l, slot)) = (-d / p_.rho.array()).exp().transpose();
  }
  const Eigen::MatrixXd c = loadings_.cwiseProduct(decay) * p_.a.transpose();
  KrigingResult out;
  out.theta = p_.beta + c.transpose() * factor_.alpha;
  const Eigen::MatrixXd half = factor_.llt.matrixL().solve(c);
  const Eigen::MatrixXd prior = p_.marginal_cov();
  out.cov = prior - half.transpose() * half;
  clean_covariance(out.cov, prior);
  return out;
}

KrigingResult krige_point(const LmcParams& p, const StackedObservations& stack,
                          const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist,
                          double lat, double lon) {
  return Kriger(p, stack, w, site_dist).predict(lat, lon);
}

std::vector<double> return_level_draws(const Eigen::Vector3d& mean,
                                       const Eigen::Matrix3d& cov, double T,
                                       int n_draws, std::uint64_t seed) {
  if (n_draws < 1) throw std::invalid_argument("n_draws must be positive");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(0.5 * (cov + cov.transpose()));
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale)
    throw FitError("predictive covariance of (mu, log sigma, xi) is not PSD");
  const Eigen::Matrix3d root = es.eigenvectors() *
                               es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                               es.eigenvectors().transpose();
  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal;
  std::vector<double> out(static_cast<std::size_t>(n_draws));
  for (auto& r : out) {
    const Eigen::Vector3d z(normal(rng), normal(rng), normal(rng));
    const Eigen::Vector3d th = mean + root * z;
    r = return_level(th[0], th[1], th[2], T);
  }
  return out;
}

ReturnLevelEstimate return_level_from_kriging(const KrigingResult& kr, double T,
                                              int n_draws, std::uint64_t seed) {
  if (kr.theta.size() < 3) throw std::invalid_argument("kriging result too small");
  const Eigen::Vector3d mean = kr.theta.head<3>();
  const Eigen::Matrix3d cov = kr.cov.topLeftCorner<3, 3>();
  ReturnLevelEstimate e;
  e.T = T;
  e.n_draws = n_draws;
  e.seed = seed;
  e.rl = return_level(mean[0], mean[1], mean[2], T);
  const Eigen::Vector3d g = return_level_gradient(mean[0], mean[1], mean[2], T);
  e.se_delta = std::sqrt(std::max(0.0, g.dot(cov * g)));
  const auto draws = return_level_draws(mean, cov, T, n_draws, seed);
  double m = 0.0;
  for (double r : draws) m += r;
  m /= static_cast<double>(draws.size());
  double ss = 0.0;
  for (double r : draws) ss += (r - m) * (r - m);
  e.se_mc = draws.size() > 1 ? std::sqrt(ss / static_cast<double>(draws.size() - 1)) : 0.0;
  return e;
}

std::vector<GridRow> krige_grid(const LmcParams& p, const StackedObservations& stack,
                                const Eigen::MatrixXd& w,
                                const Eigen::MatrixXd& site_dist,
                                std::span<const GridPoint> grid,
                                std::span<const double> return_periods, int n_draws,
                                std::uint64_t seed, int jobs) {
  if (grid.empty()) throw std::invalid_argument("krige_grid: empty grid");
  if (return_periods.empty()) throw std::invalid_argument("krige_grid: no return periods");
  for (double T : return_periods)
    if (!(T > 1.0)) throw std::invalid_argument("return period must exceed 1");
  const Kriger kriger(p, stack, w, site_dist);
  std::vector<GridRow> rows(grid.size());
  parallel_for(grid.size(), jobs, [&](std::size_t i) {
    try {
      GridRow r;
      r.point = grid[i];
      r.kriged = kriger.predict(grid[i].lat, grid[i].lon);
      for (double T : return_periods)
        r.levels.push_back(return_level_from_kriging(r.kriged, T, n_draws, seed));
      rows[i] = std::move(r);
    } catch (const FitError& e) {
      throw FitError("grid point " + std::to_string(i) + " ('" + grid[i].id +
                     "'): " + e.what());
    }
  });
  return rows;
}

std::vector<GridPoint> load_grid(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto c_id = t.column("point_id"), c_lat = t.column("lat"), c_lon = t.column("lon");
  std::vector<GridPoint> out;
  for (const auto& row : t.rows) {
    GridPoint g{row.fields[c_id], csv::parse_double(row.fields[c_lat], t, row.line),
                csv::parse_double(row.fields[c_lon], t, row.line)};
    if (g.lat < -90.0 || g.lat > 90.0 || g.lon < -180.0 || g.lon > 180.0)
      throw DataError("grid coordinate out of range at " + path.string() + ":" +
                      std::to_string(row.line));
    out.push_back(std::move(g));
  }
  if (out.empty()) throw DataError("grid file " + path.string() + " has no points");
  return out;
}

}  // namespace gevfuse
