#include "gevfuse/simulate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "gevfuse/bootstrap.hpp"
#include "gevfuse/errors.hpp"
#include "gevfuse/marginal.hpp"

namespace gevfuse {

namespace {

Eigen::VectorXd standard_normals(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
  return z;
}

// Lower Cholesky factor of a correlation matrix, with a tiny ridge if needed.
Eigen::MatrixXd correlation_factor(const Eigen::MatrixXd& c) {
  for (double ridge : {0.0, 1e-12, 1e-10, 1e-8}) {
    Eigen::MatrixXd m = c;
    m.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw FitError("latent correlation matrix is not positive definite");
}

std::vector<Site> sorted_sites(std::vector<Site> sites) {
  std::sort(sites.begin(), sites.end(),
            [](const Site& a, const Site& b) { return a.id < b.id; });
  return sites;
}

// Rows of the latent field re-expressed as one triplet per site, each on its
// own source's slots.
Eigen::MatrixXd observed_triplets(const LmcParams& p, const std::vector<Site>& sites,
                                  const Eigen::MatrixXd& latent) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(sites.size()), 3);
  for (std::size_t l = 0; l < sites.size(); ++l) {
    const int offset = p.dim() == 3 ? 0 : (sites[l].source == Source::Obs ? 0 : 3);
    out.row(static_cast<Eigen::Index>(l)) =
        latent.row(static_cast<Eigen::Index>(l)).segment(offset, 3);
  }
  return out;
}

void check_single_source(const LmcParams& p, const std::vector<Site>& sites) {
  if (p.dim() != 3 && p.dim() != 6)
    throw std::invalid_argument("simulation needs a 3- or 6-dimensional model");
  if (p.dim() == 3)
    for (const auto& s : sites)
      if (s.source != sites.front().source)
        throw std::invalid_argument("a 3-dimensional model covers one source only");
}

}  // namespace

Eigen::MatrixXd simulate_latent(const LmcParams& p, const Eigen::MatrixXd& site_dist,
                                Rng& rng) {
  const auto l = site_dist.rows();
  const int q = p.dim();
  Eigen::MatrixXd delta(l, q);
  for (int i = 0; i < q; ++i) {
    const Eigen::MatrixXd corr = (site_dist.array() * (-1.0 / p.rho[i])).exp().matrix();
    delta.col(i) = correlation_factor(corr) * standard_normals(l, rng);
  }
  Eigen::MatrixXd theta = delta * p.a.transpose();
  theta.rowwise() += p.beta.transpose();
  return theta;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw FitError("eigen-decomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

StackedObservations simulate_stack_with_root(const LmcParams& p,
                                             const std::vector<Site>& sites,
                                             const Eigen::MatrixXd* w_root,
                                             std::uint64_t seed) {
  check_single_source(p, sites);
  const auto ordered = sorted_sites(sites);
  Rng rng = make_rng(seed, 0);
  const Eigen::MatrixXd latent = simulate_latent(p, distance_matrix(ordered), rng);
  auto stack = stack_from_triplets(ordered, observed_triplets(p, ordered, latent), p.dim());
  if (w_root) {
    if (w_root->rows() != stack.size())
      throw std::invalid_argument("measurement covariance does not match the design");
    stack.values += *w_root * standard_normals(stack.size(), rng);
  }
  return stack;
}

StackedObservations simulate_stack(const LmcParams& p, const std::vector<Site>& sites,
                                   const Eigen::MatrixXd* w, std::uint64_t seed) {
  if (!w) return simulate_stack_with_root(p, sites, nullptr, seed);
  const Eigen::MatrixXd root = psd_sqrt(*w);
  return simulate_stack_with_root(p, sites, &root, seed);
}

Dataset simulate_full(const LmcParams& p, const std::vector<Site>& sites,
                      const FullModeOptions& options, std::uint64_t seed) {
  check_single_source(p, sites);
  if (options.n_years < 1) throw std::invalid_argument("n_years must be positive");
  const auto ordered = sorted_sites(sites);
  Rng rng = make_rng(seed, 0);
  const Eigen::MatrixXd latent = simulate_latent(p, distance_matrix(ordered), rng);
  const Eigen::MatrixXd triplets = observed_triplets(p, ordered, latent);

  std::vector<AnnualMaximaSeries> series;
  for (std::size_t l = 0; l < ordered.size(); ++l) {
    const auto row = static_cast<Eigen::Index>(l);
    GevParams g;
    g.mu0 = triplets(row, 0);
    g.log_sigma = triplets(row, 1);
    g.xi = triplets(row, 2);
    g.t_ref = options.t_ref;
    if (ordered[l].source == Source::Obs && options.obs_trend != 0.0) g.mu1 = options.obs_trend;
    Rng site_rng = make_rng(seed, l + 1);
    AnnualMaximaSeries s;
    s.site_id = ordered[l].id;
    for (int k = 0; k < options.n_years; ++k) {
      const int year = options.first_year + k;
      s.years.push_back(year);
      s.values.push_back(sample_gev(site_rng, g, static_cast<double>(year)));
    }
    series.push_back(std::move(s));
  }
  return make_dataset(ordered, std::move(series));
}

std::vector<Site> coastal_design(int n_obs, int n_sim) {
  if (n_obs < 0 || n_sim < 0 || n_obs + n_sim == 0)
    throw std::invalid_argument("coastal_design: need at least one site");
  // Texas to Maine, following the Gulf and Atlantic coasts.
  static constexpr std::array<std::array<double, 2>, 21> kCoast{{
      {25.96, -97.15}, {27.80, -97.39}, {29.31, -94.79}, {29.73, -93.87},
      {29.26, -89.96}, {30.40, -87.21}, {29.73, -84.98}, {29.14, -83.03},
      {27.76, -82.63}, {26.13, -81.81}, {24.55, -81.81}, {25.77, -80.13},
      {30.40, -81.43}, {32.78, -79.92}, {35.22, -75.63}, {36.95, -76.33},
      {39.36, -74.42}, {40.70, -74.01}, {42.35, -71.05}, {43.66, -70.25},
      {44.90, -66.98},
  }};
  std::vector<double> cumulative{0.0};
  for (std::size_t i = 1; i < kCoast.size(); ++i)
    cumulative.push_back(cumulative.back() + haversine_km(kCoast[i - 1][0], kCoast[i - 1][1],
                                                          kCoast[i][0], kCoast[i][1]));
  const int total = n_obs + n_sim;
  std::vector<Site> sites;
  int obs_count = 0;
  int sim_count = 0;
  for (int k = 0; k < total; ++k) {
    const double s = (k + 0.5) / total * cumulative.back();
    const auto seg = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), s) - cumulative.begin());
    const std::size_t i = std::clamp<std::size_t>(seg, 1, kCoast.size() - 1);
    const double f = (s - cumulative[i - 1]) / (cumulative[i] - cumulative[i - 1]);
    const double lat = kCoast[i - 1][0] + f * (kCoast[i][0] - kCoast[i - 1][0]);
    const double lon = kCoast[i - 1][1] + f * (kCoast[i][1] - kCoast[i - 1][1]);
    const bool obs = (static_cast<long>(k + 1) * n_obs) / total >
                     (static_cast<long>(k) * n_obs) / total;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%03d", obs ? "OBS" : "SIM", obs ? obs_count++ : sim_count++);
    sites.push_back({id, obs ? Source::Obs : Source::Sim, lat, lon});
  }
  return sites;
}

LmcParams reference_truth() {
  Eigen::VectorXd sd(6);
  sd << 0.9, 0.3, 0.15, 0.85, 0.3, 0.15;
  const Eigen::Vector3d cross(0.995, 0.443, 0.837);
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(6, 6);
  for (int k = 0; k < 3; ++k) r(k, k + 3) = r(k + 3, k) = cross[k];
  const Eigen::MatrixXd m = sd.asDiagonal() * r * sd.asDiagonal();
  LmcParams p;
  p.beta.resize(6);
  p.beta << 1.2, -1.2, 0.1, 1.0, -1.3, 0.05;
  p.a = m.llt().matrixL();
  p.rho.resize(6);
  p.rho << 2873.0, 900.0, 500.0, 188.0, 400.0, 300.0;
  return p;
}

Eigen::MatrixXd synthetic_measurement_cov(const StackedObservations& stack,
                                          const SyntheticNoise& noise) {
  Eigen::Matrix3d within = Eigen::Matrix3d::Identity();
  within(0, 1) = within(1, 0) = noise.within[0];
  within(0, 2) = within(2, 0) = noise.within[1];
  within(1, 2) = within(2, 1) = noise.within[2];
  const auto l = stack.n_sites();
  const Eigen::MatrixXd d = distance_matrix(stack.sites);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(stack.size(), stack.size());
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      if (stack.sites[i].source != stack.sites[j].source) continue;
      const double c =
          i == j ? 1.0
                 : noise.cross_site * wendland_c4(d(static_cast<Eigen::Index>(i),
                                                    static_cast<Eigen::Index>(j)),
                                                  noise.range_km);
      if (c == 0.0) continue;
      const auto& se = stack.sites[i].source == Source::Obs ? noise.obs_se : noise.sim_se;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          w(stack.row(i, a), stack.row(j, b)) = se[a] * se[b] * within(a, b) * c;
    }
  }
  return w;
}

}  // namespace gevfuse
