#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gevfuse/errors.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/stats.hpp"

using namespace gevfuse;

namespace {

GevParams gev(double mu, double sigma, double xi) {
  GevParams p;
  p.mu0 = mu;
  p.log_sigma = std::log(sigma);
  p.xi = xi;
  return p;
}

AnnualMaximaSeries sample_series(Rng& rng, const GevParams& p, int n, int first_year = 1979) {
  AnnualMaximaSeries s;
  s.site_id = "x";
  for (int i = 0; i < n; ++i) {
    s.years.push_back(first_year + i);
    s.values.push_back(sample_gev(rng, p));
  }
  return s;
}

double rl_fd(const Eigen::Vector3d& x, double T, int k) {
  const double h = 1e-5;
  Eigen::Vector3d a = x, b = x;
  a[k] += h;
  b[k] -= h;
  return (return_level(a[0], a[1], a[2], T) - return_level(b[0], b[1], b[2], T)) / (2 * h);
}

}  // namespace

TEST_CASE("cdf examples") {
  CHECK(gev_cdf(0.0, gev(0, 1, 1)) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK(gev_cdf(2.5, gev(2.5, 3.0, 0.0)) == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  const auto p = gev(1.0, 2.0, 0.5);
  CHECK(gev_cdf(1.0 - 2.0 / 0.5 - 1e-9, p) == 0.0);
  const auto q = gev(0.0, 1.0, -0.5);
  CHECK(gev_cdf(2.0 + 1e-9, q) == 1.0);
}

TEST_CASE("log density examples") {
  CHECK(gev_logpdf(0.0, gev(0, 1, 0)) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(gev_logpdf(-2.5, gev(0, 1, 0.5)) == -INFINITY);
  const auto p = gev(0, 1, 0.2);
  const double h = 1e-5;
  const double deriv = (gev_cdf(1 + h, p) - gev_cdf(1 - h, p)) / (2 * h);
  CHECK(gev_logpdf(1.0, p) == doctest::Approx(std::log(deriv)).epsilon(1e-8));
  // Independent evaluation: log(1.2^-6 exp(-1.2^-5)).
  CHECK(gev_logpdf(1.0, p) == doctest::Approx(-1.49580691278019).epsilon(1e-12));
}

TEST_CASE("density is the derivative of the cdf") {
  for (double xi : {-0.3, -1e-9, 0.0, 1e-6, 0.2, 0.7}) {
    const auto p = gev(0.5, 0.8, xi);
    for (double prob = 0.02; prob < 0.99; prob += 0.04) {
      const double y = gev_quantile(prob, p), h = 1e-5;
      const double deriv = (gev_cdf(y + h, p) - gev_cdf(y - h, p)) / (2 * h);
      REQUIRE(std::abs(std::exp(gev_logpdf(y, p)) - deriv) < 1e-6);
    }
  }
}

TEST_CASE("return level examples") {
  CHECK(return_level(gev(0, 1, 0), 100) == doctest::Approx(-std::log(-std::log(0.99))).epsilon(1e-14));
  CHECK(return_level(gev(0, 1, 0), 100) == doctest::Approx(4.60014922677658).epsilon(1e-13));
  // Direct evaluation of (1/y_T - 1) with y_T = -log(0.99).
  CHECK(return_level(gev(0, 1, 1), 100) == doctest::Approx(98.4991624734222).epsilon(1e-13));
  CHECK(return_level(gev(5, 1.7, 0), 2) == doctest::Approx(5 - 1.7 * std::log(std::log(2.0))).epsilon(1e-15));
  CHECK_THROWS_AS(return_level(gev(0, 1, 0), 1.0), std::invalid_argument);
  // Nonstationary fits report the intercept at the reference year.
  auto p = gev(2, 1, 0.1);
  p.mu1 = 0.01;
  CHECK(return_level(p, 50) == return_level(gev(2, 1, 0.1), 50));
}

TEST_CASE("return level is increasing in T") {
  for (double xi : {-0.4, 0.0, 0.3}) {
    double prev = -INFINITY;
    for (double T = 1.5; T < 5000; T *= 1.7) {
      const double r = return_level(gev(1, 0.5, xi), T);
      REQUIRE(r > prev);
      prev = r;
    }
  }
}

TEST_CASE("cdf inverts the return level") {
  for (double xi : {-0.3, 0.0, 0.2, 0.5})
    for (double T : {2.0, 10.0, 100.0, 1000.0}) {
      const auto p = gev(0.7, 1.3, xi);
      REQUIRE(std::abs(gev_cdf(return_level(p, T), p) - (1 - 1 / T)) < 1e-10);
    }
}

TEST_CASE("return level gradient") {
  SUBCASE("location component is exactly one") {
    for (double xi : {-0.4, 0.0, 1e-9, 0.3})
      CHECK(return_level_gradient(0.2, -0.1, xi, 37.0)[0] == 1.0);
  }
  SUBCASE("finite differences at xi = 0.2") {
    const Eigen::Vector3d x(0, 0, 0.2);
    const auto g = return_level_gradient(x[0], x[1], x[2], 100);
    for (int k = 0; k < 3; ++k) CHECK(g[k] == doctest::Approx(rl_fd(x, 100, k)).epsilon(1e-6));
    CHECK(g[1] == doctest::Approx(7.54682640858578).epsilon(1e-12));
    CHECK(g[2] == doctest::Approx(19.9831417590269).epsilon(1e-12));
  }
  SUBCASE("scale component equals r - mu") {
    const auto p = gev(3, 0.7, 0.15);
    CHECK(return_level_gradient(p, 50)[1] == doctest::Approx(return_level(p, 50) - 3).epsilon(1e-14));
  }
  SUBCASE("grid straddling the Gumbel switch") {
    for (double xi : {-0.3, -1e-3, -5e-5, -1e-7, 0.0, 1e-7, 5e-5, 1e-3, 0.4})
      for (double T : {2.0, 10.0, 100.0, 1000.0})
        for (double ls : {-1.0, 0.3}) {
          const Eigen::Vector3d x(0.5, ls, xi);
          const auto g = return_level_gradient(x[0], x[1], x[2], T);
          for (int k = 0; k < 3; ++k) {
            const double f = rl_fd(x, T, k);
            REQUIRE(std::abs(g[k] - f) <= 1e-5 * std::max(1.0, std::abs(f)));
          }
        }
  }
}

TEST_CASE("fit recovers a large Gumbel sample") {
  Rng rng = make_rng(2024, 0);
  const auto s = sample_series(rng, gev(0, 1, 0), 10000, 1);
  const auto f = fit_gev(s, false);
  REQUIRE(f.converged);
  CHECK(std::abs(f.params.mu0) < 0.05);
  CHECK(std::abs(f.params.sigma() - 1) < 0.05);
  CHECK(std::abs(f.params.xi) < 0.05);
  CHECK(f.n_used == 10000);
  CHECK(!f.t_ref);
  CHECK(f.se.xi > 0.0);
}

TEST_CASE("shape standard error at the record length is of order 0.2") {
  std::vector<double> se;
  for (int seed = 0; seed < 500; ++seed) {
    Rng rng = make_rng(seed, 1);
    const auto f = fit_gev(sample_series(rng, gev(1, 0.3, 0.2), 43), false);
    if (f.converged && std::isfinite(f.se.xi)) se.push_back(f.se.xi);
  }
  REQUIRE(se.size() > 450);
  const double med = stats::median(se);
  CHECK(med > 0.1);
  CHECK(med < 0.35);
}

TEST_CASE("constant series is degenerate") {
  AnnualMaximaSeries s{"c", {}, {}, {}};
  for (int i = 0; i < 20; ++i) {
    s.years.push_back(1990 + i);
    s.values.push_back(1.5);
  }
  CHECK_THROWS_WITH_AS(fit_gev(s, false), "degenerate sample", DataError);
  s.years.resize(9);
  s.values.resize(9);
  s.values[0] = 2.0;
  CHECK_THROWS_AS(fit_gev(s, false), DataError);
}

TEST_CASE("fit error shrinks at the root-n rate") {
  const auto truth = gev(1, 0.5, 0.1);
  std::vector<double> log_n, log_rmse;
  for (int n : {50, 200, 1000, 5000}) {
    double ss = 0.0;
    const int reps = 200;
    for (int r = 0; r < reps; ++r) {
      Rng rng = make_rng(n, r);
      const auto s = sample_series(rng, truth, n, 1);
      GevFitOptions o;
      o.compute_se = false;
      const auto f = fit_gev(years_as_times(s), s.values, o);
      const Eigen::Vector3d e(f.params.mu0 - truth.mu0, f.params.log_sigma - truth.log_sigma,
                              f.params.xi - truth.xi);
      ss += e.squaredNorm();
    }
    log_n.push_back(std::log(n));
    log_rmse.push_back(0.5 * std::log(ss / reps));
  }
  const double mx = stats::mean(log_n), my = stats::mean(log_rmse);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < log_n.size(); ++i) {
    sxy += (log_n[i] - mx) * (log_rmse[i] - my);
    sxx += (log_n[i] - mx) * (log_n[i] - mx);
  }
  const double slope = sxy / sxx;
  CHECK(slope > -0.6);
  CHECK(slope < -0.4);
}

TEST_CASE("trend fit with the slope held at zero matches the stationary fit") {
  Rng rng = make_rng(8, 0);
  const auto s = sample_series(rng, gev(1.2, 0.25, 0.05), 43);
  const auto t = years_as_times(s);
  GevFitOptions stat;
  GevFitOptions held;
  held.nonstationary = true;
  held.fixed_mu1 = 0.0;
  const auto a = fit_gev(t, s.values, stat);
  const auto b = fit_gev(t, s.values, held);
  REQUIRE(a.converged);
  REQUIRE(b.converged);
  CHECK(std::abs(a.nll - b.nll) < 1e-6);

  const auto free_fit = fit_gev(s, true, 2000);
  REQUIRE(free_fit.params.mu1);
  CHECK(free_fit.t_ref == 2000.0);
  CHECK(free_fit.nll <= a.nll + 1e-9);
  CHECK(gev_nll(t, s.values, free_fit.params) == doctest::Approx(free_fit.nll).epsilon(1e-12));
}

TEST_CASE("nonstationary fit recovers a location trend") {
  auto p = gev(2.0, 0.2, 0.0);
  p.mu1 = 0.02;
  Rng rng = make_rng(31, 0);
  AnnualMaximaSeries s{"t", {}, {}, {}};
  for (int y = 1900; y < 2100; ++y) {
    s.years.push_back(y);
    s.values.push_back(sample_gev(rng, p, y));
  }
  const auto f = fit_gev(s, true, 2000);
  REQUIRE(f.converged);
  CHECK(std::abs(*f.params.mu1 - 0.02) < 3 * *f.se.mu1);
  CHECK(std::abs(f.params.mu0 - 2.0) < 3 * f.se.mu0);
}

TEST_CASE("Mann-Kendall") {
  const std::vector<double> up{1, 2, 3, 4, 5};
  const auto r = mann_kendall(up);
  CHECK(r.s_stat == 10);
  CHECK(r.z == doctest::Approx(9.0 / std::sqrt(50.0 / 3.0)).epsilon(1e-14));
  CHECK(r.z == doctest::Approx(2.20454076850486).epsilon(1e-13));
  CHECK(r.p_value == doctest::Approx(0.0274863361115103).epsilon(1e-10));
  CHECK(!r.sen_slope);

  const std::vector<double> flat(8, 3.0);
  const auto c = mann_kendall(flat);
  CHECK(c.s_stat == 0);
  CHECK(c.p_value == 1.0);

  Rng rng = make_rng(4, 0);
  std::normal_distribution<double> z(0, 1);
  std::vector<double> x(30);
  for (auto& v : x) v = std::round(4 * z(rng)) / 4;  // ties
  auto rev = x;
  std::reverse(rev.begin(), rev.end());
  const auto f = mann_kendall(x), b = mann_kendall(rev);
  CHECK(f.s_stat == -b.s_stat);
  CHECK(f.z == -b.z);
  CHECK(f.p_value == b.p_value);
  CHECK((f.z == 0 || (f.z > 0) == (f.s_stat > 0)));

  const std::vector<double> two{1, 2};
  CHECK_THROWS_AS(mann_kendall(two), std::invalid_argument);
}

TEST_CASE("Sen's slope") {
  std::vector<double> years, v;
  for (int y = 1980; y < 2000; ++y) {
    years.push_back(y);
    v.push_back(2.0 * y + 7);
  }
  CHECK(sen_slope(years, v) == 2.0);
  const std::vector<double> t3{1, 2, 3}, v3{0, 1, 0};
  CHECK(sen_slope(t3, v3) == 0.0);
  const std::vector<double> one{1};
  CHECK_THROWS_AS(sen_slope(one, one), std::invalid_argument);

  std::vector<int> int_years(years.begin(), years.end());
  AnnualMaximaSeries s{"tr", int_years, v, {}};
  const auto tt = trend_test(s);
  REQUIRE(tt.sen_slope);
  CHECK(*tt.sen_slope == 2.0);
}

TEST_CASE("Sen's slope recovers an injected trend") {
  const double slope = 0.0046;
  std::vector<double> est;
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng = make_rng(seed, 7);
    std::normal_distribution<double> z(0, 0.1);
    std::vector<double> t, v;
    for (int y = 1979; y <= 2021; ++y) {
      t.push_back(y);
      v.push_back(1.0 + slope * (y - 2000) + z(rng));
    }
    est.push_back(sen_slope(t, v));
  }
  const double se = stats::sd(est) / std::sqrt(200.0);
  CHECK(std::abs(stats::mean(est) - slope) < 2 * se);
}

TEST_CASE("Anderson-Darling bootstrap test") {
  SUBCASE("guard") {
    Rng rng = make_rng(1, 0);
    const auto s = sample_series(rng, gev(1, 0.3, 0.1), 40);
    const auto f = fit_gev(s, false);
    CHECK_THROWS_WITH(ad_gof(s, f, 0), "n_boot must be positive");
    const auto a = ad_gof(s, f, 50, 3);
    CHECK(a.p_value > 0.0);
    CHECK(a.p_value <= 1.0);
    CHECK(a.n_boot_used + a.n_skipped == 50);
    CHECK(a.p_value == ad_gof(s, f, 50, 3).p_value);
  }
  SUBCASE("size under the null") {
    int rejected = 0;
    for (int r = 0; r < 500; ++r) {
      Rng rng = make_rng(77, r);
      const auto s = sample_series(rng, gev(1, 0.3, 0.1), 43);
      rejected += ad_gof(s, fit_gev(s, false), 999, r).p_value < 0.05;
    }
    const double rate = rejected / 500.0;
    CHECK(rate >= 0.03);
    CHECK(rate <= 0.08);
  }
  SUBCASE("power against a bimodal sample") {
    int rejected = 0;
    for (int r = 0; r < 50; ++r) {
      Rng rng = make_rng(5, r);
      std::normal_distribution<double> z(0, 1);
      std::bernoulli_distribution coin(0.5);
      AnnualMaximaSeries s{"m", {}, {}, {}};
      for (int i = 0; i < 200; ++i) {
        s.years.push_back(1800 + i);
        s.values.push_back(z(rng) + (coin(rng) ? 4.0 : 0.0));
      }
      rejected += ad_gof(s, fit_gev(s, false), 999, r).p_value < 0.05;
    }
    CHECK(rejected >= 45);
  }
}

TEST_CASE("stage one fits every site and honours the trend switch") {
  std::vector<Site> sites{{"o", Source::Obs, 30, -80}, {"s", Source::Sim, 31, -80}};
  Rng rng = make_rng(12, 0);
  auto a = sample_series(rng, gev(1, 0.3, 0.1), 43);
  a.site_id = "o";
  auto b = sample_series(rng, gev(2, 0.2, 0.0), 43);
  b.site_id = "s";
  const auto ds = make_dataset(sites, {a, b});
  Stage1Options o;
  const auto fits = fit_stage1(ds, o, 2);
  REQUIRE(fits.size() == 2);
  CHECK(fits[0].params.mu1.has_value());
  CHECK(!fits[1].params.mu1.has_value());
  const auto serial = fit_stage1(ds, o, 1);
  CHECK(serial[0].nll == fits[0].nll);
  CHECK(serial[1].params.xi == fits[1].params.xi);
}
