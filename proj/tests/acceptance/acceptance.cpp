// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// `acceptance --only 1 --only 8` runs a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "gevfuse/bootstrap.hpp"
#include "gevfuse/lmc.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/simulate.hpp"
#include "gevfuse/validate.hpp"
#include "oracles.hpp"

using namespace gevfuse;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  Rng pick = make_rng(101, 0);
  std::uniform_int_distribution<int> size(4, 20);
  double worst = 0.0;
  int points = 0;
  for (int k = 0; k < 10; ++k) {
    const auto in = oracle::random_instance(1000 + static_cast<std::uint64_t>(k), size(pick));
    const LmcLikelihood lik(in.stack, in.w, in.dist);
    Rng rng = make_rng(102, static_cast<std::uint64_t>(k));
    for (int pt = 0; pt < 25; ++pt, ++points) {
      const VectorXd x = pack(oracle::random_params(rng));
      VectorXd g;
      lik.value_and_gradient(x, g);
      if (g.size() != 33) return {false, "gradient has " + std::to_string(g.size()) + " components"};
      worst = std::max(worst, oracle::gradient_violation(
                                  [&](const VectorXd& y) { return lik.value(y); }, g, x, 1e-5));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1.0 && secs < 30.0,
          fmt::format("{} points x 33 components, worst |g-fd|/(1e-5|fd|) = {:.3g}, {:.1f} s",
                      points, worst, secs)};
}

Outcome selection_oracle() {
  Rng pick = make_rng(201, 0);
  std::uniform_int_distribution<int> size(2, 6);
  double sigma_err = 0.0, nll_err = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto in = oracle::random_instance(2000 + static_cast<std::uint64_t>(k), size(pick));
    const MatrixXd s = sigma_obs(in.params, in.stack, in.dist);
    sigma_err = std::max(sigma_err, (s - oracle::dense_sigma_obs(in.params, in.stack, in.dist))
                                        .cwiseAbs()
                                        .maxCoeff());
    const double got = nll(pack(in.params), in.stack, in.w, in.dist);
    const double want = oracle::dense_nll(in.params, in.stack, in.w, in.dist);
    nll_err = std::max(nll_err, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  return {sigma_err <= 1e-10 && nll_err <= 1e-10,
          fmt::format("50 instances, max |sigma - dense| = {:.2g}, max nll error = {:.2g}",
                      sigma_err, nll_err)};
}

Outcome loo_shortcut_oracle() {
  double err = 0.0;
  int checked = 0;
  for (int k = 0; k < 20; ++k) {
    const auto in = oracle::random_instance(3000 + static_cast<std::uint64_t>(k), 3 + k % 12);
    LooOptions o;
    o.n_draws = 200;
    const auto out = loo_block(in.params, in.stack, in.w, in.dist, Source::Obs, o);
    const MatrixXd v = oracle::dense_sigma_obs(in.params, in.stack, in.dist) + in.w;
    const VectorXd mean = in.stack.values - oracle::residual(in.params, in.stack);
    std::size_t j = 0;
    for (std::size_t s = 0; s < in.stack.n_sites(); ++s) {
      if (in.stack.sites[s].source != Source::Obs) continue;
      const auto rows = in.stack.site_rows(s);
      const auto want =
          oracle::partitioned(mean, v, in.stack.values, {rows[0], rows[1], rows[2]});
      const auto& got = out.sites.at(j++);
      err = std::max({err, (got.predicted - want.mean).cwiseAbs().maxCoeff(),
                      (got.pred_cov - want.cov).cwiseAbs().maxCoeff()});
      ++checked;
    }
    if (j != out.sites.size()) return {false, "site count mismatch"};
  }
  return {err <= 1e-8,
          fmt::format("20 instances, {} held-out sites, max error {:.2g}", checked, err)};
}

Outcome gev_round_trips() {
  double cdf_err = 0.0;
  for (double xi : {-0.3, 0.0, 0.2, 0.5})
    for (double T : {2.0, 10.0, 100.0, 1000.0})
      for (double mu : {-1.0, 2.5})
        for (double ls : {-0.7, 0.4}) {
          GevParams p;
          p.mu0 = mu;
          p.log_sigma = ls;
          p.xi = xi;
          cdf_err = std::max(cdf_err, std::abs(gev_cdf(return_level(p, T), p) - (1.0 - 1.0 / T)));
        }
  double grad_err = 0.0;
  const double h = 1e-5;
  for (double xi : {-0.3, -1e-3, -2e-8, -1e-8, -5e-9, 0.0, 5e-9, 1e-8, 2e-8, 1e-6, 1e-3, 0.2, 0.5})
    for (double T : {2.0, 10.0, 100.0, 1000.0}) {
      const Eigen::Vector3d x(0.5, 0.3, xi);
      const auto g = return_level_gradient(x[0], x[1], x[2], T);
      for (int k = 0; k < 3; ++k) {
        Eigen::Vector3d a = x, b = x;
        a[k] += h;
        b[k] -= h;
        const double f =
            (return_level(a[0], a[1], a[2], T) - return_level(b[0], b[1], b[2], T)) / (2 * h);
        grad_err = std::max(grad_err, std::abs(g[k] - f) / std::max(1.0, std::abs(f)));
      }
    }
  return {cdf_err <= 1e-10 && grad_err <= 1e-5,
          fmt::format("max |F(r_T) - (1-1/T)| = {:.2g}, max gradient error = {:.2g}", cdf_err,
                      grad_err)};
}

Outcome identifiability(int n_reps, int n_starts) {
  const auto t0 = Clock::now();
  const auto sites = coastal_design(29, 100);
  const auto layout = stack_from_triplets(sites, MatrixXd::Zero(129, 3));
  const MatrixXd w = synthetic_measurement_cov(layout);
  LmcFitOptions lmc;
  lmc.n_starts = n_starts;
  lmc.seed = 5;
  const auto truth = reference_truth();
  const auto r = identifiability_study(truth, sites, w, n_reps, 11, lmc);
  const auto& mu = r.rows.at(0);
  const auto& xi = r.rows.at(2);
  const bool pass = std::abs(mu.median - mu.truth) <= 0.02 && mu.sd <= 0.03 && xi.sd >= 0.2;
  return {pass, fmt::format("{} reps x {} starts: cor_mu truth {:.3f} median {:.3f} sd {:.3f}; "
                            "cor_xi sd {:.3f}; {} failed fits; {:.0f} s on one core",
                            n_reps, n_starts, mu.truth, mu.median, mu.sd, xi.sd, r.n_failed,
                            seconds_since(t0))};
}

struct FusionSeed {
  double joint_rmse = 0.0;
  double baseline_rmse = 0.0;
  double mu_pct = 0.0;
  double log_sigma_pct = 0.0;
  double fit_seconds = 0.0;
};

// Full-mode synthetic replicate: Stage 1, bootstrap W, joint and baseline
// fits, then LOO over the gauges for both.
FusionSeed fusion_seed(int seed, int B, int n_starts) {
  const auto sites = coastal_design(29, 100);
  FullModeOptions fo;
  fo.obs_trend = 0.0046;
  const auto ds = simulate_full(reference_truth(), sites, fo, 1000 + static_cast<std::uint64_t>(seed));
  const Stage1Options so;
  const auto fits = fit_stage1(ds, so);
  const auto st = stack_stage1(ds, fits);
  const auto reps = block_bootstrap_stage1(ds, so, B, 2000 + static_cast<std::uint64_t>(seed));
  const auto w = build_measurement_cov(reps, st, 300.0, 50);
  const auto d = distance_matrix(st.sites);
  LmcFitOptions o;
  o.n_starts = n_starts;
  o.seed = static_cast<std::uint64_t>(seed);
  const auto t0 = Clock::now();
  const auto joint = fit_lmc(st, w.w, d, o);
  FusionSeed out;
  out.fit_seconds = seconds_since(t0);
  std::vector<Eigen::Index> rows;
  const auto base = single_source(st, Source::Obs, &rows);
  const MatrixXd bw = w.w(rows, rows);
  const auto bd = distance_matrix(base.sites);
  const auto bfit = fit_lmc(base, bw, bd, o);
  const LooOptions lo{100.0, 10000, 5};
  const auto jl = loo_block(joint.params, st, w.w, d, Source::Obs, lo);
  const auto bl = loo_block(bfit.params, base, bw, bd, Source::Obs, lo);
  const auto dec = rmse_decomposition(jl.sites, bl.sites, 100.0);
  out.joint_rmse = jl.report.rmse_rl;
  out.baseline_rmse = bl.report.rmse_rl;
  for (const auto& row : dec) {
    if (row.label == "mu") out.mu_pct = row.reduction_pct;
    if (row.label == "log_sigma") out.log_sigma_pct = row.reduction_pct;
  }
  return out;
}

Outcome fusion_direction(int n_seeds, int B, int n_starts, std::vector<double>& fit_seconds) {
  const auto t0 = Clock::now();
  int wins = 0;
  std::vector<double> mu, ls;
  for (int s = 0; s < n_seeds; ++s) {
    const auto r = fusion_seed(s, B, n_starts);
    wins += r.joint_rmse < r.baseline_rmse;
    mu.push_back(r.mu_pct);
    ls.push_back(r.log_sigma_pct);
    fit_seconds.push_back(r.fit_seconds);
    progress(fmt::format("fusion seed {}: rmse joint {:.3f} baseline {:.3f}, mu {:+.1f}% "
                         "log_sigma {:+.1f}%",
                         s, r.joint_rmse, r.baseline_rmse, r.mu_pct, r.log_sigma_pct));
  }
  const double mu_med = median(mu), ls_med = median(ls);
  const bool pass = wins >= 0.8 * n_seeds && mu_med > ls_med;
  return {pass, fmt::format("joint wins {}/{} seeds (B={}, {} starts); median reduction "
                            "mu {:+.1f}% vs log_sigma {:+.1f}%; {:.0f} s",
                            wins, n_seeds, B, n_starts, mu_med, ls_med, seconds_since(t0))};
}

Outcome calibration(int n_seeds) {
  const auto t0 = Clock::now();
  const auto sites = coastal_design(200, 100);
  const auto layout = stack_from_triplets(sites, MatrixXd::Zero(300, 3));
  const MatrixXd w = synthetic_measurement_cov(layout);
  const MatrixXd root = psd_sqrt(w);
  const auto truth = reference_truth();
  const auto d = distance_matrix(layout.sites);
  std::vector<LooSiteResult> pooled;
  std::array<int, kScoredQuantities> ks_pass{};
  for (int s = 0; s < n_seeds; ++s) {
    const auto st = simulate_stack_with_root(truth, sites, &root, 5000 + static_cast<std::uint64_t>(s));
    const LooOptions lo{100.0, 4000, static_cast<std::uint64_t>(s)};
    const auto out = loo_block(truth, st, w, d, Source::Obs, lo);
    for (int q = 0; q < kScoredQuantities; ++q) ks_pass[q] += out.report.ks_p[q] >= 0.01;
    pooled.insert(pooled.end(), out.sites.begin(), out.sites.end());
  }
  const auto table = pit_and_coverage(pooled);
  double worst_cov = 0.0;
  std::string cov_text;
  for (std::size_t lv = 0; lv < kCoverageLevels.size(); ++lv) {
    cov_text += fmt::format(" {:.0f}%:", 100 * kCoverageLevels[lv]);
    for (int q = 0; q < kScoredQuantities; ++q) {
      const double c = table.coverage[lv][q];
      worst_cov = std::max(worst_cov, std::abs(c - kCoverageLevels[lv]));
      cov_text += fmt::format(" {:.1f}", 100 * c);
    }
  }
  const int min_ks = *std::min_element(ks_pass.begin(), ks_pass.end());
  const bool pass = worst_cov <= 0.05 && min_ks >= 0.95 * n_seeds;
  return {pass, fmt::format("{} seeds x 200 gauges, coverage (mu, log_sigma, xi, rl){}; "
                            "worst gap {:.1f} points; KS pass {}/{} {}/{} {}/{} {}/{}; {:.0f} s",
                            n_seeds, cov_text, 100 * worst_cov, ks_pass[0], n_seeds, ks_pass[1],
                            n_seeds, ks_pass[2], n_seeds, ks_pass[3], n_seeds,
                            seconds_since(t0))};
}

Outcome wendland_exactness() {
  double err = 0.0;
  for (double lambda : {1.0, 300.0, 1234.5}) {
    err = std::max(err, std::abs(wendland_c4(0.0, lambda) - 1.0));
    for (double f : {1.0, 1.0 + 1e-12, 1.5, 10.0}) err = std::max(err, std::abs(wendland_c4(f * lambda, lambda)));
    err = std::max(err, std::abs(wendland_c4(lambda / 2, lambda) - 20.75 / 192.0));
  }
  return {err <= 1e-15, fmt::format("max error {:.2g}", err)};
}

Outcome performance(const std::vector<double>& fusion_fit_seconds) {
  const auto sites = coastal_design(29, 100);
  const auto layout = stack_from_triplets(sites, MatrixXd::Zero(129, 3));
  const MatrixXd w = synthetic_measurement_cov(layout);
  const auto st = simulate_stack(reference_truth(), sites, &w, 1);
  const auto d = distance_matrix(st.sites);
  const LmcLikelihood lik(st, w, d);
  const VectorXd x = pack(reference_truth());
  VectorXd g;
  lik.value_and_gradient(x, g);
  const int reps = 20;
  auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) lik.value_and_gradient(x, g);
  const double eval_ms = 1000.0 * seconds_since(t0) / reps;

  LmcFitOptions o;
  o.n_starts = 20;
  o.seed = 3;
  t0 = Clock::now();
  fit_lmc(st, w, d, o);
  const double fit_s = seconds_since(t0);
  double worst = fit_s;
  std::string extra;
  if (!fusion_fit_seconds.empty()) {
    const double fm = *std::max_element(fusion_fit_seconds.begin(), fusion_fit_seconds.end());
    worst = std::max(worst, fm);
    extra = fmt::format(", slowest 20-start fit on bootstrap-W data {:.1f} s", fm);
  }
  return {eval_ms < 100.0 && worst < 180.0,
          fmt::format("nll+gradient at n={} {:.1f} ms; 20-start fit {:.1f} s{}", st.size(),
                      eval_ms, fit_s, extra)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      "\"" + std::string(GEVFUSE_CLI) + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

// Runs every seeded CLI stage into `dir`; returns an error message or "".
std::string cli_pipeline(const fs::path& dir, int jobs) {
  const fs::path fx = FIXTURE_DIR;
  const std::string common = "--seed 7 --jobs " + std::to_string(jobs) + " --out-dir \"" +
                             dir.string() + "\" --sites \"" + (fx / "sites.csv").string() +
                             "\" --maxima \"" + (fx / "maxima.csv").string() + "\"";
  const std::vector<std::string> stages{
      "fit-stage1",
      "trends",
      "bootstrap-w --B 200",
      "fit-lmc --n-starts 6",
      "krige --grid \"" + (fx / "grid.csv").string() + "\" --T 100 --n-draws 4000",
      "loocv --n-draws 4000",
      "blockcv --blocks \"" + (fx / "blocks.csv").string() + "\" --n-starts 3 --n-draws 4000",
      "saturation --sizes 0 --sizes 6 --sizes 12 --draws 2 --n-starts 3 --n-draws 2000",
      "simulate --mode full --n-obs 5 --n-sim 8",
      "identifiability --n-reps 4 --n-obs 5 --n-sim 8 --n-starts 3",
  };
  const auto log = dir.string() + ".log";
  for (const auto& s : stages)
    if (!run_cli(s + " " + common, log)) return "stage '" + s + "' failed:\n" + slurp(log);
  return "";
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() /
                    ("gevfuse_acceptance_" + std::to_string(std::random_device{}()));
  fs::create_directories(root);
  struct Cleanup {
    fs::path p;
    ~Cleanup() { fs::remove_all(p); }
  } cleanup{root};
  const std::vector<std::pair<std::string, int>> runs{{"j1", 1}, {"j4", 4}, {"j1_again", 1}};
  for (const auto& [name, jobs] : runs)
    if (auto err = cli_pipeline(root / name, jobs); !err.empty()) return {false, err};
  int files = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::directory_iterator(root / "j1")) {
    const auto ref = slurp(e.path());
    for (const char* other : {"j4", "j1_again"}) {
      const auto p = root / other / e.path().filename();
      if (!fs::exists(p) || slurp(p) != ref)
        differing.push_back(std::string(other) + "/" + e.path().filename().string());
    }
    ++files;
  }
  std::string detail = fmt::format("{} artifacts compared across --jobs 1, --jobs 4 and a rerun",
                                   files);
  for (const auto& f : differing) detail += "; differs: " + f;
  return {differing.empty() && files >= 18, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  int ident_reps = 100, ident_starts = 5, fusion_seeds = 20, fusion_b = 500,
      fusion_starts = 20, calib_seeds = 100;
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--ident-reps", ident_reps, "Identifiability replicates");
  app.add_option("--ident-starts", ident_starts, "Starts per identifiability refit");
  app.add_option("--fusion-seeds", fusion_seeds, "Full-mode replicates for fusion direction");
  app.add_option("--fusion-B", fusion_b, "Bootstrap replicates per fusion replicate");
  app.add_option("--fusion-starts", fusion_starts, "Starts per fusion fit");
  app.add_option("--calib-seeds", calib_seeds, "Calibration replicates");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::map<int, Outcome> results;
  std::vector<double> fusion_fit_seconds;
  auto run = [&](int c, const std::function<Outcome()>& f) {
    if (!wanted(c)) return;
    std::cerr << "criterion " << c << " running" << std::endl;
    try {
      results[c] = f();
    } catch (const std::exception& e) {
      results[c] = {false, std::string("exception: ") + e.what()};
    }
    std::cerr << "criterion " << c << (results[c].pass ? " PASS " : " FAIL ")
              << results[c].detail << std::endl;
  };
  run(1, gradient_correctness);
  run(2, selection_oracle);
  run(3, loo_shortcut_oracle);
  run(4, gev_round_trips);
  run(8, wendland_exactness);
  run(10, determinism);
  run(7, [&] { return calibration(calib_seeds); });
  run(6, [&] { return fusion_direction(fusion_seeds, fusion_b, fusion_starts, fusion_fit_seconds); });
  run(9, [&] { return performance(fusion_fit_seconds); });
  run(5, [&] { return identifiability(ident_reps, ident_starts); });

  const std::map<int, std::string> names{
      {1, "gradient correctness"}, {2, "selection-matrix oracle"},
      {3, "LOO shortcut oracle"},  {4, "GEV round-trips"},
      {5, "identifiability"},      {6, "fusion direction"},
      {7, "calibration"},          {8, "Wendland exactness"},
      {9, "performance"},          {10, "determinism"}};
  int failed = 0;
  std::cout << "\n";
  for (const auto& [c, r] : results) {
    std::cout << (r.pass ? "PASS" : "FAIL") << "  " << c << ". " << names.at(c) << ": " << r.detail
              << "\n";
    failed += !r.pass;
  }
  std::cout << results.size() - failed << "/" << results.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
