#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "config.hpp"
#include "gevfuse/bootstrap.hpp"
#include "gevfuse/csv.hpp"
#include "gevfuse/data.hpp"
#include "gevfuse/errors.hpp"
#include "gevfuse/krige.hpp"
#include "gevfuse/lmc.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/persist.hpp"
#include "gevfuse/simulate.hpp"
#include "gevfuse/stack.hpp"
#include "gevfuse/validate.hpp"

namespace fs = std::filesystem;
using namespace gevfuse;
using cli::RunConfig;

namespace {

constexpr int kExitData = 2;
constexpr int kExitFit = 3;

// Artifact names inside the output directory.
constexpr const char* kFits = "fits.csv";
constexpr const char* kTrends = "trends.csv";
constexpr const char* kW = "w.csv";
constexpr const char* kJointModel = "lmc_joint.json";
constexpr const char* kBaselineModel = "lmc_baseline.json";

persist::Provenance provenance(const RunConfig& c) { return {c.hash(), c.seed}; }

void emit(const RunConfig& c, const std::string& name, const std::string& content) {
  const auto path = c.out(name);
  persist::write_file(path, content);
  spdlog::info("wrote {}", path.string());
}

fs::path require_file(const std::string& path, const char* what) {
  if (path.empty()) throw DataError(std::string("no ") + what + " file given");
  if (!fs::exists(path)) throw DataError(std::string(what) + " file not found: " + path);
  return path;
}

fs::path require_artifact(const RunConfig& c, const char* name, const char* producer) {
  const auto p = c.out(name);
  if (!fs::exists(p))
    throw DataError("missing " + p.string() + " (run `" + producer + "` first)");
  return p;
}

Dataset load_filtered(const RunConfig& c) {
  const auto sites_path = require_file(c.paths.sites, "sites");
  const auto maxima_path = require_file(c.paths.maxima, "maxima");
  const auto ds = load_dataset(sites_path, maxima_path);
  auto filtered = completeness_filter(ds, c.stage1.year_frac, c.stage1.min_years);
  const auto& rep = filtered.report;
  if (!rep.dropped_years.empty() || !rep.dropped_sites.empty())
    spdlog::info("completeness filter dropped {} years and {} sites",
                 rep.dropped_years.size(), rep.dropped_sites.size());
  for (const auto& s : rep.dropped_sites) spdlog::debug("dropped site {}", s);
  if (rep.empty_result) throw DataError("no sites survive the completeness filter");
  return std::move(filtered.dataset);
}

struct Pipeline {
  Dataset ds;
  StackedObservations stack;
  MeasurementCov w;
  Eigen::MatrixXd dist;
};

Pipeline load_pipeline(const RunConfig& c, bool with_w = true) {
  Pipeline p;
  p.ds = load_filtered(c);
  const auto fits = persist::read_fit_table(require_artifact(c, kFits, "fit-stage1"), p.ds);
  p.stack = stack_stage1(p.ds, fits);
  p.dist = distance_matrix(p.stack.sites);
  if (with_w) p.w = persist::read_measurement_cov(require_artifact(c, kW, "bootstrap-w"), p.stack);
  return p;
}

struct Baseline {
  StackedObservations stack;
  Eigen::MatrixXd w;
  Eigen::MatrixXd dist;
};

Baseline baseline_of(const Pipeline& p) {
  std::vector<Eigen::Index> rows;
  Baseline b;
  b.stack = single_source(p.stack, Source::Obs, &rows);
  b.w = p.w.w(rows, rows);
  b.dist = distance_matrix(b.stack.sites);
  return b;
}

LmcFitOptions lmc_options(const RunConfig& c, std::uint64_t stream) {
  LmcFitOptions o;
  o.n_starts = c.lmc.n_starts;
  o.rho_min = c.lmc.rho_min;
  o.rho_max = c.lmc.rho_max;
  o.seed = mix_seed(c.seed, stream);
  o.jobs = c.jobs;
  return o;
}

LooOptions loo_options(const RunConfig& c) {
  return {c.predict.T.front(), c.predict.n_draws, c.seed};
}

// ---- commands ----

int cmd_fit_stage1(const RunConfig& c) {
  const auto ds = load_filtered(c);
  const auto fits = fit_stage1(ds, c.stage1_options(), c.jobs);
  std::vector<TrendTestResult> trends;
  for (const auto& s : ds.series) trends.push_back(trend_test(s));
  emit(c, kFits, persist::fit_table(ds, fits, provenance(c)));
  emit(c, kTrends, persist::trend_table(ds, trends, provenance(c)));
  std::string failed;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!fits[i].converged) failed += (failed.empty() ? "" : ", ") + ds.sites[i].id;
  if (!failed.empty()) throw FitError("Stage-1 fit did not converge at: " + failed);
  spdlog::info("fitted {} sites", ds.size());
  return 0;
}

int cmd_trends(const RunConfig& c) {
  const auto ds = load_filtered(c);
  std::vector<TrendTestResult> trends;
  for (const auto& s : ds.series) trends.push_back(trend_test(s));
  emit(c, kTrends, persist::trend_table(ds, trends, provenance(c)));
  return 0;
}

int cmd_bootstrap_w(const RunConfig& c) {
  const auto p = load_pipeline(c, false);
  const auto reps =
      block_bootstrap_stage1(p.ds, c.stage1_options(), c.bootstrap.B, c.seed, c.jobs);
  spdlog::info("bootstrap: {} of {} replicates kept", reps.rows.rows(), reps.n_requested);
  auto w = build_measurement_cov(reps, p.stack, c.bootstrap.taper_km, c.bootstrap.min_replicates);
  w.seed = c.seed;
  w.layout_hash = p.stack.layout_hash();
  if (w.repaired) spdlog::warn("tapered bootstrap covariance needed an SPD repair");
  emit(c, kW, persist::measurement_cov(w, provenance(c)));
  return 0;
}

std::string starts_table(const std::vector<std::pair<std::string, LmcFit>>& fits,
                         const persist::Provenance& prov) {
  std::ostringstream os;
  persist::write_header(os, prov);
  os << "model,start,nll,status,best\n";
  for (const auto& [name, f] : fits)
    for (std::size_t k = 0; k < f.diagnostics.nll_per_start.size(); ++k)
      os << name << ',' << k << ',' << csv::format(f.diagnostics.nll_per_start[k]) << ','
         << f.diagnostics.status_per_start[k] << ','
         << (static_cast<int>(k) == f.diagnostics.best_start ? 1 : 0) << '\n';
  return os.str();
}

int cmd_fit_lmc(const RunConfig& c) {
  const auto p = load_pipeline(c);
  const auto prov = provenance(c);
  std::vector<std::pair<std::string, LmcFit>> fits;

  const auto joint = fit_lmc(p.stack, p.w.w, p.dist, lmc_options(c, 1));
  fits.emplace_back("joint", joint);
  emit(c, kJointModel,
       persist::lmc_model({joint.params, joint.nll, c.seed, c.lmc.n_starts, p.stack.layout_hash()},
                          prov));
  if (p.stack.dim == 6 && !sites_of(p.stack, Source::Sim).empty() &&
      !sites_of(p.stack, Source::Obs).empty()) {
    const auto r = cross_source_correlations(joint.params);
    spdlog::info("cross-source correlations: mu {:.3f}, log sigma {:.3f}, xi {:.3f}", r.mu,
                 r.log_sigma, r.xi);
  }
  const auto b = baseline_of(p);
  if (b.stack.n_sites() > 0) {
    const auto base = fit_lmc(b.stack, b.w, b.dist, lmc_options(c, 2));
    fits.emplace_back("baseline", base);
    emit(c, kBaselineModel,
         persist::lmc_model({base.params, base.nll, c.seed, c.lmc.n_starts, b.stack.layout_hash()},
                            prov));
  }
  emit(c, "lmc_starts.csv", starts_table(fits, prov));
  return 0;
}

int cmd_krige(const RunConfig& c) {
  const auto p = load_pipeline(c);
  const auto model = persist::read_lmc_model(require_artifact(c, kJointModel, "fit-lmc"),
                                             p.stack.layout_hash());
  const auto grid = load_grid(require_file(c.paths.grid, "grid"));
  const auto rows = krige_grid(model.params, p.stack, p.w.w, p.dist, grid, c.predict.T,
                               c.predict.n_draws, c.seed, c.jobs);
  emit(c, "grid_rl.csv", persist::grid_table(rows, provenance(c)));
  return 0;
}

std::string reduction_label(double joint, double base) {
  return csv::format(base > 0.0 ? 100.0 * (1.0 - joint / base) : 0.0);
}

int cmd_loocv(const RunConfig& c) {
  const auto p = load_pipeline(c);
  const auto prov = provenance(c);
  const auto model = persist::read_lmc_model(require_artifact(c, kJointModel, "fit-lmc"),
                                             p.stack.layout_hash());
  auto joint = loo_block(model.params, p.stack, p.w.w, p.dist, Source::Obs, loo_options(c));
  emit(c, "loo_joint.csv", persist::loo_table(joint.sites, prov));
  std::vector<persist::NamedReport> reports;
  if (c.loocv.baseline == "single-source") {
    const auto b = baseline_of(p);
    const auto bm = persist::read_lmc_model(require_artifact(c, kBaselineModel, "fit-lmc"),
                                            b.stack.layout_hash());
    const auto base = loo_block(bm.params, b.stack, b.w, b.dist, Source::Obs, loo_options(c));
    compare(joint, base);
    emit(c, "loo_baseline.csv", persist::loo_table(base.sites, prov));
    emit(c, "rmse_decomposition.csv",
         persist::decomposition_table(
             rmse_decomposition(joint.sites, base.sites, c.predict.T.front()), prov));
    reports.push_back({"joint", "all", joint.report});
    reports.push_back({"baseline", "all", base.report});
    spdlog::info("RL RMSE joint {:.4f} vs baseline {:.4f} ({}% reduction)", joint.report.rmse_rl,
                 base.report.rmse_rl, reduction_label(joint.report.rmse_rl, base.report.rmse_rl));
    // Reduction row: percent RMSE reductions and the LPD gain.
    CvReport red;
    red.n_sites = joint.report.n_sites;
    auto pct = [](double j, double b) { return b > 0.0 ? 100.0 * (1.0 - j / b) : 0.0; };
    red.rmse_mu = pct(joint.report.rmse_mu, base.report.rmse_mu);
    red.rmse_logsigma = pct(joint.report.rmse_logsigma, base.report.rmse_logsigma);
    red.rmse_xi = pct(joint.report.rmse_xi, base.report.rmse_xi);
    red.rmse_rl = pct(joint.report.rmse_rl, base.report.rmse_rl);
    red.total_lpd = joint.report.total_lpd - base.report.total_lpd;
    red.sites_won = joint.report.sites_won;
    for (auto& level : red.coverage) level.fill(std::numeric_limits<double>::quiet_NaN());
    red.ks_p.fill(std::numeric_limits<double>::quiet_NaN());
    reports.push_back({"reduction_pct", "all", red});
  } else {
    reports.push_back({"joint", "all", joint.report});
  }
  emit(c, "cv_report.csv", persist::cv_report(reports, prov));
  return 0;
}

std::vector<std::vector<std::size_t>> read_blocks(const fs::path& path,
                                                  const StackedObservations& stack) {
  const auto t = csv::read(path);
  const auto ci = t.column("site_id"), cb = t.column("block");
  std::map<std::string, std::vector<std::size_t>> by_name;
  std::vector<std::string> order;
  for (const auto& row : t.rows) {
    const auto& name = row.fields[cb];
    if (!by_name.count(name)) order.push_back(name);
    by_name[name].push_back(stack.site_index(row.fields[ci]));
  }
  std::vector<std::vector<std::size_t>> blocks;
  for (const auto& n : order) blocks.push_back(by_name[n]);
  return blocks;
}

int cmd_blockcv(const RunConfig& c) {
  const auto p = load_pipeline(c);
  const auto prov = provenance(c);
  const auto blocks = c.paths.blocks.empty()
                          ? contiguous_blocks(p.stack, Source::Obs, c.blockcv.n_blocks)
                          : read_blocks(require_file(c.paths.blocks, "blocks"), p.stack);
  BlockCvOptions o;
  o.loo = loo_options(c);
  o.lmc = lmc_options(c, 3);
  o.refit = c.blockcv.refit;
  o.force = c.blockcv.force;
  o.jobs = c.jobs;
  std::optional<LmcParams> joint_fit, baseline_fit;
  if (!o.refit) {
    const auto b = baseline_of(p);
    joint_fit = persist::read_lmc_model(require_artifact(c, kJointModel, "fit-lmc"),
                                        p.stack.layout_hash()).params;
    baseline_fit = persist::read_lmc_model(require_artifact(c, kBaselineModel, "fit-lmc"),
                                           b.stack.layout_hash()).params;
  }
  const auto r = geographic_block_cv(p.stack, p.w.w, blocks, o, joint_fit, baseline_fit);
  std::vector<persist::NamedReport> reports;
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    reports.push_back({"joint", std::to_string(f), r.folds[f].joint.report});
    reports.push_back({"baseline", std::to_string(f), r.folds[f].baseline.report});
  }
  reports.push_back({"joint", "pooled", r.joint_pooled.report});
  reports.push_back({"baseline", "pooled", r.baseline_pooled.report});
  emit(c, "blockcv_report.csv", persist::cv_report(reports, prov));
  emit(c, "blockcv_joint.csv", persist::loo_table(r.joint_pooled.sites, prov));
  emit(c, "blockcv_baseline.csv", persist::loo_table(r.baseline_pooled.sites, prov));
  std::ostringstream folds;
  persist::write_header(folds, prov);
  folds << "site_id,block\n";
  for (std::size_t f = 0; f < r.folds.size(); ++f)
    for (const auto& id : r.folds[f].held_out) folds << id << ',' << f << '\n';
  emit(c, "blockcv_blocks.csv", folds.str());
  return 0;
}

std::vector<Site> design_sites(const RunConfig& c) {
  if (!c.paths.sites.empty()) return load_sites(require_file(c.paths.sites, "sites"));
  return coastal_design(c.simulate.n_obs, c.simulate.n_sim);
}

int cmd_simulate(const RunConfig& c) {
  const auto prov = provenance(c);
  const auto sites = design_sites(c);
  const auto truth = reference_truth();
  std::ostringstream preamble;
  persist::write_header(preamble, prov);
  if (c.simulate.mode == "full") {
    FullModeOptions o;
    o.n_years = c.simulate.n_years;
    o.first_year = c.simulate.first_year;
    o.obs_trend = c.simulate.obs_trend;
    o.t_ref = c.stage1.t_ref;
    const auto ds = simulate_full(truth, sites, o, c.seed);
    const auto sp = c.out("sim_sites.csv"), mp = c.out("sim_maxima.csv");
    fs::create_directories(sp.parent_path());
    save_dataset(ds, sp, mp, preamble.str());
    spdlog::info("wrote {} and {}", sp.string(), mp.string());
    return 0;
  }
  const auto layout = stack_from_triplets(sites, Eigen::MatrixXd::Zero(
                                                     static_cast<Eigen::Index>(sites.size()), 3));
  MeasurementCov w;
  w.w = synthetic_measurement_cov(layout);
  w.taper_km = SyntheticNoise{}.range_km;
  w.layout_hash = layout.layout_hash();
  const auto stack = simulate_stack(truth, sites, &w.w, c.seed);
  std::ostringstream os;
  os << preamble.str() << "site_id,source,lat,lon,mu,log_sigma,xi\n";
  for (std::size_t l = 0; l < stack.n_sites(); ++l) {
    const auto& s = stack.sites[l];
    const auto v = stack.site_values(l);
    os << s.id << ',' << to_string(s.source) << ',' << csv::format(s.lat) << ','
       << csv::format(s.lon) << ',' << csv::format(v[0]) << ',' << csv::format(v[1]) << ','
       << csv::format(v[2]) << '\n';
  }
  emit(c, "sim_stack.csv", os.str());
  emit(c, "sim_w.csv", persist::measurement_cov(w, prov));
  return 0;
}

int cmd_identifiability(const RunConfig& c) {
  LmcParams truth;
  std::vector<Site> sites;
  Eigen::MatrixXd w;
  if (c.identifiability.from_pipeline) {
    const auto p = load_pipeline(c);
    truth = persist::read_lmc_model(require_artifact(c, kJointModel, "fit-lmc"),
                                    p.stack.layout_hash()).params;
    sites = p.stack.sites;
    w = p.w.w;
  } else {
    truth = reference_truth();
    sites = coastal_design(c.simulate.n_obs, c.simulate.n_sim);
    w = synthetic_measurement_cov(
        stack_from_triplets(sites, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(sites.size()), 3)));
  }
  auto o = lmc_options(c, 4);
  const auto r = identifiability_study(truth, sites, w, c.identifiability.n_reps,
                                       mix_seed(c.seed, 5), o, c.jobs);
  for (const auto& row : r.rows)
    spdlog::info("{}: truth {:.3f}, median {:.3f}, sd {:.3f}", row.quantity, row.truth,
                 row.median, row.sd);
  emit(c, "identifiability.csv", persist::identifiability_table(r, provenance(c)));
  return 0;
}

int cmd_saturation(const RunConfig& c) {
  const auto p = load_pipeline(c);
  const auto rows = saturation_experiment(p.stack, p.w.w, c.saturation.sizes,
                                          c.saturation.draws, c.seed, loo_options(c),
                                          lmc_options(c, 1), lmc_options(c, 2), c.jobs);
  emit(c, "saturation.csv", persist::saturation_table(rows, provenance(c)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage fusion of observed and simulated annual maxima"};
  app.require_subcommand(1);

  std::string config_path;
  bool verbose = false, quiet = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs, B, n_starts, n_draws, n_blocks, n_reps, draws, n_obs, n_sim, n_years;
  std::optional<std::string> sites, maxima, grid, blocks, out_dir, ns_source, baseline, mode;
  std::optional<double> taper, t_ref;
  std::vector<double> T;
  std::vector<int> sizes;
  bool no_refit = false, force = false, from_pipeline = false;

  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--jobs", jobs, "Worker threads (results do not depend on it)");
  app.add_option("--out-dir", out_dir, "Output directory (default $GEVFUSE_OUT_DIR)");
  app.add_option("--sites", sites, "Sites CSV");
  app.add_option("--maxima", maxima, "Annual maxima CSV");
  app.add_option("--grid", grid, "Prediction grid CSV");
  app.add_option("--blocks", blocks, "Block assignment CSV (site_id,block)");
  app.add_option("--nonstationary-source", ns_source, "OBS, SIM, both or none");
  app.add_option("--t-ref", t_ref, "Reference year of the location trend");
  app.add_option("--B", B, "Bootstrap replicates");
  app.add_option("--taper-km", taper, "Wendland taper range (km)");
  app.add_option("--n-starts", n_starts, "LMC random starts");
  app.add_option("--T", T, "Return period(s); repeatable");
  app.add_option("--n-draws", n_draws, "Monte Carlo draws");
  app.add_option("--baseline", baseline, "single-source or none");
  app.add_option("--n-blocks", n_blocks, "Contiguous blocks when no --blocks file");
  app.add_flag("--no-refit", no_refit, "Reuse the full-data fits in block CV");
  app.add_flag("--force", force, "Allow folds with fewer than 4 training sites");
  app.add_option("--mode", mode, "Simulation mode: full or stack");
  app.add_option("--n-obs", n_obs, "Synthetic design: observed sites");
  app.add_option("--n-sim", n_sim, "Synthetic design: simulated sites");
  app.add_option("--n-years", n_years, "Synthetic annual maxima per site");
  app.add_option("--n-reps", n_reps, "Identifiability replicates");
  app.add_flag("--from-pipeline", from_pipeline,
               "Identifiability from the fitted model, sites and W of the pipeline");
  app.add_option("--sizes", sizes, "Saturation subset sizes");
  app.add_option("--draws", draws, "Saturation draws per size");
  app.add_flag("-v,--verbose", verbose, "Debug logging, including optimizer traces");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  const std::map<std::string, int (*)(const RunConfig&)> commands{
      {"fit-stage1", cmd_fit_stage1},   {"trends", cmd_trends},
      {"bootstrap-w", cmd_bootstrap_w}, {"fit-lmc", cmd_fit_lmc},
      {"krige", cmd_krige},             {"loocv", cmd_loocv},
      {"blockcv", cmd_blockcv},         {"simulate", cmd_simulate},
      {"identifiability", cmd_identifiability}, {"saturation", cmd_saturation}};
  for (const auto& [name, fn] : commands) app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitData;
  }

  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(verbose ? spdlog::level::debug
                            : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    RunConfig c = config_path.empty() ? RunConfig{} : cli::load_config(config_path);
    if (seed) c.seed = *seed;
    if (jobs) c.jobs = *jobs;
    if (out_dir) c.paths.output_dir = *out_dir;
    if (sites) c.paths.sites = *sites;
    if (maxima) c.paths.maxima = *maxima;
    if (grid) c.paths.grid = *grid;
    if (blocks) c.paths.blocks = *blocks;
    if (ns_source) c.stage1.nonstationary_source = *ns_source;
    if (t_ref) c.stage1.t_ref = *t_ref;
    if (B) c.bootstrap.B = *B;
    if (taper) c.bootstrap.taper_km = *taper;
    if (n_starts) c.lmc.n_starts = *n_starts;
    if (!T.empty()) c.predict.T = T;
    if (n_draws) c.predict.n_draws = *n_draws;
    if (baseline) c.loocv.baseline = *baseline;
    if (n_blocks) c.blockcv.n_blocks = *n_blocks;
    if (no_refit) c.blockcv.refit = false;
    if (force) c.blockcv.force = true;
    if (mode) c.simulate.mode = *mode;
    if (n_obs) c.simulate.n_obs = *n_obs;
    if (n_sim) c.simulate.n_sim = *n_sim;
    if (n_years) c.simulate.n_years = *n_years;
    if (n_reps) c.identifiability.n_reps = *n_reps;
    if (from_pipeline) c.identifiability.from_pipeline = true;
    if (!sizes.empty()) c.saturation.sizes = sizes;
    if (draws) c.saturation.draws = *draws;
    cli::validate(c);

    const auto* sub = app.get_subcommands().front();
    spdlog::debug("config hash {}", persist::hex(c.hash()));
    return commands.at(sub->get_name())(c);
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  } catch (const FitError& e) {
    spdlog::error("{}", e.what());
    return kExitFit;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
