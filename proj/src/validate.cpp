#include "gevfuse/validate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "gevfuse/errors.hpp"
#include "gevfuse/krige.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/parallel.hpp"
#include "gevfuse/simulate.hpp"
#include "gevfuse/stats.hpp"

namespace gevfuse {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<Eigen::Index> rows_of(const StackedObservations& stack,
                                  std::span<const std::size_t> sites) {
  std::vector<Eigen::Index> rows;
  for (auto s : sites)
    for (auto r : stack.site_rows(s)) rows.push_back(r);
  return rows;
}

double gaussian_pit(double obs, double mean, double var) {
  if (var > 0.0) return stats::normal_cdf((obs - mean) / std::sqrt(var));
  return obs < mean ? 0.0 : (obs > mean ? 1.0 : 0.5);
}

double rmse(std::span<const double> errors) {
  if (errors.empty()) return kNaN;
  double ss = 0.0;
  for (double e : errors) ss += e * e;
  return std::sqrt(ss / static_cast<double>(errors.size()));
}

Eigen::MatrixXd submatrix(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows) {
  return m(rows, rows);
}

LmcFitOptions with_seed(LmcFitOptions o, std::uint64_t seed) {
  o.seed = seed;
  return o;
}

}  // namespace

BlockPredictive delete_block_predictive(const LmcParams& p, const StackedObservations& stack,
                                        const Eigen::MatrixXd& w,
                                        const Eigen::MatrixXd& site_dist,
                                        std::span<const std::size_t> test_sites) {
  if (test_sites.empty()) throw std::invalid_argument("empty held-out block");
  const auto f = factorize_observed(p, stack, w, site_dist);
  const auto rows = rows_of(stack, test_sites);
  const auto k = static_cast<Eigen::Index>(rows.size());
  // Columns of V^{-1} for the held-out rows only.
  Eigen::MatrixXd unit = Eigen::MatrixXd::Zero(stack.size(), k);
  for (Eigen::Index j = 0; j < k; ++j) unit(rows[static_cast<std::size_t>(j)], j) = 1.0;
  const Eigen::MatrixXd cols = f.llt.solve(unit);
  const Eigen::MatrixXd precision_bb = cols(rows, Eigen::all);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(0.5 * (precision_bb + precision_bb.transpose()));
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all())
    throw FitError("held-out precision block is singular");
  Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(k, k));
  cov = 0.5 * (cov + cov.transpose()).eval();
  Eigen::VectorXd alpha_b(k), obs_b(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    alpha_b[j] = f.alpha[rows[static_cast<std::size_t>(j)]];
    obs_b[j] = stack.values[rows[static_cast<std::size_t>(j)]];
  }
  const Eigen::VectorXd mean = obs_b - cov * alpha_b;

  BlockPredictive out;
  for (std::size_t s = 0; s < test_sites.size(); ++s) {
    const auto o = static_cast<Eigen::Index>(3 * s);
    out.mean.emplace_back(mean.segment<3>(o));
    out.cov.emplace_back(cov.block<3, 3>(o, o));
  }
  return out;
}

LooSiteResult score_site(const std::string& site_id, const Eigen::Vector3d& predicted,
                         const Eigen::Matrix3d& pred_cov, const Eigen::Vector3d& observed,
                         const LooOptions& options) {
  LooSiteResult r;
  r.site_id = site_id;
  r.predicted = predicted;
  r.pred_cov = pred_cov;
  r.observed = observed;
  Eigen::LLT<Eigen::Matrix3d> llt(pred_cov);
  if (llt.info() != Eigen::Success)
    throw FitError("predictive covariance at site '" + site_id + "' is not SPD");
  const Eigen::Vector3d z = llt.matrixL().solve(observed - predicted);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  r.lpd = -0.5 * (3.0 * kLog2Pi + log_det + z.squaredNorm());
  for (int k = 0; k < 3; ++k) r.pit[k] = gaussian_pit(observed[k], predicted[k], pred_cov(k, k));

  r.rl_pred = return_level(predicted[0], predicted[1], predicted[2], options.T);
  r.rl_obs = return_level(observed[0], observed[1], observed[2], options.T);
  const auto draws = return_level_draws(predicted, pred_cov, options.T, options.n_draws,
                                        mix_seed(options.seed, fnv1a(site_id)));
  const auto below = std::count_if(draws.begin(), draws.end(),
                                   [&](double v) { return v <= r.rl_obs; });
  r.pit[3] = static_cast<double>(below) / static_cast<double>(draws.size());
  r.rl_sd = stats::sd(draws);
  return r;
}

LooOutput loo_block(const LmcParams& p, const StackedObservations& stack,
                    const Eigen::MatrixXd& w, const Eigen::MatrixXd& site_dist,
                    Source target, const LooOptions& options) {
  const auto targets = sites_of(stack, target);
  if (targets.empty())
    throw DataError("no " + std::string(to_string(target)) + " sites to leave out");
  const auto f = factorize_observed(p, stack, w, site_dist);
  const Eigen::MatrixXd precision = f.llt.solve(Eigen::MatrixXd::Identity(stack.size(), stack.size()));
  LooOutput out;
  for (auto b : targets) {
    const auto rows = stack.site_rows(b);
    Eigen::Matrix3d pb;
    Eigen::Vector3d ab, obs;
    for (int i = 0; i < 3; ++i) {
      ab[i] = f.alpha[rows[i]];
      obs[i] = stack.values[rows[i]];
      for (int j = 0; j < 3; ++j) pb(i, j) = precision(rows[i], rows[j]);
    }
    Eigen::LDLT<Eigen::Matrix3d> ldlt(0.5 * (pb + pb.transpose()));
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all())
      throw FitError("precision block of site '" + stack.sites[b].id + "' is singular");
    Eigen::Matrix3d cov = ldlt.solve(Eigen::Matrix3d::Identity());
    cov = 0.5 * (cov + cov.transpose()).eval();
    out.sites.push_back(score_site(stack.sites[b].id, obs - cov * ab, cov, obs, options));
  }
  out.report = summarize(out.sites);
  return out;
}

CalibrationTable pit_and_coverage(std::span<const LooSiteResult> results) {
  if (results.size() < 5)
    throw std::invalid_argument("calibration needs at least 5 sites");
  CalibrationTable t;
  const double n = static_cast<double>(results.size());
  for (int q = 0; q < kScoredQuantities; ++q) {
    std::vector<double> pits;
    for (const auto& r : results) pits.push_back(r.pit[static_cast<std::size_t>(q)]);
    for (std::size_t l = 0; l < kCoverageLevels.size(); ++l) {
      const double half = kCoverageLevels[l] / 2.0;
      const auto hits = std::count_if(pits.begin(), pits.end(),
                                      [&](double u) { return std::abs(u - 0.5) <= half; });
      t.coverage[l][static_cast<std::size_t>(q)] = static_cast<double>(hits) / n;
    }
    t.ks_p[static_cast<std::size_t>(q)] = stats::ks_uniform(std::move(pits)).p_value;
  }
  return t;
}

CvReport summarize(std::span<const LooSiteResult> results) {
  CvReport rep;
  rep.n_sites = static_cast<int>(results.size());
  std::array<std::vector<double>, kScoredQuantities> err;
  for (const auto& r : results) {
    for (int k = 0; k < 3; ++k) err[static_cast<std::size_t>(k)].push_back(r.predicted[k] - r.observed[k]);
    err[3].push_back(r.rl_pred - r.rl_obs);
    rep.total_lpd += r.lpd;
  }
  rep.rmse_mu = rmse(err[0]);
  rep.rmse_logsigma = rmse(err[1]);
  rep.rmse_xi = rmse(err[2]);
  rep.rmse_rl = rmse(err[3]);
  for (auto& level : rep.coverage) level.fill(kNaN);
  rep.ks_p.fill(kNaN);
  if (results.size() >= 5) {
    const auto cal = pit_and_coverage(results);
    rep.coverage = cal.coverage;
    rep.ks_p = cal.ks_p;
  }
  return rep;
}

int compare(LooOutput& model, const LooOutput& reference) {
  if (model.sites.size() != reference.sites.size())
    throw std::invalid_argument("compare: different site sets");
  int won = 0;
  for (std::size_t i = 0; i < model.sites.size(); ++i) {
    const auto& a = model.sites[i];
    const auto& b = reference.sites[i];
    if (a.site_id != b.site_id) throw std::invalid_argument("compare: site order differs");
    if (std::abs(a.rl_pred - a.rl_obs) < std::abs(b.rl_pred - b.rl_obs)) ++won;
  }
  model.report.sites_won = won;
  return won;
}

std::vector<DecompositionRow> rmse_decomposition(std::span<const LooSiteResult> joint,
                                                 std::span<const LooSiteResult> baseline,
                                                 double T) {
  if (joint.size() != baseline.size() || joint.empty())
    throw std::invalid_argument("rmse_decomposition: site sets differ");
  for (std::size_t i = 0; i < joint.size(); ++i)
    if (joint[i].site_id != baseline[i].site_id)
      throw std::invalid_argument("rmse_decomposition: site mismatch at '" +
                                  joint[i].site_id + "'");
  struct Swap {
    const char* label;
    std::array<bool, 3> from_joint;
  };
  const std::array<Swap, 5> swaps{{{"baseline", {false, false, false}},
                                   {"mu", {true, false, false}},
                                   {"log_sigma", {false, true, false}},
                                   {"xi", {false, false, true}},
                                   {"joint", {true, true, true}}}};
  std::vector<DecompositionRow> out;
  for (const auto& s : swaps) {
    std::vector<double> err;
    for (std::size_t i = 0; i < joint.size(); ++i) {
      Eigen::Vector3d th;
      for (int k = 0; k < 3; ++k)
        th[k] = s.from_joint[static_cast<std::size_t>(k)] ? joint[i].predicted[k]
                                                           : baseline[i].predicted[k];
      const auto& obs = baseline[i].observed;
      err.push_back(return_level(th[0], th[1], th[2], T) -
                    return_level(obs[0], obs[1], obs[2], T));
    }
    out.push_back({s.label, rmse(err), 0.0});
  }
  const double base = out.front().rmse_rl;
  for (auto& row : out) row.reduction_pct = base > 0.0 ? 100.0 * (1.0 - row.rmse_rl / base) : 0.0;
  return out;
}

std::vector<std::vector<std::size_t>> contiguous_blocks(const StackedObservations& stack,
                                                        Source source, int n_blocks) {
  auto sites = sites_of(stack, source);
  if (n_blocks < 1 || static_cast<std::size_t>(n_blocks) > sites.size())
    throw std::invalid_argument("contiguous_blocks: need 1..n_sites blocks");
  std::stable_sort(sites.begin(), sites.end(), [&](std::size_t a, std::size_t b) {
    return stack.sites[a].lat < stack.sites[b].lat;
  });
  std::vector<std::vector<std::size_t>> blocks(static_cast<std::size_t>(n_blocks));
  const auto n = sites.size();
  for (std::size_t i = 0; i < n; ++i)
    blocks[i * static_cast<std::size_t>(n_blocks) / n].push_back(sites[i]);
  return blocks;
}

namespace {

// Predicts `block` (stack site indices) of `stack` under a model fitted on
// the remaining sites (or under `fixed` when given) and scores it.
LooOutput score_fold(const StackedObservations& stack, const Eigen::MatrixXd& w,
                     const Eigen::MatrixXd& site_dist, const std::vector<std::size_t>& block,
                     const std::optional<LmcParams>& fixed, const LmcFitOptions& lmc,
                     const LooOptions& loo) {
  LmcParams params;
  if (fixed) {
    params = *fixed;
  } else {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < stack.n_sites(); ++i)
      if (std::find(block.begin(), block.end(), i) == block.end()) keep.push_back(i);
    std::vector<Eigen::Index> rows;
    const auto train = select_sites(stack, keep, &rows);
    const Eigen::MatrixXd train_dist = distance_matrix(train.sites);
    params = fit_lmc(train, submatrix(w, rows), train_dist, lmc).params;
  }
  const auto pred = delete_block_predictive(params, stack, w, site_dist, block);
  LooOutput out;
  for (std::size_t s = 0; s < block.size(); ++s)
    out.sites.push_back(score_site(stack.sites[block[s]].id, pred.mean[s], pred.cov[s],
                                   stack.site_values(block[s]), loo));
  out.report = summarize(out.sites);
  return out;
}

}  // namespace

BlockCvResult geographic_block_cv(const StackedObservations& stack, const Eigen::MatrixXd& w,
                                  const std::vector<std::vector<std::size_t>>& blocks,
                                  const BlockCvOptions& options,
                                  const std::optional<LmcParams>& joint_fit,
                                  const std::optional<LmcParams>& baseline_fit) {
  const auto targets = sites_of(stack, options.target);
  std::set<std::size_t> seen;
  for (const auto& b : blocks) {
    if (b.empty()) throw std::invalid_argument("blockcv: empty block");
    for (auto s : b) {
      if (s >= stack.n_sites() || stack.sites[s].source != options.target)
        throw std::invalid_argument("blockcv: block contains a site outside the target source");
      if (!seen.insert(s).second)
        throw std::invalid_argument("blockcv: blocks overlap at site '" + stack.sites[s].id + "'");
    }
  }
  if (seen.size() != targets.size())
    throw std::invalid_argument("blockcv: blocks do not cover every target-source site");
  for (const auto& b : blocks) {
    const auto remaining = targets.size() - b.size();
    if (remaining < 4 && !options.force)
      throw DataError("blockcv: a fold leaves only " + std::to_string(remaining) +
                      " target-source training sites (use --force to run anyway)");
  }
  if (!options.refit && (!joint_fit || !baseline_fit))
    throw std::invalid_argument("blockcv: fixed fits required when refit is off");

  std::vector<Eigen::Index> base_rows;
  const auto base = single_source(stack, options.target, &base_rows);
  const Eigen::MatrixXd base_w = submatrix(w, base_rows);
  const Eigen::MatrixXd dist = distance_matrix(stack.sites);
  const Eigen::MatrixXd base_dist = distance_matrix(base.sites);

  BlockCvResult result;
  result.folds.resize(blocks.size());
  for (std::size_t f = 0; f < blocks.size(); ++f) {
    auto& fold = result.folds[f];
    std::vector<std::size_t> base_block;
    for (auto s : blocks[f]) {
      fold.held_out.push_back(stack.sites[s].id);
      base_block.push_back(base.site_index(stack.sites[s].id));
    }
    auto lmc = options.lmc;
    lmc.jobs = options.jobs;
    fold.joint = score_fold(stack, w, dist, blocks[f],
                            options.refit ? std::nullopt : joint_fit,
                            with_seed(lmc, mix_seed(options.lmc.seed, 2 * f)), options.loo);
    fold.baseline = score_fold(base, base_w, base_dist, base_block,
                               options.refit ? std::nullopt : baseline_fit,
                               with_seed(lmc, mix_seed(options.lmc.seed, 2 * f + 1)),
                               options.loo);
    compare(fold.joint, fold.baseline);
    for (const auto& s : fold.joint.sites) result.joint_pooled.sites.push_back(s);
    for (const auto& s : fold.baseline.sites) result.baseline_pooled.sites.push_back(s);
  }
  result.joint_pooled.report = summarize(result.joint_pooled.sites);
  result.baseline_pooled.report = summarize(result.baseline_pooled.sites);
  compare(result.joint_pooled, result.baseline_pooled);
  return result;
}

IdentifiabilityResult identifiability_study(const LmcParams& truth,
                                            const std::vector<Site>& sites,
                                            const Eigen::MatrixXd& w, int n_reps,
                                            std::uint64_t seed, const LmcFitOptions& lmc,
                                            int jobs) {
  if (n_reps < 1) throw std::invalid_argument("identifiability: n_reps must be positive");
  if (truth.dim() != 6) throw std::invalid_argument("identifiability: needs the joint model");
  const Eigen::MatrixXd root = psd_sqrt(w);
  std::vector<std::optional<std::array<double, 3>>> est(static_cast<std::size_t>(n_reps));
  parallel_for(est.size(), jobs, [&](std::size_t r) {
    const auto stack = simulate_stack_with_root(truth, sites, &root, mix_seed(seed, 2 * r));
    auto o = with_seed(lmc, mix_seed(seed, 2 * r + 1));
    o.jobs = 1;
    try {
      const auto fit = fit_lmc(stack, w, distance_matrix(stack.sites), o);
      const auto c = cross_source_correlations(fit.params);
      est[r] = std::array<double, 3>{c.mu, c.log_sigma, c.xi};
    } catch (const FitError&) {
    } catch (const std::domain_error&) {
    }
  });

  IdentifiabilityResult out;
  for (const auto& e : est) {
    if (e) out.estimates.push_back(*e);
    else ++out.n_failed;
  }
  if (out.n_failed > 0.3 * n_reps)
    throw FitError("identifiability: " + std::to_string(out.n_failed) + " of " +
                   std::to_string(n_reps) + " replicate fits failed");
  const auto t = cross_source_correlations(truth);
  const std::array<double, 3> truths{t.mu, t.log_sigma, t.xi};
  const std::array<const char*, 3> names{"mu", "log_sigma", "xi"};
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> v;
    for (const auto& e : out.estimates) v.push_back(e[k]);
    RecoveryRow row;
    row.quantity = names[k];
    row.truth = truths[k];
    row.median = stats::median(v);
    row.sd = stats::sd(v);
    row.iqr = stats::quantile(v, 0.75) - stats::quantile(v, 0.25);
    row.q05 = stats::quantile(v, 0.05);
    row.q95 = stats::quantile(v, 0.95);
    out.rows.push_back(row);
  }
  return out;
}

std::vector<SaturationRow> saturation_experiment(const StackedObservations& stack,
                                                 const Eigen::MatrixXd& w,
                                                 std::span<const int> sizes,
                                                 int n_draws_per_size, std::uint64_t seed,
                                                 const LooOptions& loo,
                                                 const LmcFitOptions& joint_lmc,
                                                 const LmcFitOptions& baseline_lmc,
                                                 int jobs) {
  const auto obs = sites_of(stack, Source::Obs);
  const auto sim = sites_of(stack, Source::Sim);
  if (n_draws_per_size < 1) throw std::invalid_argument("saturation: draws must be positive");
  for (int s : sizes)
    if (s < 0 || static_cast<std::size_t>(s) > sim.size())
      throw std::invalid_argument("saturation: subset size " + std::to_string(s) +
                                  " exceeds the " + std::to_string(sim.size()) +
                                  " simulation sites");

  std::vector<Eigen::Index> base_rows;
  const auto base = single_source(stack, Source::Obs, &base_rows);
  const Eigen::MatrixXd base_w = submatrix(w, base_rows);
  const Eigen::MatrixXd base_dist = distance_matrix(base.sites);
  const auto base_fit = fit_lmc(base, base_w, base_dist, baseline_lmc);
  const double base_rmse =
      loo_block(base_fit.params, base, base_w, base_dist, Source::Obs, loo).report.rmse_rl;

  struct Task {
    std::size_t size_index;
    int draw;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < sizes.size(); ++i)
    for (int d = 0; d < (sizes[i] == 0 ? 1 : n_draws_per_size); ++d) tasks.push_back({i, d});
  std::vector<SaturationRow> rows(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t t) {
    const auto [i, d] = tasks[t];
    const int size = sizes[i];
    SaturationRow row{size, d, base_rmse, 0.0};
    if (size > 0) {
      auto pool = sim;
      Rng rng = make_rng(seed, 1 + i * 100003 + static_cast<std::size_t>(d));
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<std::size_t> keep = obs;
      keep.insert(keep.end(), pool.begin(), pool.begin() + size);
      std::vector<Eigen::Index> rows_sub;
      const auto sub = select_sites(stack, keep, &rows_sub);
      const Eigen::MatrixXd sub_w = submatrix(w, rows_sub);
      const Eigen::MatrixXd sub_dist = distance_matrix(sub.sites);
      auto o = joint_lmc;
      o.jobs = 1;
      const auto fit = fit_lmc(sub, sub_w, sub_dist, o);
      row.rmse_rl = loo_block(fit.params, sub, sub_w, sub_dist, Source::Obs, loo).report.rmse_rl;
      row.reduction_pct = 100.0 * (1.0 - row.rmse_rl / base_rmse);
    }
    rows[t] = row;
  });
  return rows;
}

}  // namespace gevfuse
