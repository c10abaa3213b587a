#include "gevfuse/persist.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "gevfuse/csv.hpp"
#include "gevfuse/errors.hpp"

namespace gevfuse::persist {

namespace {

using csv::format;

std::string opt(const std::optional<double>& v) { return v ? format(*v) : std::string(); }

std::map<std::string, std::string> header_fields(const csv::Table& t) {
  std::map<std::string, std::string> out;
  for (const auto& c : t.comments) {
    const auto eq = c.find('=');
    if (eq == std::string::npos) continue;
    auto key = c.substr(0, eq);
    key.erase(0, key.find_first_not_of(' '));
    out[key] = c.substr(eq + 1);
  }
  return out;
}

std::uint64_t parse_hex(const std::string& text, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used, 16);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw DataError("bad hash '" + text + "' in " + path.string());
}

std::optional<double> optional_cell(const std::string& text, const csv::Table& t,
                                    std::size_t line) {
  if (text.empty()) return std::nullopt;
  return csv::parse_double(text, t, line);
}

void write_report_cells(std::ostream& os, const CvReport& r) {
  os << r.n_sites << ',' << format(r.rmse_mu) << ',' << format(r.rmse_logsigma) << ','
     << format(r.rmse_xi) << ',' << format(r.rmse_rl) << ',' << format(r.total_lpd) << ','
     << r.sites_won;
  for (const auto& level : r.coverage)
    for (double c : level) os << ',' << format(c);
  for (double p : r.ks_p) os << ',' << format(p);
}

}  // namespace

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

void write_header(std::ostream& os, const Provenance& prov) {
  os << "# config_hash=" << hex(prov.config_hash) << '\n' << "# seed=" << prov.seed << '\n';
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
    if (!out) throw DataError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string fit_table(const Dataset& ds, std::span<const GevFitResult> fits,
                      const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "site_id,source,mu0,mu1,log_sigma,xi,se_mu0,se_mu1,se_log_sigma,se_xi,nll,"
        "converged,n_used,t_ref\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = fits[i];
    os << ds.sites[i].id << ',' << to_string(ds.sites[i].source) << ','
       << format(f.params.mu0) << ',' << opt(f.params.mu1) << ','
       << format(f.params.log_sigma) << ',' << format(f.params.xi) << ','
       << format(f.se.mu0) << ',' << opt(f.se.mu1) << ',' << format(f.se.log_sigma) << ','
       << format(f.se.xi) << ',' << format(f.nll) << ',' << (f.converged ? 1 : 0) << ','
       << f.n_used << ',' << opt(f.t_ref) << '\n';
  }
  return os.str();
}

std::vector<GevFitResult> read_fit_table(const std::filesystem::path& path,
                                         const Dataset& ds) {
  const auto t = csv::read(path);
  const auto c = [&t](const char* name) { return t.column(name); };
  std::vector<std::optional<GevFitResult>> fits(ds.size());
  for (const auto& row : t.rows) {
    const auto& f = row.fields;
    std::size_t i = 0;
    try {
      i = ds.index_of(f[c("site_id")]);
    } catch (const DataError&) {
      throw DataError("fit table " + path.string() + ":" + std::to_string(row.line) +
                      " names site '" + f[c("site_id")] + "' not in the dataset");
    }
    GevFitResult r;
    r.params.mu0 = csv::parse_double(f[c("mu0")], t, row.line);
    r.params.mu1 = optional_cell(f[c("mu1")], t, row.line);
    r.params.log_sigma = csv::parse_double(f[c("log_sigma")], t, row.line);
    r.params.xi = csv::parse_double(f[c("xi")], t, row.line);
    r.se.mu0 = csv::parse_double(f[c("se_mu0")], t, row.line);
    r.se.mu1 = optional_cell(f[c("se_mu1")], t, row.line);
    r.se.log_sigma = csv::parse_double(f[c("se_log_sigma")], t, row.line);
    r.se.xi = csv::parse_double(f[c("se_xi")], t, row.line);
    r.nll = csv::parse_double(f[c("nll")], t, row.line);
    r.converged = csv::parse_long(f[c("converged")], t, row.line) != 0;
    r.n_used = static_cast<int>(csv::parse_long(f[c("n_used")], t, row.line));
    r.t_ref = optional_cell(f[c("t_ref")], t, row.line);
    if (r.t_ref) r.params.t_ref = *r.t_ref;
    fits[i] = r;
  }
  std::vector<GevFitResult> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!fits[i])
      throw DataError("fit table " + path.string() + " has no row for site '" +
                      ds.sites[i].id + "'");
    out.push_back(*fits[i]);
  }
  return out;
}

std::string trend_table(const Dataset& ds, std::span<const TrendTestResult> trends,
                        const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "site_id,s_stat,z,p_value,sen_slope\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = trends[i];
    os << ds.sites[i].id << ',' << r.s_stat << ',' << format(r.z) << ','
       << format(r.p_value) << ',' << opt(r.sen_slope) << '\n';
  }
  return os.str();
}

std::string measurement_cov(const MeasurementCov& w, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "# n_obs=" << w.w.rows() << '\n'
     << "# taper_km=" << format(w.taper_km) << '\n'
     << "# B=" << w.b_replicates << '\n'
     << "# bootstrap_seed=" << w.seed << '\n'
     << "# layout_hash=" << hex(w.layout_hash) << '\n'
     << "# repaired=" << (w.repaired ? 1 : 0) << '\n'
     << "m,n,value\n";
  for (Eigen::Index m = 0; m < w.w.rows(); ++m)
    for (Eigen::Index n = m; n < w.w.cols(); ++n)
      if (w.w(m, n) != 0.0) os << m << ',' << n << ',' << format(w.w(m, n)) << '\n';
  return os.str();
}

MeasurementCov read_measurement_cov(const std::filesystem::path& path,
                                    const StackedObservations& stack) {
  const auto t = csv::read(path);
  const auto h = header_fields(t);
  for (const char* key : {"n_obs", "taper_km", "B", "bootstrap_seed", "layout_hash", "repaired"})
    if (!h.count(key)) throw DataError("W file " + path.string() + " lacks header '" + key + "'");
  MeasurementCov w;
  const long n = std::stol(h.at("n_obs"));
  if (n != stack.size())
    throw DataError("W file " + path.string() + " has n_obs=" + std::to_string(n) +
                    " but the stack has " + std::to_string(stack.size()) + " rows");
  w.layout_hash = parse_hex(h.at("layout_hash"), path);
  if (w.layout_hash != stack.layout_hash())
    throw DataError("W file " + path.string() +
                    " was built for a different stack layout (stale artifact)");
  w.taper_km = std::stod(h.at("taper_km"));
  w.b_replicates = std::stoi(h.at("B"));
  w.seed = std::stoull(h.at("bootstrap_seed"));
  w.repaired = h.at("repaired") == "1";
  w.w = Eigen::MatrixXd::Zero(n, n);
  const auto cm = t.column("m"), cn = t.column("n"), cv = t.column("value");
  for (const auto& row : t.rows) {
    const long m = csv::parse_long(row.fields[cm], t, row.line);
    const long k = csv::parse_long(row.fields[cn], t, row.line);
    if (m < 0 || k < m || k >= n)
      throw DataError("W entry out of range at " + path.string() + ":" + std::to_string(row.line));
    w.w(m, k) = w.w(k, m) = csv::parse_double(row.fields[cv], t, row.line);
  }
  return w;
}

std::string lmc_model(const StoredModel& model, const Provenance& prov) {
  const auto& p = model.params;
  nlohmann::ordered_json j;
  j["config_hash"] = hex(prov.config_hash);
  j["seed"] = model.seed;
  j["dim"] = p.dim();
  j["beta"] = std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size());
  std::vector<double> a;
  for (int r = 0; r < p.dim(); ++r)
    for (int c = 0; c < p.dim(); ++c) a.push_back(p.a(r, c));
  j["A"] = a;
  j["rho"] = std::vector<double>(p.rho.data(), p.rho.data() + p.rho.size());
  j["nll"] = model.nll;
  j["n_starts"] = model.n_starts;
  j["layout_hash"] = hex(model.layout_hash);
  return j.dump(2) + "\n";
}

StoredModel read_lmc_model(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_layout) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path.string());
  StoredModel m;
  try {
    const auto j = nlohmann::json::parse(in);
    const int dim = j.at("dim").get<int>();
    const auto beta = j.at("beta").get<std::vector<double>>();
    const auto a = j.at("A").get<std::vector<double>>();
    const auto rho = j.at("rho").get<std::vector<double>>();
    if (dim < 1 || beta.size() != static_cast<std::size_t>(dim) ||
        a.size() != static_cast<std::size_t>(dim * dim) ||
        rho.size() != static_cast<std::size_t>(dim))
      throw DataError("model file " + path.string() + " has inconsistent dimensions");
    m.params.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), dim);
    m.params.a = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                Eigen::RowMajor>>(a.data(), dim, dim);
    m.params.rho = Eigen::Map<const Eigen::VectorXd>(rho.data(), dim);
    m.nll = j.at("nll").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_starts = j.at("n_starts").get<int>();
    m.layout_hash = parse_hex(j.at("layout_hash").get<std::string>(), path);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model file " + path.string() + ": " + e.what());
  }
  if (expected_layout && m.layout_hash != *expected_layout)
    throw DataError("model file " + path.string() +
                    " was fitted to a different stack layout (stale artifact)");
  return m;
}

std::string grid_table(std::span<const GridRow> rows, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "point_id,lat,lon,mu,log_sigma,xi,mu_sim,log_sigma_sim,xi_sim";
  if (!rows.empty())
    for (const auto& l : rows.front().levels) {
      const auto T = format(l.T);
      os << ",rl_" << T << ",se_mc_" << T << ",se_delta_" << T;
    }
  os << '\n';
  for (const auto& r : rows) {
    os << r.point.id << ',' << format(r.point.lat) << ',' << format(r.point.lon);
    for (Eigen::Index k = 0; k < 6; ++k)
      os << ',' << (k < r.kriged.theta.size() ? format(r.kriged.theta[k]) : std::string());
    for (const auto& l : r.levels)
      os << ',' << format(l.rl) << ',' << format(l.se_mc) << ',' << format(l.se_delta);
    os << '\n';
  }
  return os.str();
}

std::string loo_table(std::span<const LooSiteResult> sites, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "site_id,q,pred,pred_sd,obs,pit,lpd\n";
  for (const auto& s : sites) {
    for (int k = 0; k < 3; ++k)
      os << s.site_id << ',' << kQuantityNames[static_cast<std::size_t>(k)] << ','
         << format(s.predicted[k]) << ',' << format(std::sqrt(s.pred_cov(k, k))) << ','
         << format(s.observed[k]) << ',' << format(s.pit[static_cast<std::size_t>(k)]) << ','
         << format(s.lpd) << '\n';
    os << s.site_id << ",rl," << format(s.rl_pred) << ',' << format(s.rl_sd) << ','
       << format(s.rl_obs) << ',' << format(s.pit[3]) << ',' << format(s.lpd) << '\n';
  }
  return os.str();
}

std::string cv_report(std::span<const NamedReport> reports, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "model,fold,n_sites,rmse_mu,rmse_log_sigma,rmse_xi,rmse_rl,total_lpd,sites_won";
  for (double level : kCoverageLevels)
    for (const char* q : kQuantityNames)
      os << ",cov" << static_cast<int>(std::lround(level * 100)) << '_' << q;
  for (const char* q : kQuantityNames) os << ",ks_p_" << q;
  os << '\n';
  for (const auto& r : reports) {
    os << r.model << ',' << r.fold << ',';
    write_report_cells(os, r.report);
    os << '\n';
  }
  return os.str();
}

std::string decomposition_table(std::span<const DecompositionRow> rows,
                                const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "parameters_from_joint,rmse_rl,reduction_pct\n";
  for (const auto& r : rows)
    os << r.label << ',' << format(r.rmse_rl) << ',' << format(r.reduction_pct) << '\n';
  return os.str();
}

std::string identifiability_table(const IdentifiabilityResult& r, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "# n_ok=" << r.estimates.size() << '\n' << "# n_failed=" << r.n_failed << '\n';
  os << "quantity,truth,median,sd,iqr,q05,q95\n";
  for (const auto& row : r.rows)
    os << row.quantity << ',' << format(row.truth) << ',' << format(row.median) << ','
       << format(row.sd) << ',' << format(row.iqr) << ',' << format(row.q05) << ','
       << format(row.q95) << '\n';
  return os.str();
}

std::string saturation_table(std::span<const SaturationRow> rows, const Provenance& prov) {
  std::ostringstream os;
  write_header(os, prov);
  os << "size,draw,rmse_rl,reduction_pct\n";
  for (const auto& r : rows)
    os << r.size << ',' << r.draw << ',' << format(r.rmse_rl) << ','
       << format(r.reduction_pct) << '\n';
  return os.str();
}

}  // namespace gevfuse::persist
