#include "config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "gevfuse/errors.hpp"
#include "gevfuse/parallel.hpp"

namespace gevfuse::cli {

namespace {

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_checked(nlohmann::ordered_json& into, const nlohmann::json& from,
                   const std::string& where) {
  if (!from.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : from.items()) {
    const auto name = where.empty() ? key : where + "." + key;
    if (!into.contains(key)) throw std::invalid_argument("config: unknown key '" + name + "'");
    auto& slot = into[key];
    if (slot.is_object()) {
      merge_checked(slot, value, name);
    } else {
      if (!same_kind(slot, value))
        throw std::invalid_argument("config: '" + name + "' has the wrong type");
      slot = value;
    }
  }
}

RunConfig from_full_json(const nlohmann::ordered_json& j) {
  RunConfig c;
  c.seed = j["seed"].get<std::uint64_t>();
  c.jobs = j["jobs"].get<int>();
  const auto& p = j["paths"];
  c.paths = {p["sites"], p["maxima"], p["grid"], p["blocks"], p["output_dir"]};
  const auto& s = j["stage1"];
  c.stage1 = {s["nonstationary_source"], s["t_ref"], s["year_frac"], s["min_years"]};
  const auto& b = j["bootstrap"];
  c.bootstrap = {b["B"], b["taper_km"], b["min_replicates"]};
  const auto& l = j["lmc"];
  const auto range = l["rho_init_range"].get<std::vector<double>>();
  if (range.size() != 2) throw std::invalid_argument("config: lmc.rho_init_range needs 2 values");
  c.lmc = {l["n_starts"], range[0], range[1]};
  const auto& pr = j["predict"];
  c.predict = {pr["T"].get<std::vector<double>>(), pr["n_draws"]};
  c.loocv.baseline = j["loocv"]["baseline"];
  const auto& bc = j["blockcv"];
  c.blockcv = {bc["n_blocks"], bc["refit"], bc["force"]};
  const auto& sm = j["simulate"];
  c.simulate = {sm["mode"], sm["n_obs"], sm["n_sim"], sm["n_years"], sm["first_year"],
                sm["obs_trend"]};
  const auto& id = j["identifiability"];
  c.identifiability = {id["n_reps"], id["from_pipeline"]};
  const auto& sa = j["saturation"];
  c.saturation = {sa["sizes"].get<std::vector<int>>(), sa["draws"]};
  return c;
}

}  // namespace

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["paths"] = {{"sites", c.paths.sites},
                {"maxima", c.paths.maxima},
                {"grid", c.paths.grid},
                {"blocks", c.paths.blocks},
                {"output_dir", c.paths.output_dir}};
  j["stage1"] = {{"nonstationary_source", c.stage1.nonstationary_source},
                 {"t_ref", c.stage1.t_ref},
                 {"year_frac", c.stage1.year_frac},
                 {"min_years", c.stage1.min_years}};
  j["bootstrap"] = {{"B", c.bootstrap.B},
                    {"taper_km", c.bootstrap.taper_km},
                    {"min_replicates", c.bootstrap.min_replicates}};
  j["lmc"] = {{"n_starts", c.lmc.n_starts},
              {"rho_init_range", {c.lmc.rho_min, c.lmc.rho_max}}};
  j["predict"] = {{"T", c.predict.T}, {"n_draws", c.predict.n_draws}};
  j["loocv"] = {{"baseline", c.loocv.baseline}};
  j["blockcv"] = {{"n_blocks", c.blockcv.n_blocks},
                  {"refit", c.blockcv.refit},
                  {"force", c.blockcv.force}};
  j["simulate"] = {{"mode", c.simulate.mode},         {"n_obs", c.simulate.n_obs},
                   {"n_sim", c.simulate.n_sim},       {"n_years", c.simulate.n_years},
                   {"first_year", c.simulate.first_year}, {"obs_trend", c.simulate.obs_trend}};
  j["identifiability"] = {{"n_reps", c.identifiability.n_reps},
                          {"from_pipeline", c.identifiability.from_pipeline}};
  j["saturation"] = {{"sizes", c.saturation.sizes}, {"draws", c.saturation.draws}};
  return j;
}

void merge_json(RunConfig& c, const nlohmann::json& j) {
  auto full = to_json(c);
  merge_checked(full, j, "");
  c = from_full_json(full);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  RunConfig c;
  try {
    merge_json(c, nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed config file " + path.string() + ": " + e.what());
  }
  return c;
}

void validate(const RunConfig& c) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("config: ") + what);
  };
  const auto& ns = c.stage1.nonstationary_source;
  require(ns == "OBS" || ns == "SIM" || ns == "both" || ns == "none",
          "stage1.nonstationary_source must be OBS, SIM, both or none");
  require(c.jobs >= 1, "jobs must be >= 1");
  require(c.stage1.year_frac >= 0.0 && c.stage1.year_frac <= 1.0,
          "stage1.year_frac must lie in [0, 1]");
  require(c.stage1.min_years >= 10, "stage1.min_years must be >= 10 (GEV fits need 10 values)");
  require(c.bootstrap.B >= 1, "bootstrap.B must be >= 1");
  require(c.bootstrap.taper_km > 0.0, "bootstrap.taper_km must be positive");
  require(c.bootstrap.min_replicates >= 2, "bootstrap.min_replicates must be >= 2");
  require(c.lmc.n_starts >= 1, "lmc.n_starts must be >= 1");
  require(c.lmc.rho_min > 0.0 && c.lmc.rho_max >= c.lmc.rho_min,
          "lmc.rho_init_range must satisfy 0 < min <= max");
  require(!c.predict.T.empty(), "predict.T must list at least one return period");
  for (double T : c.predict.T) require(T > 1.0, "predict.T values must exceed 1");
  require(c.predict.n_draws >= 2, "predict.n_draws must be >= 2");
  require(c.loocv.baseline == "single-source" || c.loocv.baseline == "none",
          "loocv.baseline must be single-source or none");
  require(c.blockcv.n_blocks >= 1, "blockcv.n_blocks must be >= 1");
  require(c.simulate.mode == "full" || c.simulate.mode == "stack",
          "simulate.mode must be full or stack");
  require(c.simulate.n_obs >= 0 && c.simulate.n_sim >= 0 && c.simulate.n_obs + c.simulate.n_sim > 0,
          "simulate needs at least one site");
  require(c.simulate.n_years >= 10, "simulate.n_years must be >= 10");
  require(c.identifiability.n_reps >= 1, "identifiability.n_reps must be >= 1");
  require(c.saturation.draws >= 1, "saturation.draws must be >= 1");
  for (int s : c.saturation.sizes) require(s >= 0, "saturation.sizes must be nonnegative");
}

Stage1Options RunConfig::stage1_options() const {
  const auto& ns = stage1.nonstationary_source;
  Stage1Options o;
  o.nonstationary_obs = ns == "OBS" || ns == "both";
  o.nonstationary_sim = ns == "SIM" || ns == "both";
  o.t_ref = stage1.t_ref;
  return o;
}

std::filesystem::path RunConfig::out(const std::string& name) const {
  std::filesystem::path dir = paths.output_dir;
  if (dir.empty()) {
    const char* env = std::getenv("GEVFUSE_OUT_DIR");
    dir = env && *env ? env : "gevfuse_out";
  }
  return dir / name;
}

std::uint64_t RunConfig::hash() const {
  auto j = to_json(*this);
  j.erase("jobs");
  j["paths"].erase("output_dir");
  return fnv1a(j.dump());
}

}  // namespace gevfuse::cli
