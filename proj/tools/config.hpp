#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "gevfuse/marginal.hpp"

namespace gevfuse::cli {

struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 1;

  struct Paths {
    std::string sites;
    std::string maxima;
    std::string grid;
    std::string blocks;
    std::string output_dir;
  } paths;

  struct Stage1 {
    std::string nonstationary_source = "OBS";  // OBS, SIM, both, none
    double t_ref = 2000.0;
    double year_frac = 0.90;
    int min_years = 20;
  } stage1;

  struct Bootstrap {
    int B = 500;
    double taper_km = 300.0;
    int min_replicates = 50;
  } bootstrap;

  struct Lmc {
    int n_starts = 20;
    double rho_min = 50.0;
    double rho_max = 5000.0;
  } lmc;

  struct Predict {
    std::vector<double> T{100.0};
    int n_draws = 10000;
  } predict;

  struct Loocv {
    std::string baseline = "single-source";  // or none
  } loocv;

  struct BlockCv {
    int n_blocks = 5;
    bool refit = true;
    bool force = false;
  } blockcv;

  struct Simulate {
    std::string mode = "full";  // full or stack
    int n_obs = 29;
    int n_sim = 100;
    int n_years = 43;
    int first_year = 1979;
    double obs_trend = 0.0046;
  } simulate;

  struct Identifiability {
    int n_reps = 100;
    bool from_pipeline = false;
  } identifiability;

  struct Saturation {
    std::vector<int> sizes{0, 5, 10, 15, 20, 30, 50, 100};
    int draws = 5;
  } saturation;

  Stage1Options stage1_options() const;
  std::filesystem::path out(const std::string& name) const;
  /// Fingerprint of everything that can change outputs (jobs, logging and
  /// the output directory excluded).
  std::uint64_t hash() const;
};

nlohmann::ordered_json to_json(const RunConfig& c);
/// Overlays the keys present in `j` onto `c`; unknown keys are rejected.
void merge_json(RunConfig& c, const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Throws std::invalid_argument naming the first invalid field.
void validate(const RunConfig& c);

}  // namespace gevfuse::cli
