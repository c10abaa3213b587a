#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/bootstrap.hpp"
#include "gevfuse/data.hpp"
#include "gevfuse/krige.hpp"
#include "gevfuse/lmc.hpp"
#include "gevfuse/marginal.hpp"
#include "gevfuse/validate.hpp"

namespace gevfuse::persist {

/// Provenance written at the top of every output.
struct Provenance {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
};

std::string hex(std::uint64_t v);
void write_header(std::ostream& os, const Provenance& prov);

/// Writes `content` to `path` (creating parent directories), replacing any
/// previous file only once the write succeeded.
void write_file(const std::filesystem::path& path, const std::string& content);

std::string fit_table(const Dataset& ds, std::span<const GevFitResult> fits,
                      const Provenance& prov);
/// Reads a fit table back, aligned with ds.sites; every site must be present.
std::vector<GevFitResult> read_fit_table(const std::filesystem::path& path,
                                         const Dataset& ds);

std::string trend_table(const Dataset& ds, std::span<const TrendTestResult> trends,
                        const Provenance& prov);

std::string measurement_cov(const MeasurementCov& w, const Provenance& prov);
/// Loads W and checks it against the stack layout.
MeasurementCov read_measurement_cov(const std::filesystem::path& path,
                                    const StackedObservations& stack);

struct StoredModel {
  LmcParams params;
  double nll = 0.0;
  std::uint64_t seed = 0;
  int n_starts = 0;
  std::uint64_t layout_hash = 0;
};
std::string lmc_model(const StoredModel& model, const Provenance& prov);
/// Refuses a model whose layout hash differs from `expected_layout` (when given).
StoredModel read_lmc_model(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_layout);

std::string grid_table(std::span<const GridRow> rows, const Provenance& prov);

/// Per-site LOO rows: `site_id,q,pred,pred_sd,obs,pit,lpd`.
std::string loo_table(std::span<const LooSiteResult> sites, const Provenance& prov);

struct NamedReport {
  std::string model;
  std::string fold;
  CvReport report;
};
std::string cv_report(std::span<const NamedReport> reports, const Provenance& prov);

std::string decomposition_table(std::span<const DecompositionRow> rows,
                                const Provenance& prov);
std::string identifiability_table(const IdentifiabilityResult& r, const Provenance& prov);
std::string saturation_table(std::span<const SaturationRow> rows, const Provenance& prov);

}  // namespace gevfuse::persist
