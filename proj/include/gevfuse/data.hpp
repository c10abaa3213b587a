#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace gevfuse {

enum class Source { Obs, Sim };

std::string_view to_string(Source s);
Source parse_source(std::string_view text);

/// A georeferenced station. Coordinates are in degrees.
struct Site {
  std::string id;
  Source source = Source::Obs;
  double lat = 0.0;
  double lon = 0.0;

  bool operator==(const Site&) const = default;
};

/// Annual block maxima at one site. `completeness` is either empty (assume
/// complete) or one fraction in [0, 1] per year.
struct AnnualMaximaSeries {
  std::string site_id;
  std::vector<int> years;
  std::vector<double> values;
  std::vector<double> completeness;

  std::size_t size() const { return years.size(); }
  bool operator==(const AnnualMaximaSeries&) const = default;
};

/// Sites with exactly one series each; series[i] belongs to sites[i].
/// Immutable after construction through load_dataset / make_dataset.
struct Dataset {
  std::vector<Site> sites;
  std::vector<AnnualMaximaSeries> series;

  std::size_t size() const { return sites.size(); }
  std::size_t count(Source s) const;
  /// Index of the site with this id; throws DataError when unknown.
  std::size_t index_of(std::string_view id) const;
  bool operator==(const Dataset&) const = default;
};

/// Validates invariants (coordinate ranges, unique ids, increasing years,
/// finite values, completeness in [0,1], one series per site) and returns
/// the dataset. Throws DataError on violation.
Dataset make_dataset(std::vector<Site> sites,
                     std::vector<AnnualMaximaSeries> series);

/// Reads `site_id,source,lat,lon` and `site_id,year,value[,completeness]`.
Dataset load_dataset(const std::filesystem::path& sites_path,
                     const std::filesystem::path& maxima_path);
std::vector<Site> load_sites(const std::filesystem::path& sites_path);
/// `preamble` (comment lines, each starting with '#') precedes both headers.
void save_dataset(const Dataset& ds, const std::filesystem::path& sites_path,
                  const std::filesystem::path& maxima_path,
                  std::string_view preamble = {});

inline constexpr double kEarthRadiusKm = 6371.0;

/// Great-circle distance in km on a sphere of mean Earth radius.
double haversine_km(double lat1, double lon1, double lat2, double lon2);
inline double haversine_km(const Site& a, const Site& b) {
  return haversine_km(a.lat, a.lon, b.lat, b.lon);
}

/// Dense symmetric matrix of pairwise site distances (km).
Eigen::MatrixXd distance_matrix(std::span<const Site> sites);

struct FilterReport {
  struct DroppedYear {
    std::string site_id;
    int year;
    double completeness;
  };
  std::vector<DroppedYear> dropped_years;
  std::vector<std::string> dropped_sites;
  bool empty_result = false;
};

struct FilterResult {
  Dataset dataset;
  FilterReport report;
};

/// Drops years with completeness below `year_frac`, then sites with fewer
/// than `min_years` surviving years. Series without metadata pass step one.
FilterResult completeness_filter(const Dataset& ds, double year_frac = 0.90,
                                 int min_years = 20);

}  // namespace gevfuse
