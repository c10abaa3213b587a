#include "gevfuse/data.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <numbers>
#include <set>
#include <unordered_map>

#include "gevfuse/csv.hpp"
#include "gevfuse/errors.hpp"

namespace gevfuse {

std::string_view to_string(Source s) { return s == Source::Obs ? "OBS" : "SIM"; }

Source parse_source(std::string_view text) {
  if (text == "OBS") return Source::Obs;
  if (text == "SIM") return Source::Sim;
  throw DataError("unknown source tag '" + std::string(text) + "'");
}

std::size_t Dataset::count(Source s) const {
  std::size_t n = 0;
  for (const auto& site : sites) n += site.source == s;
  return n;
}

std::size_t Dataset::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (sites[i].id == id) return i;
  throw DataError("unknown site id '" + std::string(id) + "'");
}

namespace {

void check_site(const Site& s) {
  if (s.id.empty()) throw DataError("empty site id");
  if (!(s.lat >= -90.0 && s.lat <= 90.0))
    throw DataError("latitude out of range for site '" + s.id + "'");
  if (!(s.lon >= -180.0 && s.lon <= 180.0))
    throw DataError("longitude out of range for site '" + s.id + "'");
}

void check_series(const AnnualMaximaSeries& s) {
  if (s.values.size() != s.years.size())
    throw DataError("series '" + s.site_id + "': years/values length mismatch");
  if (!s.completeness.empty() && s.completeness.size() != s.years.size())
    throw DataError("series '" + s.site_id +
                    "': completeness length mismatch");
  for (std::size_t i = 0; i < s.years.size(); ++i) {
    if (i > 0 && s.years[i] <= s.years[i - 1])
      throw DataError("series '" + s.site_id +
                      "': years not strictly increasing at " +
                      std::to_string(s.years[i]));
    if (!std::isfinite(s.values[i]))
      throw DataError("series '" + s.site_id + "': non-finite value in year " +
                      std::to_string(s.years[i]));
    if (!s.completeness.empty() &&
        !(s.completeness[i] >= 0.0 && s.completeness[i] <= 1.0))
      throw DataError("series '" + s.site_id +
                      "': completeness outside [0,1] in year " +
                      std::to_string(s.years[i]));
  }
}

}  // namespace

Dataset make_dataset(std::vector<Site> sites,
                     std::vector<AnnualMaximaSeries> series) {
  std::set<std::string> ids;
  for (const auto& s : sites) {
    check_site(s);
    if (!ids.insert(s.id).second)
      throw DataError("duplicate site id '" + s.id + "'");
  }
  if (series.size() != sites.size())
    throw DataError("expected one series per site");
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (series[i].site_id != sites[i].id)
      throw DataError("series order does not match sites at '" + sites[i].id +
                      "'");
    check_series(series[i]);
  }
  return Dataset{std::move(sites), std::move(series)};
}

std::vector<Site> load_sites(const std::filesystem::path& sites_path) {
  const auto t = csv::read(sites_path);
  const auto c_id = t.column("site_id"), c_src = t.column("source"),
             c_lat = t.column("lat"), c_lon = t.column("lon");
  std::vector<Site> sites;
  std::set<std::string> seen;
  for (const auto& row : t.rows) {
    Site s;
    s.id = row.fields[c_id];
    try {
      s.source = parse_source(row.fields[c_src]);
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " at " + sites_path.string() +
                      ":" + std::to_string(row.line));
    }
    s.lat = csv::parse_double(row.fields[c_lat], t, row.line);
    s.lon = csv::parse_double(row.fields[c_lon], t, row.line);
    try {
      check_site(s);
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " at " + sites_path.string() +
                      ":" + std::to_string(row.line));
    }
    if (!seen.insert(s.id).second)
      throw DataError("duplicate site id '" + s.id + "' at " +
                      sites_path.string() + ":" + std::to_string(row.line));
    sites.push_back(std::move(s));
  }
  return sites;
}

Dataset load_dataset(const std::filesystem::path& sites_path,
                     const std::filesystem::path& maxima_path) {
  auto sites = load_sites(sites_path);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < sites.size(); ++i) index[sites[i].id] = i;

  const auto t = csv::read(maxima_path);
  const auto c_id = t.column("site_id"), c_year = t.column("year"),
             c_val = t.column("value");
  const bool has_comp = t.has_column("completeness");
  const auto c_comp = has_comp ? t.column("completeness") : 0;

  struct Entry {
    double value;
    std::optional<double> completeness;
  };
  std::vector<std::map<int, Entry>> rows(sites.size());
  for (const auto& row : t.rows) {
    const auto& id = row.fields[c_id];
    const auto it = index.find(id);
    if (it == index.end())
      throw DataError("unknown site id '" + id + "' at " +
                      maxima_path.string() + ":" + std::to_string(row.line));
    const int year =
        static_cast<int>(csv::parse_long(row.fields[c_year], t, row.line));
    Entry e{csv::parse_double(row.fields[c_val], t, row.line), std::nullopt};
    if (has_comp && !row.fields[c_comp].empty())
      e.completeness = csv::parse_double(row.fields[c_comp], t, row.line);
    if (!rows[it->second].emplace(year, e).second)
      throw DataError("duplicate (site_id, year) = (" + id + ", " +
                      std::to_string(year) + ") at " + maxima_path.string() +
                      ":" + std::to_string(row.line));
  }

  std::vector<AnnualMaximaSeries> series(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    auto& s = series[i];
    s.site_id = sites[i].id;
    std::size_t with_meta = 0;
    for (const auto& [year, e] : rows[i]) {
      s.years.push_back(year);
      s.values.push_back(e.value);
      if (e.completeness) {
        s.completeness.push_back(*e.completeness);
        ++with_meta;
      }
    }
    // An empty completeness cell means the series has no metadata at all.
    if (with_meta != 0 && with_meta != s.size())
      throw DataError("site '" + s.site_id + "': completeness given for some years only in " +
                      maxima_path.string());
  }
  return make_dataset(std::move(sites), std::move(series));
}

void save_dataset(const Dataset& ds, const std::filesystem::path& sites_path,
                  const std::filesystem::path& maxima_path,
                  std::string_view preamble) {
  std::ofstream sf(sites_path);
  if (!sf) throw DataError("cannot write " + sites_path.string());
  sf << preamble << "site_id,source,lat,lon\n";
  for (const auto& s : ds.sites)
    sf << s.id << ',' << to_string(s.source) << ',' << csv::format(s.lat)
       << ',' << csv::format(s.lon) << '\n';

  bool any_comp = false;
  for (const auto& s : ds.series) any_comp |= !s.completeness.empty();
  std::ofstream mf(maxima_path);
  if (!mf) throw DataError("cannot write " + maxima_path.string());
  mf << preamble << "site_id,year,value" << (any_comp ? ",completeness" : "") << '\n';
  for (const auto& s : ds.series) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      mf << s.site_id << ',' << s.years[i] << ',' << csv::format(s.values[i]);
      if (any_comp) {
        mf << ',';
        if (!s.completeness.empty()) mf << csv::format(s.completeness[i]);
      }
      mf << '\n';
    }
  }
}

double haversine_km(double lat1, double lon1, double lat2, double lon2) {
  constexpr double deg = std::numbers::pi / 180.0;
  const double p1 = lat1 * deg, p2 = lat2 * deg;
  const double dphi = (lat2 - lat1) * deg, dlam = (lon2 - lon1) * deg;
  const double sp = std::sin(dphi / 2.0), sl = std::sin(dlam / 2.0);
  const double h = sp * sp + std::cos(p1) * std::cos(p2) * sl * sl;
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

Eigen::MatrixXd distance_matrix(std::span<const Site> sites) {
  const auto n = static_cast<Eigen::Index>(sites.size());
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      d(i, j) = d(j, i) = haversine_km(sites[i], sites[j]);
  return d;
}

FilterResult completeness_filter(const Dataset& ds, double year_frac,
                                 int min_years) {
  FilterResult out;
  std::vector<Site> sites;
  std::vector<AnnualMaximaSeries> series;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& in = ds.series[i];
    AnnualMaximaSeries kept;
    kept.site_id = in.site_id;
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (!in.completeness.empty() && in.completeness[k] < year_frac) {
        out.report.dropped_years.push_back(
            {in.site_id, in.years[k], in.completeness[k]});
        continue;
      }
      kept.years.push_back(in.years[k]);
      kept.values.push_back(in.values[k]);
      if (!in.completeness.empty()) kept.completeness.push_back(in.completeness[k]);
    }
    if (static_cast<int>(kept.size()) < min_years) {
      out.report.dropped_sites.push_back(in.site_id);
      continue;
    }
    sites.push_back(ds.sites[i]);
    series.push_back(std::move(kept));
  }
  out.report.empty_result = sites.empty();
  out.dataset = Dataset{std::move(sites), std::move(series)};
  return out;
}

}  // namespace gevfuse
