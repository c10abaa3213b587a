#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "gevfuse/data.hpp"
#include "gevfuse/errors.hpp"
#include "gevfuse/parallel.hpp"
#include "oracles.hpp"

using namespace gevfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "gevfuse_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string error_of(const fs::path& sites, const fs::path& maxima) {
  try {
    load_dataset(sites, maxima);
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

AnnualMaximaSeries series(const std::string& id, int n, std::vector<double> comp = {}) {
  AnnualMaximaSeries s{id, {}, {}, std::move(comp)};
  for (int i = 0; i < n; ++i) {
    s.years.push_back(1980 + i);
    s.values.push_back(1.0 + 0.01 * i);
  }
  return s;
}

}  // namespace

TEST_CASE("fixture with one gauge and one node loads") {
  const auto ds = load_dataset(FIXTURE_DIR "/tiny_sites.csv", FIXTURE_DIR "/tiny_maxima.csv");
  REQUIRE(ds.size() == 2);
  CHECK(ds.series[0].size() == 3);
  CHECK(ds.series[1].size() == 3);
  CHECK(ds.sites[0].source == Source::Obs);
  CHECK(ds.sites[1].source == Source::Sim);
  CHECK(ds.series[0].completeness[1] == doctest::Approx(0.95));
  CHECK(ds.count(Source::Obs) == 1);
  CHECK(ds.index_of("NODE_B") == 1);
  CHECK_THROWS_AS(ds.index_of("nope"), DataError);
}

TEST_CASE("loader rejects bad rows with a location") {
  const auto maxima = scratch("m.csv");
  write(maxima, "site_id,year,value\nA,2000,1.0\n");

  SUBCASE("latitude out of range") {
    const auto sites = scratch("lat.csv");
    write(sites, "site_id,source,lat,lon\nA,OBS,95,0\n");
    CHECK(error_of(sites, maxima).find("latitude out of range") != std::string::npos);
  }
  SUBCASE("duplicate site-year names the pair") {
    const auto sites = scratch("s.csv");
    write(sites, "site_id,source,lat,lon\nA,OBS,30,-80\n");
    const auto dup = scratch("dup.csv");
    write(dup, "site_id,year,value\nA,2000,1.0\nA,2001,1.1\nA,2000,1.2\n");
    const auto msg = error_of(sites, dup);
    CHECK(msg.find("duplicate") != std::string::npos);
    CHECK(msg.find("A, 2000") != std::string::npos);
  }
  SUBCASE("unknown source tag") {
    const auto sites = scratch("src.csv");
    write(sites, "site_id,source,lat,lon\nA,RADAR,30,-80\n");
    CHECK(error_of(sites, maxima).find("unknown source") != std::string::npos);
  }
  SUBCASE("duplicate site id") {
    const auto sites = scratch("dupsite.csv");
    write(sites, "site_id,source,lat,lon\nA,OBS,30,-80\nA,SIM,31,-80\n");
    CHECK(error_of(sites, maxima).find("duplicate site id") != std::string::npos);
  }
  SUBCASE("malformed number reports the line") {
    const auto sites = scratch("num.csv");
    write(sites, "site_id,source,lat,lon\nA,OBS,30,-80\nB,OBS,abc,-80\n");
    CHECK(error_of(sites, maxima).find(":3") != std::string::npos);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_dataset(scratch("absent.csv"), maxima), DataError);
  }
}

TEST_CASE("haversine") {
  const Site a{"a", Source::Obs, 29.95, -90.07};
  const Site b{"b", Source::Obs, 42.36, -71.06};
  CHECK(haversine_km(a, a) == 0.0);
  CHECK(haversine_km(0, 0, 0, 180) == doctest::Approx(std::numbers::pi * 6371.0).epsilon(1e-14));
  CHECK(haversine_km(0, 0, 0, 180) == doctest::Approx(20015.0867960206).epsilon(1e-13));
  // Independent evaluation of the haversine formula.
  CHECK(haversine_km(a, b) == doctest::Approx(2185.88454596081).epsilon(1e-12));
  CHECK(haversine_km(a, b) == haversine_km(b, a));
}

TEST_CASE("haversine is a metric on random triples") {
  auto rng = make_rng(11, 0);
  std::uniform_real_distribution<double> lat(-90, 90), lon(-180, 180);
  for (int i = 0; i < 2000; ++i) {
    const double la1 = lat(rng), lo1 = lon(rng), la2 = lat(rng), lo2 = lon(rng), la3 = lat(rng),
                 lo3 = lon(rng);
    const double d12 = haversine_km(la1, lo1, la2, lo2), d23 = haversine_km(la2, lo2, la3, lo3),
                 d13 = haversine_km(la1, lo1, la3, lo3);
    REQUIRE(d12 >= 0.0);
    REQUIRE(d12 == haversine_km(la2, lo2, la1, lo1));
    REQUIRE(haversine_km(la1, lo1, la1, lo1) == 0.0);
    REQUIRE(d13 <= d12 + d23 + 1e-9);
    REQUIRE(d12 == doctest::Approx(oracle::haversine(la1, lo1, la2, lo2)).epsilon(1e-12));
  }
}

TEST_CASE("distance matrix is symmetric with zero diagonal") {
  auto rng = make_rng(3, 0);
  const auto sites = oracle::random_sites(rng, 4, 5);
  const auto d = distance_matrix(sites);
  CHECK(d.rows() == 9);
  CHECK((d - d.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(d.diagonal().cwiseAbs().maxCoeff() == 0.0);
  CHECK(d(2, 7) == haversine_km(sites[2], sites[7]));
}

TEST_CASE("completeness filter") {
  const Site s1{"A", Source::Obs, 30, -80}, s2{"B", Source::Sim, 31, -80},
      s3{"C", Source::Obs, 32, -80};

  SUBCASE("complete series unchanged") {
    const auto ds = make_dataset({s1}, {series("A", 25, std::vector<double>(25, 1.0))});
    const auto r = completeness_filter(ds);
    CHECK(r.dataset == ds);
    CHECK(r.report.dropped_years.empty());
    CHECK(r.report.dropped_sites.empty());
  }
  SUBCASE("one year below threshold removed") {
    std::vector<double> c(25, 1.0);
    c[4] = 0.85;
    const auto r = completeness_filter(make_dataset({s1}, {series("A", 25, c)}));
    REQUIRE(r.dataset.size() == 1);
    CHECK(r.dataset.series[0].size() == 24);
    REQUIRE(r.report.dropped_years.size() == 1);
    CHECK(r.report.dropped_years[0].year == 1984);
  }
  SUBCASE("site left with 19 years is removed and reported") {
    std::vector<double> c(20, 1.0);
    c[0] = 0.5;
    const auto ds = make_dataset({s1, s2}, {series("A", 20, c), series("B", 30)});
    const auto r = completeness_filter(ds, 0.9, 20);
    REQUIRE(r.dataset.size() == 1);
    CHECK(r.dataset.sites[0].id == "B");
    REQUIRE(r.report.dropped_sites.size() == 1);
    CHECK(r.report.dropped_sites[0] == "A");
  }
  SUBCASE("series without metadata pass; empty result flagged") {
    const auto r = completeness_filter(make_dataset({s2}, {series("B", 5)}), 0.9, 20);
    CHECK(r.dataset.size() == 0);
    CHECK(r.report.empty_result);
  }
  SUBCASE("idempotent") {
    auto rng = make_rng(5, 0);
    std::uniform_real_distribution<double> u(0.7, 1.0);
    std::vector<double> ca(30), cc(22);
    for (auto& x : ca) x = u(rng);
    for (auto& x : cc) x = u(rng);
    const auto ds = make_dataset({s1, s2, s3}, {series("A", 30, ca), series("B", 30),
                                                series("C", 22, cc)});
    const auto once = completeness_filter(ds, 0.9, 15).dataset;
    const auto twice = completeness_filter(once, 0.9, 15).dataset;
    CHECK(once == twice);
  }
}

TEST_CASE("dataset invariants") {
  const Site s{"A", Source::Obs, 30, -80};
  auto bad = series("A", 5);
  bad.years[3] = bad.years[2];
  CHECK_THROWS_AS(make_dataset({s}, {bad}), DataError);
  auto nan = series("A", 5);
  nan.values[1] = std::nan("");
  CHECK_THROWS_AS(make_dataset({s}, {nan}), DataError);
  CHECK_THROWS_AS(make_dataset({Site{"A", Source::Obs, 30, 181}}, {series("A", 5)}), DataError);
  CHECK_THROWS_AS(make_dataset({s}, {series("Z", 5)}), DataError);
}

TEST_CASE("save then load is the identity") {
  auto rng = make_rng(9, 0);
  const auto sites = oracle::random_sites(rng, 3, 4);
  std::vector<AnnualMaximaSeries> all;
  std::normal_distribution<double> z(2.0, 0.3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& s : sites) {
    auto x = series(s.id, 12, s.source == Source::Obs ? std::vector<double>(12) : std::vector<double>{});
    for (auto& v : x.values) v = z(rng);
    for (auto& c : x.completeness) c = u(rng);
    all.push_back(x);
  }
  const auto ds = make_dataset(sites, all);
  const auto sp = scratch("rt_sites.csv"), mp = scratch("rt_maxima.csv");
  save_dataset(ds, sp, mp, "# generated\n");
  CHECK(load_dataset(sp, mp) == ds);

  const auto mixed = scratch("mixed.csv");
  write(mixed, "site_id,year,value,completeness\n" + sites[0].id + ",2000,1.0,1.0\n" +
                   sites[0].id + ",2001,1.0,\n");
  CHECK_THROWS_AS(load_dataset(sp, mixed), DataError);
}
