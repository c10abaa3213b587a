#include "gevfuse/stack.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "gevfuse/csv.hpp"
#include "gevfuse/errors.hpp"
#include "gevfuse/parallel.hpp"

namespace gevfuse {

namespace {

void fill_indices(StackedObservations& s) {
  const auto L = s.n_sites();
  s.p_index.assign(kParamsPerSite * L, 0);
  s.s_index.assign(kParamsPerSite * L, 0);
  for (int slot = 0; slot < kParamsPerSite; ++slot) {
    for (std::size_t l = 0; l < L; ++l) {
      const auto m = s.row(l, slot);
      const int offset = s.offset_for(s.sites[l].source);
      if (offset < 0)
        throw std::invalid_argument("stack: source " +
                                    std::string(to_string(s.sites[l].source)) +
                                    " has no latent slots in this layout");
      s.p_index[m] = offset + slot;
      s.s_index[m] = static_cast<int>(l);
    }
  }
}

}  // namespace

Eigen::Vector3d StackedObservations::site_values(std::size_t site) const {
  return {values[row(site, 0)], values[row(site, 1)], values[row(site, 2)]};
}

std::size_t StackedObservations::site_index(std::string_view id) const {
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (sites[i].id == id) return i;
  throw DataError("site '" + std::string(id) + "' not in stack");
}

std::uint64_t StackedObservations::layout_hash() const {
  std::ostringstream os;
  os << "dim=" << dim << ";obs=" << obs_offset << ";sim=" << sim_offset << ';';
  for (const auto& s : sites)
    os << s.id << ',' << to_string(s.source) << ',' << csv::format(s.lat) << ','
       << csv::format(s.lon) << ';';
  for (Eigen::Index m = 0; m < size(); ++m)
    os << p_index[m] << ':' << s_index[m] << ',';
  return fnv1a(os.str());
}

std::vector<std::size_t> canonical_order(const Dataset& ds) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ds.sites[a].id < ds.sites[b].id;
  });
  return order;
}

StackedObservations stack_stage1(const Dataset& ds, std::span<const GevFitResult> fits) {
  if (fits.size() != ds.size())
    throw std::invalid_argument("stack_stage1: one fit per site required");
  const auto order = canonical_order(ds);
  std::vector<Site> sites;
  Eigen::MatrixXd triplets(static_cast<Eigen::Index>(ds.size()), 3);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto i = order[k];
    if (!fits[i].converged)
      throw FitError("Stage-1 fit did not converge at site '" + ds.sites[i].id + "'");
    sites.push_back(ds.sites[i]);
    const auto& p = fits[i].params;
    triplets.row(static_cast<Eigen::Index>(k)) << p.mu0, p.log_sigma, p.xi;
  }
  return stack_from_triplets(std::move(sites), triplets);
}

StackedObservations stack_from_triplets(std::vector<Site> sites,
                                        const Eigen::MatrixXd& triplets, int dim) {
  if (triplets.rows() != static_cast<Eigen::Index>(sites.size()) || triplets.cols() != 3)
    throw std::invalid_argument("stack_from_triplets: shape mismatch");
  std::vector<std::size_t> order(sites.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return sites[a].id < sites[b].id; });
  StackedObservations s;
  s.dim = dim;
  if (dim == 3) {
    const bool obs = !sites.empty() && sites.front().source == Source::Obs;
    s.obs_offset = obs ? 0 : -1;
    s.sim_offset = obs ? -1 : 0;
  }
  for (auto i : order) s.sites.push_back(sites[i]);
  const auto L = s.n_sites();
  s.values.resize(static_cast<Eigen::Index>(kParamsPerSite * L));
  for (std::size_t k = 0; k < L; ++k)
    for (int slot = 0; slot < kParamsPerSite; ++slot)
      s.values[s.row(k, slot)] = triplets(static_cast<Eigen::Index>(order[k]), slot);
  fill_indices(s);
  return s;
}

StackedObservations select_sites(const StackedObservations& stack,
                                 std::span<const std::size_t> keep,
                                 std::vector<Eigen::Index>* rows) {
  std::vector<std::size_t> sorted(keep.begin(), keep.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("select_sites: duplicate site index");
  StackedObservations s;
  s.dim = stack.dim;
  s.obs_offset = stack.obs_offset;
  s.sim_offset = stack.sim_offset;
  for (auto i : sorted) {
    if (i >= stack.n_sites()) throw std::out_of_range("select_sites: bad site index");
    s.sites.push_back(stack.sites[i]);
  }
  const auto L = s.n_sites();
  s.values.resize(static_cast<Eigen::Index>(kParamsPerSite * L));
  std::vector<Eigen::Index> map(kParamsPerSite * L);
  for (std::size_t k = 0; k < L; ++k)
    for (int slot = 0; slot < kParamsPerSite; ++slot) {
      const auto from = stack.row(sorted[k], slot);
      s.values[s.row(k, slot)] = stack.values[from];
      map[s.row(k, slot)] = from;
    }
  fill_indices(s);
  if (rows) *rows = std::move(map);
  return s;
}

StackedObservations single_source(const StackedObservations& stack, Source source,
                                   std::vector<Eigen::Index>* rows) {
  const auto keep = sites_of(stack, source);
  auto s = select_sites(stack, keep, rows);
  s.dim = kParamsPerSite;
  s.obs_offset = source == Source::Obs ? 0 : -1;
  s.sim_offset = source == Source::Sim ? 0 : -1;
  fill_indices(s);
  return s;
}

std::vector<std::size_t> sites_of(const StackedObservations& stack, Source source) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < stack.n_sites(); ++i)
    if (stack.sites[i].source == source) out.push_back(i);
  return out;
}

Eigen::MatrixXd row_distances(const StackedObservations& stack,
                              const Eigen::MatrixXd& site_dist) {
  const auto n = stack.size();
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index m = 0; m < n; ++m)
    for (Eigen::Index k = 0; k < n; ++k)
      d(m, k) = site_dist(stack.s_index[m], stack.s_index[k]);
  return d;
}

}  // namespace gevfuse
