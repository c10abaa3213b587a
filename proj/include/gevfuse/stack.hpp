#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gevfuse/data.hpp"
#include "gevfuse/marginal.hpp"

namespace gevfuse {

/// Number of Stage-1 parameters per site entering Stage 2: (mu, log sigma, xi).
inline constexpr int kParamsPerSite = 3;

/// The stacked Stage-1 estimates together with the selection pattern in
/// index form: row m observes latent component p_index[m] at site
/// s_index[m]. Rows are parameter-major: all locations (sites in order),
/// then all log-scales, then all shapes. Indices are 0-based.
struct StackedObservations {
  Eigen::VectorXd values;
  std::vector<int> p_index;
  std::vector<int> s_index;
  std::vector<Site> sites;
  /// Latent dimension: 6 for the two-source model, 3 for a single source.
  int dim = 6;
  /// Latent slot of each source's first parameter (-1 if absent).
  int obs_offset = 0;
  int sim_offset = 3;

  Eigen::Index size() const { return values.size(); }
  std::size_t n_sites() const { return sites.size(); }
  int offset_for(Source s) const { return s == Source::Obs ? obs_offset : sim_offset; }

  /// Row of parameter `slot` (0..2) at site `site`.
  Eigen::Index row(std::size_t site, int slot) const {
    return static_cast<Eigen::Index>(slot * n_sites() + site);
  }
  /// The three rows of one site, in parameter order.
  std::array<Eigen::Index, kParamsPerSite> site_rows(std::size_t site) const {
    return {row(site, 0), row(site, 1), row(site, 2)};
  }
  Eigen::Vector3d site_values(std::size_t site) const;
  std::size_t site_index(std::string_view id) const;

  /// Fingerprint of site ids, sources, coordinates and row pattern.
  std::uint64_t layout_hash() const;
};

/// Site indices of `ds` sorted by site id (the canonical stack order).
std::vector<std::size_t> canonical_order(const Dataset& ds);

/// Stacks converged Stage-1 fits (fits[i] belongs to ds.sites[i]) into the
/// two-source layout. The trend slope is not stacked.
StackedObservations stack_stage1(const Dataset& ds, std::span<const GevFitResult> fits);

/// Builds a stack directly from per-site triplets (triplets.row(i) for sites[i]),
/// sorting sites by id.
StackedObservations stack_from_triplets(std::vector<Site> sites,
                                        const Eigen::MatrixXd& triplets,
                                        int dim = 6);

/// Subset of sites (given by stack site index) keeping the latent layout.
/// `rows` receives the original row of every new row.
StackedObservations select_sites(const StackedObservations& stack,
                                 std::span<const std::size_t> keep,
                                 std::vector<Eigen::Index>* rows = nullptr);

/// Sites of one source in a three-dimensional single-source layout.
StackedObservations single_source(const StackedObservations& stack, Source source,
                                   std::vector<Eigen::Index>* rows = nullptr);

/// Site indices of the stack belonging to `source`.
std::vector<std::size_t> sites_of(const StackedObservations& stack, Source source);

/// Pairwise distances between the rows' sites (n_obs x n_obs, km).
Eigen::MatrixXd row_distances(const StackedObservations& stack,
                              const Eigen::MatrixXd& site_dist);

}  // namespace gevfuse
