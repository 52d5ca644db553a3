#pragma once

// Grid-binned region tokens and the kNN region graph.

#include "roam/types.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace roam::tokenizer {

// Patch-to-region binning, independent of the features being pooled.
// `members[m]` lists the patches of region m in a canonical order (sorted by
// coordinates, then by the tie-break feature row) so that pooled sums do not
// depend on the order patches arrive in.
struct RegionBinning {
  int grid_side = 0;
  std::vector<int> assignment;                     // patch -> region
  std::vector<std::vector<Eigen::Index>> members;  // region -> patches
  Vector masses;                                   // patch counts
  Matrix centroids;                                // mean of raw coordinates, M x 2

  Eigen::Index num_regions() const { return masses.size(); }
  Eigen::Index num_patches() const { return static_cast<Eigen::Index>(assignment.size()); }
};

struct RegionSet {
  Matrix features;  // M x d, mean projected feature per region
  Vector masses;    // M, patch counts
  Matrix centroids; // M x 2, raw coordinate units
  std::vector<int> assignment;
  int grid_side = 0;

  Eigen::Index size() const { return masses.size(); }
};

// Patch indices sorted by coordinates, then by `tie_break` rows. Patches equal
// in both are interchangeable, so any computation run in this order is
// independent of the input order.
std::vector<Eigen::Index> canonical_order(const Matrix& coords, const Matrix& tie_break = Matrix());

// Bins patches into a G x G grid over per-axis min-max normalised coordinates
// with G = ceil(sqrt(target_m)); empty cells are dropped and the survivors are
// numbered row-major. `tie_break` (N x k, may be empty) orders members that
// share coordinates.
RegionBinning bin_regions(const Matrix& coords, int target_m, const Matrix& tie_break = Matrix());

// Mean of `values` rows over each region, summed in canonical member order.
Matrix segment_mean(const Matrix& values, const RegionBinning& binning);

RegionSet tokenize_regions(const Matrix& projected, const Matrix& coords, int target_m);

struct RegionGraph {
  std::vector<std::vector<int>> neighbors;  // self excluded, nearest first
  std::vector<std::vector<double>> weights; // row-stochastic, empty until filled
  double tau = 0.0;

  Eigen::Index num_nodes() const { return static_cast<Eigen::Index>(neighbors.size()); }
  bool has_weights() const { return weights.size() == neighbors.size(); }
};

// Each node links to its min(k_nn, M-1) nearest other centroids by Euclidean
// distance; equal distances go to the lower index.
RegionGraph build_region_graph(const Matrix& centroids, int k_nn);

// Bandwidth selection for the heat kernel. With no fixed value, tau is the
// median squared edge length of the graph.
struct TauMode {
  std::optional<double> fixed;
};

// Fills w_mn proportional to exp(-|c_m - c_n|^2 / tau), normalised per node.
RegionGraph heat_kernel_weights(RegionGraph graph, const Matrix& centroids, TauMode mode = {});

// Median of squared neighbour distances, falling back to the mean of the
// positive ones when the median is zero and to 1 when every edge is degenerate.
double resolve_tau(const RegionGraph& graph, const Matrix& centroids);

// Undirected edge list (m < n) of the graph, each edge once.
std::vector<std::pair<int, int>> undirected_edges(const RegionGraph& graph);

void write_regions_csv(std::ostream& out, const RegionSet& regions);
void write_edges_csv(std::ostream& out, const RegionGraph& graph);

}  // namespace roam::tokenizer
