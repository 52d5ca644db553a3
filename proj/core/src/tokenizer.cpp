#include "roam/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

namespace roam::tokenizer {
namespace {

Vector normalise_axis(const Matrix& coords, Eigen::Index axis) {
  const auto column = coords.col(axis);
  const double lo = column.minCoeff();
  const double hi = column.maxCoeff();
  Vector out(coords.rows());
  if (!(hi > lo)) {
    out.setConstant(0.5);
    return out;
  }
  const double span = hi - lo;
  for (Eigen::Index i = 0; i < coords.rows(); ++i) out(i) = (column(i) - lo) / span;
  return out;
}

int cell_index(double u, int side) {
  const int cell = static_cast<int>(std::floor(u * side));
  return std::clamp(cell, 0, side - 1);
}

// Lexicographic order over coordinates then tie-break features.
struct CanonicalLess {
  const Matrix& coords;
  const Matrix& tie_break;

  bool operator()(Eigen::Index a, Eigen::Index b) const {
    for (Eigen::Index j = 0; j < 2; ++j) {
      if (coords(a, j) != coords(b, j)) return coords(a, j) < coords(b, j);
    }
    for (Eigen::Index j = 0; j < tie_break.cols(); ++j) {
      if (tie_break(a, j) != tie_break(b, j)) return tie_break(a, j) < tie_break(b, j);
    }
    return false;
  }
};

}  // namespace

std::vector<Eigen::Index> canonical_order(const Matrix& coords, const Matrix& tie_break) {
  if (tie_break.size() != 0 && tie_break.rows() != coords.rows()) {
    throw InvalidArgument("tie-break rows must match coords");
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(coords.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), CanonicalLess{coords, tie_break});
  return order;
}

RegionBinning bin_regions(const Matrix& coords, int target_m, const Matrix& tie_break) {
  if (coords.rows() < 1 || coords.cols() != 2) throw InvalidArgument("coords must be N x 2, N >= 1");
  if (target_m < 1) throw InvalidArgument("target_m must be >= 1");
  if (tie_break.size() != 0 && tie_break.rows() != coords.rows()) {
    throw InvalidArgument("tie-break rows must match coords");
  }
  const auto n = coords.rows();
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(target_m))));
  const Vector u = normalise_axis(coords, 0);
  const Vector v = normalise_axis(coords, 1);

  // Row-major cell id: row index from the y axis, column from x.
  std::vector<long> cell(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    cell[static_cast<std::size_t>(i)] =
        static_cast<long>(cell_index(v(i), side)) * side + cell_index(u(i), side);
  }
  std::vector<long> occupied(cell);
  std::sort(occupied.begin(), occupied.end());
  occupied.erase(std::unique(occupied.begin(), occupied.end()), occupied.end());

  RegionBinning out;
  out.grid_side = side;
  const auto m = static_cast<Eigen::Index>(occupied.size());
  out.members.resize(occupied.size());
  out.assignment.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto it = std::lower_bound(occupied.begin(), occupied.end(), cell[static_cast<std::size_t>(i)]);
    const int region = static_cast<int>(it - occupied.begin());
    out.assignment[static_cast<std::size_t>(i)] = region;
    out.members[static_cast<std::size_t>(region)].push_back(i);
  }
  const CanonicalLess less{coords, tie_break};
  for (auto& group : out.members) std::stable_sort(group.begin(), group.end(), less);

  out.masses.resize(m);
  out.centroids.resize(m, 2);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& group = out.members[static_cast<std::size_t>(r)];
    double sx = 0.0;
    double sy = 0.0;
    for (auto i : group) {
      sx += coords(i, 0);
      sy += coords(i, 1);
    }
    const auto count = static_cast<double>(group.size());
    out.masses(r) = count;
    out.centroids(r, 0) = sx / count;
    out.centroids(r, 1) = sy / count;
  }
  return out;
}

Matrix segment_mean(const Matrix& values, const RegionBinning& binning) {
  if (values.rows() != binning.num_patches()) {
    throw InvalidArgument("segment_mean: value rows do not match the binning");
  }
  Matrix out = Matrix::Zero(binning.num_regions(), values.cols());
  for (Eigen::Index r = 0; r < binning.num_regions(); ++r) {
    const auto& group = binning.members[static_cast<std::size_t>(r)];
    for (auto i : group) out.row(r) += values.row(i);
    out.row(r) /= static_cast<double>(group.size());
  }
  return out;
}

RegionSet tokenize_regions(const Matrix& projected, const Matrix& coords, int target_m) {
  if (projected.rows() != coords.rows()) {
    throw InvalidArgument("projected features and coords disagree on N");
  }
  RegionBinning binning = bin_regions(coords, target_m, projected);
  RegionSet out;
  out.features = segment_mean(projected, binning);
  out.masses = std::move(binning.masses);
  out.centroids = std::move(binning.centroids);
  out.assignment = std::move(binning.assignment);
  out.grid_side = binning.grid_side;
  return out;
}

RegionGraph build_region_graph(const Matrix& centroids, int k_nn) {
  const auto m = centroids.rows();
  if (m < 1) throw InvalidArgument("region graph needs at least one node");
  if (k_nn < 0) throw InvalidArgument("k_nn must be non-negative");
  const auto k = static_cast<std::size_t>(std::min<Eigen::Index>(k_nn, m - 1));
  RegionGraph graph;
  graph.neighbors.resize(static_cast<std::size_t>(m));
  std::vector<std::pair<double, int>> candidates;
  for (Eigen::Index a = 0; a < m; ++a) {
    candidates.clear();
    for (Eigen::Index b = 0; b < m; ++b) {
      if (a == b) continue;
      candidates.emplace_back((centroids.row(a) - centroids.row(b)).squaredNorm(), static_cast<int>(b));
    }
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                      candidates.end());
    auto& list = graph.neighbors[static_cast<std::size_t>(a)];
    for (std::size_t j = 0; j < k; ++j) list.push_back(candidates[j].second);
  }
  return graph;
}

double resolve_tau(const RegionGraph& graph, const Matrix& centroids) {
  std::vector<double> sq;
  for (std::size_t a = 0; a < graph.neighbors.size(); ++a) {
    for (int b : graph.neighbors[a]) {
      sq.push_back((centroids.row(static_cast<Eigen::Index>(a)) - centroids.row(b)).squaredNorm());
    }
  }
  if (sq.empty()) return 1.0;
  std::sort(sq.begin(), sq.end());
  const std::size_t mid = sq.size() / 2;
  const double median = sq.size() % 2 == 1 ? sq[mid] : 0.5 * (sq[mid - 1] + sq[mid]);
  if (median > 0.0) return median;
  double sum = 0.0;
  std::size_t count = 0;
  for (double s : sq) {
    if (s > 0.0) {
      sum += s;
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 1.0;
}

RegionGraph heat_kernel_weights(RegionGraph graph, const Matrix& centroids, TauMode mode) {
  if (centroids.rows() != graph.num_nodes()) {
    throw InvalidArgument("heat kernel: centroid count does not match graph nodes");
  }
  double tau = mode.fixed ? *mode.fixed : resolve_tau(graph, centroids);
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive and finite");
  graph.tau = tau;
  graph.weights.assign(graph.neighbors.size(), {});
  for (std::size_t a = 0; a < graph.neighbors.size(); ++a) {
    const auto& list = graph.neighbors[a];
    if (list.empty()) continue;
    std::vector<double> sq(list.size());
    for (std::size_t j = 0; j < list.size(); ++j) {
      sq[j] = (centroids.row(static_cast<Eigen::Index>(a)) - centroids.row(list[j])).squaredNorm();
    }
    // Shifting by the smallest distance leaves the normalised weights intact
    // and keeps at least one term at exp(0).
    const double shift = *std::min_element(sq.begin(), sq.end());
    auto& w = graph.weights[a];
    w.resize(list.size());
    double total = 0.0;
    for (std::size_t j = 0; j < list.size(); ++j) {
      w[j] = std::exp(-(sq[j] - shift) / tau);
      total += w[j];
    }
    for (double& x : w) x /= total;
  }
  return graph;
}

std::vector<std::pair<int, int>> undirected_edges(const RegionGraph& graph) {
  std::set<std::pair<int, int>> edges;
  for (std::size_t a = 0; a < graph.neighbors.size(); ++a) {
    const int ia = static_cast<int>(a);
    for (int b : graph.neighbors[a]) edges.emplace(std::min(ia, b), std::max(ia, b));
  }
  return {edges.begin(), edges.end()};
}

void write_regions_csv(std::ostream& out, const RegionSet& regions) {
  out << "region_id,x,y,mass\n";
  out.precision(17);
  for (Eigen::Index r = 0; r < regions.size(); ++r) {
    out << r << ',' << regions.centroids(r, 0) << ',' << regions.centroids(r, 1) << ','
        << regions.masses(r) << '\n';
  }
}

void write_edges_csv(std::ostream& out, const RegionGraph& graph) {
  out << "src,dst,weight\n";
  out.precision(17);
  for (std::size_t a = 0; a < graph.neighbors.size(); ++a) {
    for (std::size_t j = 0; j < graph.neighbors[a].size(); ++j) {
      out << a << ',' << graph.neighbors[a][j] << ','
          << (graph.has_weights() ? graph.weights[a][j] : 0.0) << '\n';
    }
  }
}

}  // namespace roam::tokenizer
