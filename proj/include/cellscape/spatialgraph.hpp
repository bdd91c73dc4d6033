#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cellscape/error.hpp"
#include "cellscape/matrix.hpp"

namespace cellscape::spatialgraph {

struct Edge {
  std::uint32_t i;  // i < j
  std::uint32_t j;
  double weight;    // Euclidean distance between the endpoints
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Weighted undirected cell graph. Immutable once built; edges are stored once
/// with i < j, sorted, and mirrored into per-node sorted adjacency lists.
class SpatialGraph {
 public:
  SpatialGraph() = default;
  /// Canonicalizes (orders endpoints, sorts, rejects self-loops and duplicates).
  SpatialGraph(std::size_t n_nodes, std::vector<Edge> edges);

  std::size_t n_nodes() const noexcept { return n_nodes_; }
  std::size_t n_edges() const noexcept { return edges_.size(); }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::vector<std::uint32_t>& neighbors(std::size_t i) const { return adjacency_.at(i); }
  std::size_t degree(std::size_t i) const { return adjacency_.at(i).size(); }
  bool has_edge(std::size_t i, std::size_t j) const;
  /// Weight of edge (i, j) or (j, i); throws when absent.
  double weight(std::size_t i, std::size_t j) const;

  friend bool operator==(const SpatialGraph& a, const SpatialGraph& b) {
    return a.n_nodes_ == b.n_nodes_ && a.edges_ == b.edges_;
  }

 private:
  std::size_t n_nodes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::uint32_t>> adjacency_;
};

/// Delaunay triangles as vertex index triples (counter-clockwise).
struct Triangulation {
  std::vector<std::array<std::uint32_t, 3>> triangles;
};

/// Directed kNN in any dimension (points given row-wise, n x dim), symmetrized
/// by edge union. Duplicate points are tie-broken by index with a warning.
SpatialGraph build_knn_graph_points(const Matrix& points, std::size_t k, WarningLog* warnings = nullptr);

/// kNN over tissue coordinates (2 x n).
SpatialGraph build_knn_graph(const Matrix& coords, std::size_t k, WarningLog* warnings = nullptr);

/// Exact Delaunay triangulation edges (Bowyer-Watson). All-collinear input
/// falls back to a coordinate-sorted path with a warning.
SpatialGraph build_delaunay_graph(const Matrix& coords, WarningLog* warnings = nullptr,
                                  Triangulation* triangulation = nullptr);

/// Removes edges longer than the given percentile of edge lengths, never
/// removing an edge whose removal would isolate an endpoint.
SpatialGraph prune_long_edges(const SpatialGraph& g, double percentile);

enum class GraphMethod { knn, delaunay, automatic };
GraphMethod parse_graph_method(const std::string& name);
std::string to_string(GraphMethod m);

/// Coefficient of variation of nearest-neighbor distances.
double nearest_neighbor_cv(const Matrix& coords);

/// `automatic` picks kNN when nearest-neighbor CV < 0.05, Delaunay otherwise.
GraphMethod resolve_method(GraphMethod method, const Matrix& coords);

struct GraphOptions {
  GraphMethod method = GraphMethod::automatic;
  std::size_t k = 6;
  double prune_percentile = 99.0;  // Delaunay only; >= 100 disables pruning
};

SpatialGraph build_graph(const Matrix& coords, const GraphOptions& options, WarningLog* warnings = nullptr);

/// Disjoint union with cumulative index offsets.
SpatialGraph block_diagonal_merge(const std::vector<SpatialGraph>& graphs);

/// Sorted neighbors of node i.
std::vector<std::uint32_t> neighbor_set(const SpatialGraph& g, std::size_t i);

/// `%n <count>` header followed by `i j weight` lines.
void write_edge_list(const std::filesystem::path& path, const SpatialGraph& g);
SpatialGraph read_edge_list(const std::filesystem::path& path);

}  // namespace cellscape::spatialgraph
