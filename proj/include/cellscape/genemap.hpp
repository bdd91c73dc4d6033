#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cellscape/error.hpp"
#include "cellscape/matrix.hpp"

namespace cellscape::genemap {

struct GridCell {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const GridCell&, const GridCell&) = default;
};

/// Injective placement of p genes on a q x q grid.
struct GeneLayout {
  std::size_t q = 0;
  std::vector<GridCell> pi;  // gene -> cell
  double objective_value = 0.0;
  double greedy_objective = 0.0;
  std::size_t swaps_evaluated = 0;
  std::vector<double> swap_trace;  // J after each accepted swap

  std::size_t n_genes() const noexcept { return pi.size(); }
  /// Gene index at each grid cell (row-major), -1 where unassigned.
  std::vector<long> inverse() const;
};

/// Smallest q with q*q >= p.
std::size_t grid_side(std::size_t p);

/// Builds a layout from explicit positions; checks bounds and injectivity.
GeneLayout make_layout(std::size_t q, std::vector<GridCell> positions);

/// J = sum_{u<v} max(C_uv, 0) * ||pi(u) - pi(v)||.
double layout_objective(const Matrix& C, const GeneLayout& layout);

/// Greedy seeding then first-improvement gene swaps. `swap_budget` < 0 means
/// the default of 20 p^2 evaluations.
GeneLayout layout_genes(const Matrix& C, std::uint64_t seed, long long swap_budget = -1);

/// q x q map with x placed by the layout and zeros elsewhere.
Matrix render_map(std::span<const double> x, const GeneLayout& layout);

/// Maps for every cell of X (p x n), stored NHWC as n x q x q x 1.
struct CellMaps {
  std::size_t n = 0;
  std::size_t q = 0;
  std::vector<double> data;
  std::span<const double> map(std::size_t i) const { return {data.data() + i * q * q, q * q}; }
};

CellMaps render_maps(const Matrix& X, const GeneLayout& layout);

/// ceil(ratio * n) distinct cells, sorted; identical for identical seeds.
std::vector<std::uint32_t> sample_mask(std::size_t n, double ratio, std::uint64_t seed);

struct CellMapBatch {
  CellMaps maps;
  std::vector<std::uint32_t> mask_set;
  Matrix masked_features;  // p x n
  CellMaps masked_maps;
};

CellMapBatch mask_cells(const Matrix& X, const CellMaps& maps, double ratio, std::uint64_t seed);

/// Zeroes the given cells (columns of X and their maps).
void apply_mask(const std::vector<std::uint32_t>& mask, Matrix& X, CellMaps& maps);

void write_layout_csv(const std::filesystem::path& path, const GeneLayout& layout,
                      const std::vector<std::string>& gene_names);
GeneLayout read_layout_csv(const std::filesystem::path& path, const std::vector<std::string>& gene_names);
void write_maps_csv(const std::filesystem::path& path, const CellMaps& maps, const std::vector<std::string>& cell_ids);

}  // namespace cellscape::genemap
