#include "cellscape/genemap.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "cellscape/io.hpp"
#include "cellscape/rng.hpp"

namespace cellscape::genemap {

namespace {

void check_weights_matrix(const Matrix& C) {
  if (C.rows != C.cols) throw DimensionMismatch("co-expression matrix must be square", C.rows, C.cols);
  if (C.rows == 0) throw InvalidArgument("layout needs at least one gene");
  for (std::size_t u = 0; u < C.rows; ++u)
    for (std::size_t v = u + 1; v < C.cols; ++v)
      if (C(u, v) != C(v, u))
        throw InvalidArgument("co-expression matrix is not symmetric at (" + std::to_string(u) + ", " +
                              std::to_string(v) + ")");
}

// Euclidean distance lookup by |dr|, |dc|.
struct DistanceTable {
  std::size_t q;
  std::vector<double> d;
  explicit DistanceTable(std::size_t side) : q(side), d(side * side) {
    for (std::size_t r = 0; r < q; ++r)
      for (std::size_t c = 0; c < q; ++c) d[r * q + c] = std::sqrt(static_cast<double>(r * r + c * c));
  }
  double operator()(std::size_t a, std::size_t b) const {
    const std::size_t ra = a / q, ca = a % q, rb = b / q, cb = b % q;
    const std::size_t dr = ra > rb ? ra - rb : rb - ra, dc = ca > cb ? ca - cb : cb - ca;
    return d[dr * q + dc];
  }
};

}  // namespace

std::vector<long> GeneLayout::inverse() const {
  std::vector<long> inv(q * q, -1);
  for (std::size_t g = 0; g < pi.size(); ++g) inv[pi[g].row * q + pi[g].col] = static_cast<long>(g);
  return inv;
}

std::size_t grid_side(std::size_t p) {
  std::size_t q = static_cast<std::size_t>(std::sqrt(static_cast<double>(p)));
  while (q * q < p) ++q;
  while (q > 0 && (q - 1) * (q - 1) >= p) --q;
  return q;
}

GeneLayout make_layout(std::size_t q, std::vector<GridCell> positions) {
  if (q * q < positions.size()) throw InvalidArgument("grid too small for the number of genes");
  std::vector<char> used(q * q, 0);
  for (std::size_t g = 0; g < positions.size(); ++g) {
    const auto& c = positions[g];
    if (c.row >= q || c.col >= q) throw InvalidArgument("gene " + std::to_string(g) + " placed outside the grid");
    if (used[c.row * q + c.col]++) throw InvalidArgument("two genes share grid cell (" + std::to_string(c.row) + ", " +
                                                         std::to_string(c.col) + ")");
  }
  GeneLayout out;
  out.q = q;
  out.pi = std::move(positions);
  return out;
}

double layout_objective(const Matrix& C, const GeneLayout& layout) {
  const std::size_t p = layout.pi.size();
  if (C.rows != p || C.cols != p) throw DimensionMismatch("co-expression size vs layout genes", p, C.rows);
  double j = 0.0;
  for (std::size_t u = 0; u < p; ++u)
    for (std::size_t v = u + 1; v < p; ++v) {
      const double w = std::max(C(u, v), 0.0);
      if (w == 0.0) continue;
      const double dr = static_cast<double>(layout.pi[u].row) - layout.pi[v].row;
      const double dc = static_cast<double>(layout.pi[u].col) - layout.pi[v].col;
      j += w * std::sqrt(dr * dr + dc * dc);
    }
  return j;
}

GeneLayout layout_genes(const Matrix& C, std::uint64_t seed, long long swap_budget) {
  check_weights_matrix(C);
  const std::size_t p = C.rows, q = grid_side(p), cells = q * q;
  const DistanceTable dist(q);
  auto w = [&](std::size_t u, std::size_t v) { return u == v ? 0.0 : std::max(C(u, v), 0.0); };

  // Greedy seeding.
  std::vector<std::size_t> pos(p, 0);
  std::vector<char> placed(p, 0), occupied(cells, 0);
  std::vector<double> attach(p, 0.0);
  const std::size_t center = (q / 2) * q + q / 2;
  std::size_t first = 0;
  {
    double best = -1.0;
    for (std::size_t u = 0; u < p; ++u) {
      double total = 0.0;
      for (std::size_t v = 0; v < p; ++v) total += w(u, v);
      if (total > best) {
        best = total;
        first = u;
      }
    }
  }
  auto place = [&](std::size_t u, std::size_t cell) {
    pos[u] = cell;
    placed[u] = 1;
    occupied[cell] = 1;
    for (std::size_t v = 0; v < p; ++v)
      if (!placed[v]) attach[v] += w(u, v);
  };
  place(first, center);

  std::vector<std::pair<std::size_t, double>> anchors;
  for (std::size_t step = 1; step < p; ++step) {
    std::size_t u = p;
    for (std::size_t v = 0; v < p; ++v)
      if (!placed[v] && (u == p || attach[v] > attach[u])) u = v;
    anchors.clear();
    for (std::size_t v = 0; v < p; ++v)
      if (placed[v] && w(u, v) > 0.0) anchors.emplace_back(pos[v], w(u, v));
    std::size_t best_cell = cells;
    double best_cost = 0.0, best_center = 0.0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      if (occupied[cell]) continue;
      double cost = 0.0;
      for (const auto& [at, wt] : anchors) cost += wt * dist(cell, at);
      const double dc = dist(cell, center);
      const bool better = best_cell == cells || cost < best_cost - 1e-12 ||
                          (cost <= best_cost + 1e-12 && dc < best_center);
      if (better) {
        best_cell = cell;
        best_cost = cost;
        best_center = dc;
      }
    }
    place(u, best_cell);
  }

  GeneLayout out;
  out.q = q;
  out.pi.resize(p);
  auto sync = [&] {
    for (std::size_t u = 0; u < p; ++u)
      out.pi[u] = {static_cast<std::uint32_t>(pos[u] / q), static_cast<std::uint32_t>(pos[u] % q)};
  };
  sync();
  out.greedy_objective = layout_objective(C, out);

  // Swap hill climbing.
  const long long budget = swap_budget < 0 ? 20LL * static_cast<long long>(p) * static_cast<long long>(p) : swap_budget;
  double current = out.greedy_objective;
  if (p >= 2) {
    Rng rng(seed);
    for (long long e = 0; e < budget; ++e) {
      const std::size_t u = rng.below(p);
      std::size_t v = rng.below(p - 1);
      if (v >= u) ++v;
      double delta = 0.0;
      for (std::size_t t = 0; t < p; ++t) {
        if (t == u || t == v) continue;
        const double dw = w(u, t) - w(v, t);
        if (dw == 0.0) continue;
        delta += dw * (dist(pos[v], pos[t]) - dist(pos[u], pos[t]));
      }
      if (delta < -1e-12) {
        std::swap(pos[u], pos[v]);
        current += delta;
        out.swap_trace.push_back(current);
      }
    }
    out.swaps_evaluated = static_cast<std::size_t>(budget);
  }
  sync();
  out.objective_value = layout_objective(C, out);
  return out;
}

Matrix render_map(std::span<const double> x, const GeneLayout& layout) {
  if (x.size() != layout.pi.size()) throw DimensionMismatch("feature length vs layout genes", layout.pi.size(), x.size());
  Matrix m(layout.q, layout.q);
  for (std::size_t g = 0; g < x.size(); ++g) m(layout.pi[g].row, layout.pi[g].col) = x[g];
  return m;
}

CellMaps render_maps(const Matrix& X, const GeneLayout& layout) {
  const std::size_t p = X.rows, n = X.cols, q = layout.q;
  if (p != layout.pi.size()) throw DimensionMismatch("expression genes vs layout genes", layout.pi.size(), p);
  CellMaps maps{n, q, std::vector<double>(n * q * q, 0.0)};
  for (std::size_t g = 0; g < p; ++g) {
    const std::size_t off = layout.pi[g].row * q + layout.pi[g].col;
    const auto row = X.row(g);
    for (std::size_t i = 0; i < n; ++i) maps.data[i * q * q + off] = row[i];
  }
  return maps;
}

std::vector<std::uint32_t> sample_mask(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("mask ratio must lie in (0, 1)");
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  if (count >= n)
    throw InvalidArgument("mask ratio " + io::format_double(ratio) + " would mask all " + std::to_string(n) + " cells");
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots are the sample.
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void apply_mask(const std::vector<std::uint32_t>& mask, Matrix& X, CellMaps& maps) {
  const std::size_t qq = maps.q * maps.q;
  for (std::uint32_t i : mask) {
    if (i >= X.cols || i >= maps.n) throw InvalidArgument("masked cell index out of range");
    for (std::size_t g = 0; g < X.rows; ++g) X(g, i) = 0.0;
    std::fill(maps.data.begin() + static_cast<long>(i * qq), maps.data.begin() + static_cast<long>((i + 1) * qq), 0.0);
  }
}

CellMapBatch mask_cells(const Matrix& X, const CellMaps& maps, double ratio, std::uint64_t seed) {
  if (maps.n != X.cols) throw DimensionMismatch("maps vs cells", X.cols, maps.n);
  CellMapBatch batch{maps, sample_mask(X.cols, ratio, seed), X, maps};
  apply_mask(batch.mask_set, batch.masked_features, batch.masked_maps);
  return batch;
}

void write_layout_csv(const std::filesystem::path& path, const GeneLayout& layout,
                      const std::vector<std::string>& gene_names) {
  if (gene_names.size() != layout.pi.size())
    throw DimensionMismatch("gene names vs layout genes", layout.pi.size(), gene_names.size());
  std::ostringstream out;
  out << "gene_id,row,col\n";
  for (std::size_t g = 0; g < layout.pi.size(); ++g)
    out << gene_names[g] << ',' << layout.pi[g].row << ',' << layout.pi[g].col << '\n';
  io::write_text(path, out.str());
}

GeneLayout read_layout_csv(const std::filesystem::path& path, const std::vector<std::string>& gene_names) {
  const auto lines = io::read_lines(path);
  std::unordered_map<std::string, GridCell> by_gene;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    if (lines[r].empty() || (r == 0 && lines[r].rfind("gene_id", 0) == 0)) continue;
    const auto f = io::split_csv(lines[r]);
    if (f.size() != 3) throw ParseError("layout rows need 'gene_id,row,col'", r + 1, f.size());
    GridCell c{static_cast<std::uint32_t>(io::parse_int(f[1], r + 1, 2)),
               static_cast<std::uint32_t>(io::parse_int(f[2], r + 1, 3))};
    if (!by_gene.emplace(f[0], c).second) throw DuplicateIdentifier("duplicate gene in layout", f[0]);
  }
  std::vector<GridCell> pos;
  for (const auto& g : gene_names) {
    const auto it = by_gene.find(g);
    if (it == by_gene.end()) throw InvalidArgument("gene '" + g + "' missing from layout " + path.string());
    pos.push_back(it->second);
  }
  return make_layout(grid_side(gene_names.size()), std::move(pos));
}

void write_maps_csv(const std::filesystem::path& path, const CellMaps& maps, const std::vector<std::string>& cell_ids) {
  if (cell_ids.size() != maps.n) throw DimensionMismatch("cell ids vs maps", maps.n, cell_ids.size());
  std::ostringstream out;
  out << "cell_id";
  for (std::size_t r = 0; r < maps.q; ++r)
    for (std::size_t c = 0; c < maps.q; ++c) out << ",m_" << r << '_' << c;
  out << '\n';
  for (std::size_t i = 0; i < maps.n; ++i) {
    out << cell_ids[i];
    for (double v : maps.map(i)) out << ',' << io::format_double(v);
    out << '\n';
  }
  io::write_text(path, out.str());
}

}  // namespace cellscape::genemap
