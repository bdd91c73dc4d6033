#include "cellscape/spatialgraph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cellscape/io.hpp"
#include "cellscape/kernels.hpp"

namespace cellscape::spatialgraph {

namespace {

double distance(const Matrix& coords, std::size_t i, std::size_t j) {
  if (i > j) std::swap(i, j);
  const double dx = coords(0, i) - coords(0, j);
  const double dy = coords(1, i) - coords(1, j);
  return std::sqrt(dx * dx + dy * dy);
}

void check_coords(const Matrix& coords) {
  if (coords.rows != 2) throw DimensionMismatch("coordinate rows", 2, coords.rows);
  for (double v : coords.data)
    if (!std::isfinite(v)) throw NumericalError("non-finite coordinate");
}

}  // namespace

SpatialGraph::SpatialGraph(std::size_t n_nodes, std::vector<Edge> edges) : n_nodes_(n_nodes), adjacency_(n_nodes) {
  for (auto& e : edges) {
    if (e.i == e.j) throw InvalidArgument("self-loop on node " + std::to_string(e.i));
    if (e.i > e.j) std::swap(e.i, e.j);
    if (e.j >= n_nodes) throw InvalidArgument("edge endpoint " + std::to_string(e.j) + " out of range");
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; });
  for (std::size_t t = 1; t < edges.size(); ++t)
    if (edges[t].i == edges[t - 1].i && edges[t].j == edges[t - 1].j)
      throw InvalidArgument("duplicate edge (" + std::to_string(edges[t].i) + ", " + std::to_string(edges[t].j) + ")");
  edges_ = std::move(edges);
  for (const auto& e : edges_) {
    adjacency_[e.i].push_back(e.j);
    adjacency_[e.j].push_back(e.i);
  }
  for (auto& a : adjacency_) std::sort(a.begin(), a.end());
}

bool SpatialGraph::has_edge(std::size_t i, std::size_t j) const {
  if (i >= n_nodes_ || j >= n_nodes_) return false;
  const auto& a = adjacency_[i];
  return std::binary_search(a.begin(), a.end(), static_cast<std::uint32_t>(j));
}

double SpatialGraph::weight(std::size_t i, std::size_t j) const {
  if (i > j) std::swap(i, j);
  const auto it = std::lower_bound(edges_.begin(), edges_.end(), std::pair{i, j}, [](const Edge& e, const auto& key) {
    return e.i != key.first ? e.i < key.first : e.j < key.second;
  });
  if (it == edges_.end() || it->i != i || it->j != j)
    throw InvalidArgument("no edge between " + std::to_string(i) + " and " + std::to_string(j));
  return it->weight;
}

SpatialGraph build_knn_graph_points(const Matrix& points, std::size_t k, WarningLog* warnings) {
  const std::size_t n = points.rows, dim = points.cols;
  if (k == 0) throw InvalidArgument("k must be positive");
  if (k >= n) throw InvalidArgument("k = " + std::to_string(k) + " requires more than k points, got " + std::to_string(n));
  const auto knn = kernels::knn_search(points.data.data(), n, dim, k);
  bool duplicates = false;
  std::vector<Edge> edges;
  edges.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      const std::uint32_t j = knn.index[i * k + t];
      if (knn.distance[i * k + t] == 0.0) duplicates = true;
      edges.push_back({static_cast<std::uint32_t>(std::min<std::size_t>(i, j)),
                       static_cast<std::uint32_t>(std::max<std::size_t>(i, j)), 0.0});
    }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.i != b.i ? a.i < b.i : a.j < b.j; });
  edges.erase(std::unique(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.i == b.i && a.j == b.j; }),
              edges.end());
  for (auto& e : edges) {
    double d2 = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double diff = points(e.i, t) - points(e.j, t);
      d2 += diff * diff;
    }
    e.weight = std::sqrt(d2);
  }
  if (duplicates) warn(warnings, "knn: duplicate coordinates; ties broken by cell index");
  return SpatialGraph(n, std::move(edges));
}

SpatialGraph build_knn_graph(const Matrix& coords, std::size_t k, WarningLog* warnings) {
  check_coords(coords);
  SpatialGraph g = build_knn_graph_points(coords.transposed(), k, warnings);
  std::vector<Edge> edges = g.edges();
  for (auto& e : edges) e.weight = distance(coords, e.i, e.j);
  return SpatialGraph(coords.cols, std::move(edges));
}

namespace {

// Bowyer-Watson incremental triangulation with neighbor links.
class Delaunay {
 public:
  explicit Delaunay(const Matrix& coords) : n_(coords.cols) {
    px_.resize(n_ + 3);
    py_.resize(n_ + 3);
    double minx = coords(0, 0), maxx = minx, miny = coords(1, 0), maxy = miny;
    for (std::size_t i = 0; i < n_; ++i) {
      px_[i] = coords(0, i);
      py_[i] = coords(1, i);
      minx = std::min(minx, px_[i]);
      maxx = std::max(maxx, px_[i]);
      miny = std::min(miny, py_[i]);
      maxy = std::max(maxy, py_[i]);
    }
    const double cx = 0.5 * (minx + maxx), cy = 0.5 * (miny + maxy);
    const double span = std::max({maxx - minx, maxy - miny, 1e-12});
    const double r = 1e4 * span;
    px_[n_] = cx - 2.0 * r;
    py_[n_] = cy - r;
    px_[n_ + 1] = cx + 2.0 * r;
    py_[n_ + 1] = cy - r;
    px_[n_ + 2] = cx;
    py_[n_ + 2] = cy + 2.0 * r;
    tris_.push_back({{static_cast<std::uint32_t>(n_), static_cast<std::uint32_t>(n_ + 1),
                      static_cast<std::uint32_t>(n_ + 2)},
                     {-1, -1, -1},
                     true});
    // Serpentine strips keep consecutive insertions close, so walks stay short.
    const std::size_t strips = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(n_) / 2.0)));
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), 0);
    auto strip = [&](std::size_t i) {
      return std::min(strips - 1, static_cast<std::size_t>((px_[i] - minx) / (span + 1e-300) * static_cast<double>(strips)));
    };
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const std::size_t sa = strip(a), sb = strip(b);
      if (sa != sb) return sa < sb;
      const bool up = sa % 2 == 0;
      if (py_[a] != py_[b]) return up ? py_[a] < py_[b] : py_[a] > py_[b];
      return a < b;
    });
    start_at_.assign(n_ + 3, -1);
    end_at_.assign(n_ + 3, -1);
    for (std::size_t i : order) insert(static_cast<std::uint32_t>(i));
  }

  std::vector<std::array<std::uint32_t, 3>> triangles() const {
    std::vector<std::array<std::uint32_t, 3>> out;
    for (const auto& t : tris_) {
      if (!t.alive) continue;
      if (t.v[0] >= n_ || t.v[1] >= n_ || t.v[2] >= n_) continue;
      out.push_back(t.v);
    }
    return out;
  }

 private:
  struct Tri {
    std::array<std::uint32_t, 3> v;
    std::array<long, 3> nb;  // neighbor opposite v[k]
    bool alive;
  };

  long double orient(std::uint32_t a, std::uint32_t b, std::uint32_t c) const {
    return (static_cast<long double>(px_[b]) - px_[a]) * (static_cast<long double>(py_[c]) - py_[a]) -
           (static_cast<long double>(py_[b]) - py_[a]) * (static_cast<long double>(px_[c]) - px_[a]);
  }

  // > 0 when d lies strictly inside the circumcircle of CCW triangle t.
  long double incircle(const Tri& t, std::uint32_t d) const {
    const long double dx = px_[d], dy = py_[d];
    const long double ax = px_[t.v[0]] - dx, ay = py_[t.v[0]] - dy;
    const long double bx = px_[t.v[1]] - dx, by = py_[t.v[1]] - dy;
    const long double cx = px_[t.v[2]] - dx, cy = py_[t.v[2]] - dy;
    const long double a2 = ax * ax + ay * ay, b2 = bx * bx + by * by, c2 = cx * cx + cy * cy;
    return ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx);
  }

  bool contains(const Tri& t, std::uint32_t p) const {
    for (int k = 0; k < 3; ++k)
      if (orient(t.v[(k + 1) % 3], t.v[(k + 2) % 3], p) < 0) return false;
    return true;
  }

  long locate(std::uint32_t p) const {
    long cur = last_;
    for (std::size_t steps = 0; steps < 4 * tris_.size() + 16; ++steps) {
      const Tri& t = tris_[static_cast<std::size_t>(cur)];
      int exit = -1;
      for (int k = 0; k < 3; ++k)
        if (orient(t.v[(k + 1) % 3], t.v[(k + 2) % 3], p) < 0) {
          exit = k;
          break;
        }
      if (exit < 0) return cur;
      if (t.nb[exit] < 0) break;
      cur = t.nb[exit];
    }
    for (std::size_t i = 0; i < tris_.size(); ++i)
      if (tris_[i].alive && contains(tris_[i], p)) return static_cast<long>(i);
    throw NumericalError("delaunay: failed to locate point " + std::to_string(p));
  }

  void insert(std::uint32_t p) {
    const long start = locate(p);
    std::vector<long> cavity{start}, stack{start};
    std::vector<char> in_cavity(tris_.size(), 0);
    in_cavity[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const long t = stack.back();
      stack.pop_back();
      for (long nb : tris_[static_cast<std::size_t>(t)].nb) {
        if (nb < 0 || in_cavity[static_cast<std::size_t>(nb)]) continue;
        if (incircle(tris_[static_cast<std::size_t>(nb)], p) > 0) {
          in_cavity[static_cast<std::size_t>(nb)] = 1;
          cavity.push_back(nb);
          stack.push_back(nb);
        }
      }
    }
    struct Boundary {
      std::uint32_t a, b;
      long outer;
    };
    std::vector<Boundary> boundary;
    for (long t : cavity) {
      const Tri& tri = tris_[static_cast<std::size_t>(t)];
      for (int k = 0; k < 3; ++k) {
        const long nb = tri.nb[k];
        if (nb >= 0 && in_cavity[static_cast<std::size_t>(nb)]) continue;
        boundary.push_back({tri.v[(k + 1) % 3], tri.v[(k + 2) % 3], nb});
      }
    }
    for (long t : cavity) tris_[static_cast<std::size_t>(t)].alive = false;

    std::vector<long> created;
    created.reserve(boundary.size());
    for (const auto& e : boundary) {
      long id;
      Tri tri{{e.a, e.b, p}, {-1, -1, e.outer}, true};
      if (!free_.empty()) {
        id = free_.back();
        free_.pop_back();
        tris_[static_cast<std::size_t>(id)] = tri;
      } else {
        id = static_cast<long>(tris_.size());
        tris_.push_back(tri);
      }
      created.push_back(id);
      if (e.outer >= 0) {
        Tri& o = tris_[static_cast<std::size_t>(e.outer)];
        for (int k = 0; k < 3; ++k) {
          const std::uint32_t oa = o.v[(k + 1) % 3], ob = o.v[(k + 2) % 3];
          if (oa == e.b && ob == e.a) o.nb[k] = id;
        }
      }
      start_at_[e.a] = id;
      end_at_[e.b] = id;
    }
    for (std::size_t c = 0; c < created.size(); ++c) {
      Tri& tri = tris_[static_cast<std::size_t>(created[c])];
      tri.nb[0] = start_at_[tri.v[1]];  // edge (b, p)
      tri.nb[1] = end_at_[tri.v[0]];    // edge (p, a)
    }
    for (const auto& e : boundary) {
      start_at_[e.a] = -1;
      end_at_[e.b] = -1;
    }
    for (long t : cavity)
      if (std::find(created.begin(), created.end(), t) == created.end()) free_.push_back(t);
    last_ = created.front();
  }

  std::size_t n_;
  std::vector<double> px_, py_;
  std::vector<Tri> tris_;
  std::vector<long> free_;
  std::vector<long> start_at_, end_at_;
  long last_ = 0;
};

}  // namespace

SpatialGraph build_delaunay_graph(const Matrix& coords, WarningLog* warnings, Triangulation* triangulation) {
  check_coords(coords);
  const std::size_t n = coords.cols;
  if (n < 3) throw InvalidArgument("Delaunay triangulation needs at least 3 points, got " + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return coords(0, a) != coords(0, b) ? coords(0, a) < coords(0, b) : coords(1, a) < coords(1, b);
  });
  for (std::size_t t = 1; t < n; ++t)
    if (coords(0, order[t]) == coords(0, order[t - 1]) && coords(1, order[t]) == coords(1, order[t - 1]))
      throw InvalidArgument("duplicate coordinates for cells " + std::to_string(order[t - 1]) + " and " +
                            std::to_string(order[t]));

  // Collinearity relative to the two extreme points.
  const std::size_t a = order.front(), b = order.back();
  const double ux = coords(0, b) - coords(0, a), uy = coords(1, b) - coords(1, a);
  const double len = std::hypot(ux, uy);
  bool collinear = true;
  for (std::size_t i = 0; i < n && collinear; ++i) {
    const double cross = ux * (coords(1, i) - coords(1, a)) - uy * (coords(0, i) - coords(0, a));
    if (std::abs(cross) > 1e-12 * len * len) collinear = false;
  }
  if (collinear) {
    warn(warnings, "delaunay: all points collinear; using a path graph along the line");
    std::vector<Edge> edges;
    for (std::size_t t = 1; t < n; ++t) {
      const auto i = static_cast<std::uint32_t>(order[t - 1]), j = static_cast<std::uint32_t>(order[t]);
      edges.push_back({std::min(i, j), std::max(i, j), distance(coords, i, j)});
    }
    if (triangulation) triangulation->triangles.clear();
    return SpatialGraph(n, std::move(edges));
  }

  Delaunay dt(coords);
  auto tris = dt.triangles();
  std::vector<Edge> edges;
  edges.reserve(tris.size() * 3);
  for (const auto& t : tris)
    for (int k = 0; k < 3; ++k) {
      const std::uint32_t i = t[k], j = t[(k + 1) % 3];
      edges.push_back({std::min(i, j), std::max(i, j), 0.0});
    }
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.i != y.i ? x.i < y.i : x.j < y.j; });
  edges.erase(std::unique(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.i == y.i && x.j == y.j; }),
              edges.end());
  for (auto& e : edges) e.weight = distance(coords, e.i, e.j);
  if (triangulation) triangulation->triangles = std::move(tris);
  return SpatialGraph(n, std::move(edges));
}

SpatialGraph prune_long_edges(const SpatialGraph& g, double percentile) {
  if (percentile >= 100.0 || g.n_edges() == 0) return g;
  if (percentile <= 0.0) throw InvalidArgument("prune percentile must be in (0, 100]");
  std::vector<double> lengths;
  lengths.reserve(g.n_edges());
  for (const auto& e : g.edges()) lengths.push_back(e.weight);
  std::sort(lengths.begin(), lengths.end());
  const double pos = percentile / 100.0 * static_cast<double>(lengths.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, lengths.size() - 1);
  const double cutoff = lengths[lo] + (pos - static_cast<double>(lo)) * (lengths[hi] - lengths[lo]);

  std::vector<std::size_t> degree(g.n_nodes());
  for (std::size_t i = 0; i < g.n_nodes(); ++i) degree[i] = g.degree(i);
  std::vector<std::size_t> order(g.n_edges());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return g.edges()[x].weight > g.edges()[y].weight; });
  std::vector<char> keep(g.n_edges(), 1);
  for (std::size_t idx : order) {
    const auto& e = g.edges()[idx];
    if (e.weight <= cutoff) break;
    if (degree[e.i] <= 1 || degree[e.j] <= 1) continue;
    keep[idx] = 0;
    --degree[e.i];
    --degree[e.j];
  }
  std::vector<Edge> edges;
  for (std::size_t t = 0; t < g.n_edges(); ++t)
    if (keep[t]) edges.push_back(g.edges()[t]);
  return SpatialGraph(g.n_nodes(), std::move(edges));
}

GraphMethod parse_graph_method(const std::string& name) {
  if (name == "knn") return GraphMethod::knn;
  if (name == "delaunay") return GraphMethod::delaunay;
  if (name == "auto") return GraphMethod::automatic;
  throw InvalidArgument("unknown graph method '" + name + "' (expected knn, delaunay, or auto)");
}

std::string to_string(GraphMethod m) {
  switch (m) {
    case GraphMethod::knn:
      return "knn";
    case GraphMethod::delaunay:
      return "delaunay";
    case GraphMethod::automatic:
      return "auto";
  }
  return "auto";
}

double nearest_neighbor_cv(const Matrix& coords) {
  check_coords(coords);
  if (coords.cols < 2) return 0.0;
  const Matrix pts = coords.transposed();
  const auto nn = kernels::knn_search(pts.data.data(), pts.rows, 2, 1);
  double s = 0.0;
  for (double d : nn.distance) s += d;
  const double mean = s / static_cast<double>(nn.distance.size());
  if (mean <= 0.0) return std::numeric_limits<double>::infinity();
  double ss = 0.0;
  for (double d : nn.distance) ss += (d - mean) * (d - mean);
  return std::sqrt(ss / static_cast<double>(nn.distance.size())) / mean;
}

GraphMethod resolve_method(GraphMethod method, const Matrix& coords) {
  if (method != GraphMethod::automatic) return method;
  return nearest_neighbor_cv(coords) < 0.05 ? GraphMethod::knn : GraphMethod::delaunay;
}

SpatialGraph build_graph(const Matrix& coords, const GraphOptions& options, WarningLog* warnings) {
  if (resolve_method(options.method, coords) == GraphMethod::knn) return build_knn_graph(coords, options.k, warnings);
  return prune_long_edges(build_delaunay_graph(coords, warnings), options.prune_percentile);
}

SpatialGraph block_diagonal_merge(const std::vector<SpatialGraph>& graphs) {
  if (graphs.empty()) throw InvalidArgument("block_diagonal_merge needs at least one graph");
  std::size_t offset = 0;
  std::vector<Edge> edges;
  for (const auto& g : graphs) {
    for (const auto& e : g.edges())
      edges.push_back({static_cast<std::uint32_t>(e.i + offset), static_cast<std::uint32_t>(e.j + offset), e.weight});
    offset += g.n_nodes();
  }
  return SpatialGraph(offset, std::move(edges));
}

std::vector<std::uint32_t> neighbor_set(const SpatialGraph& g, std::size_t i) {
  if (i >= g.n_nodes())
    throw InvalidArgument("node " + std::to_string(i) + " out of range for graph with " + std::to_string(g.n_nodes()) +
                          " nodes");
  return g.neighbors(i);
}

void write_edge_list(const std::filesystem::path& path, const SpatialGraph& g) {
  std::ostringstream out;
  out << "%n " << g.n_nodes() << '\n';
  for (const auto& e : g.edges()) out << e.i << ' ' << e.j << ' ' << io::format_double(e.weight) << '\n';
  io::write_text(path, out.str());
}

SpatialGraph read_edge_list(const std::filesystem::path& path) {
  const auto lines = io::read_lines(path);
  std::size_t n = 0;
  bool have_n = false;
  std::vector<Edge> edges;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const auto tok = io::split_ws(lines[r]);
    if (tok.empty()) continue;
    if (tok[0] == "%n") {
      if (tok.size() != 2) throw ParseError("%n needs a node count", r + 1, 1);
      n = static_cast<std::size_t>(io::parse_int(tok[1], r + 1, 2));
      have_n = true;
      continue;
    }
    if (tok.size() != 3) throw ParseError("expected 'i j weight'", r + 1, 1);
    edges.push_back({static_cast<std::uint32_t>(io::parse_int(tok[0], r + 1, 1)),
                     static_cast<std::uint32_t>(io::parse_int(tok[1], r + 1, 2)), io::parse_double(tok[2], r + 1, 3)});
  }
  if (!have_n) throw ParseError("missing %n header", 1, 1);
  return SpatialGraph(n, std::move(edges));
}

}  // namespace cellscape::spatialgraph
