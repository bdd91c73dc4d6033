#include "cellscape/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "cellscape/io.hpp"

namespace cellscape::analysis {

TransitionGraph transition_graph(const cluster::DomainLabels& labels, const spatialgraph::SpatialGraph& g) {
  const std::size_t n = g.n_nodes(), D = labels.n_domains;
  if (labels.labels.size() != n) throw DimensionMismatch("transition graph: labels vs graph nodes", n, labels.labels.size());
  if (D == 0) throw InvalidArgument("transition graph needs at least one domain");
  std::vector<std::size_t> cells(D, 0);
  std::vector<double> deg(D, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = labels.labels[i];
    if (a >= D) throw InvalidArgument("label " + std::to_string(a) + " outside 0.." + std::to_string(D - 1));
    ++cells[a];
    deg[a] += static_cast<double>(g.degree(i));
  }
  for (std::size_t a = 0; a < D; ++a)
    if (cells[a] == 0) throw InvalidArgument("domain " + std::to_string(a) + " has no cells");

  TransitionGraph t;
  t.nodes.resize(D);
  std::iota(t.nodes.begin(), t.nodes.end(), 0u);
  t.observed = Matrix(D, D);
  t.connectivity = Matrix(D, D);
  for (const auto& e : g.edges()) {
    const auto a = labels.labels[e.i], b = labels.labels[e.j];
    if (a == b) continue;
    t.observed(a, b) += 1.0;
    t.observed(b, a) += 1.0;
  }
  const double two_m = 2.0 * static_cast<double>(g.n_edges());
  double top = 0.0;
  for (std::size_t a = 0; a < D; ++a)
    for (std::size_t b = a + 1; b < D; ++b) {
      const double expected = deg[a] * deg[b] / two_m;
      const double r = (expected > 0.0) ? t.observed(a, b) / expected : 0.0;
      t.connectivity(a, b) = t.connectivity(b, a) = r;
      top = std::max(top, r);
    }
  if (top > 0.0)
    for (auto& v : t.connectivity.data) v /= top;
  return t;
}

// ---------------------------------------------------------------------------
// Rank-sum test

namespace {

// Midranks, doubled so that every rank is an integer.
std::vector<long long> doubled_midranks(const std::vector<double>& pooled, long long& tie_term) {
  const std::size_t n = pooled.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pooled[x] < pooled[y]; });
  std::vector<long long> r2(n);
  tie_term = 0;
  for (std::size_t s = 0; s < n;) {
    std::size_t e = s;
    while (e < n && pooled[order[e]] == pooled[order[s]]) ++e;
    const long long t = static_cast<long long>(e - s);
    const long long rank2 = static_cast<long long>(s + 1 + e);  // 2 * mean of ranks s+1..e
    for (std::size_t q = s; q < e; ++q) r2[order[q]] = rank2;
    tie_term += t * t * t - t;
    s = e;
  }
  return r2;
}

}  // namespace

RankSumResult rank_sum_test(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InvalidArgument("rank-sum test needs two non-empty groups");
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  for (double v : pooled)
    if (!std::isfinite(v)) throw InvalidArgument("rank-sum test on non-finite values");
  long long tie_term = 0;
  const auto r2 = doubled_midranks(pooled, tie_term);
  long long sum2 = 0;
  for (std::size_t i = 0; i < n1; ++i) sum2 += r2[i];
  const long long base2 = static_cast<long long>(n1 * (n1 + 1));
  const long long u2 = sum2 - base2;  // 2U
  const long long mu2 = static_cast<long long>(n1 * n2);  // 2 * E[U]

  RankSumResult out;
  out.u = static_cast<double>(u2) / 2.0;
  out.exact = n1 <= 8 && n2 <= 8;
  if (tie_term == static_cast<long long>(n * n * n - n)) return out;  // every value tied

  if (out.exact) {
    const long long dev = std::llabs(u2 - mu2);
    std::size_t total = 0, extreme = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) != n1) continue;
      long long s = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (mask >> i & 1u) s += r2[i];
      ++total;
      if (std::llabs(s - base2 - mu2) >= dev) ++extreme;
    }
    out.p = static_cast<double>(extreme) / static_cast<double>(total);
    return out;
  }
  const double dn = static_cast<double>(n);
  const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
                     ((dn + 1.0) - static_cast<double>(tie_term) / (dn * (dn - 1.0)));
  if (!(var > 0.0)) return out;
  const double z = std::max(std::abs(out.u - static_cast<double>(mu2) / 2.0) - 0.5, 0.0) / std::sqrt(var);
  out.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return out;
}

std::vector<double> benjamini_hochberg(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return p[x] < p[y]; });
  std::vector<double> adj(m);
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double v = p[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1);
    running = std::min(running, v);
    adj[order[r]] = std::min(running, 1.0);
  }
  return adj;
}

std::vector<GeneTest> wilcoxon_dge(const ingest::ExpressionDataset& ds, const std::vector<std::uint32_t>& labels,
                                   std::uint32_t domain) {
  const std::size_t n = ds.n_cells(), p = ds.n_genes();
  if (labels.size() != n) throw DimensionMismatch("marker test: labels vs cells", n, labels.size());
  std::vector<std::size_t> in, out;
  for (std::size_t i = 0; i < n; ++i) (labels[i] == domain ? in : out).push_back(i);
  if (in.empty()) throw InvalidArgument("domain " + std::to_string(domain) + " has no cells");
  if (out.empty()) throw InvalidArgument("domain " + std::to_string(domain) + " contains every cell");

  std::vector<GeneTest> tests(p);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::size_t g = 0; g < p; ++g) {
    std::vector<double> a(in.size()), b(out.size());
    double mean_a = 0.0, mean_b = 0.0, pos_a = 0.0, pos_b = 0.0;
    for (std::size_t t = 0; t < in.size(); ++t) {
      a[t] = ds.X(g, in[t]);
      mean_a += a[t];
      pos_a += a[t] > 0.0;
    }
    for (std::size_t t = 0; t < out.size(); ++t) {
      b[t] = ds.X(g, out[t]);
      mean_b += b[t];
      pos_b += b[t] > 0.0;
    }
    mean_a /= static_cast<double>(a.size());
    mean_b /= static_cast<double>(b.size());
    const auto r = rank_sum_test(a, b);
    auto& t = tests[g];
    t.gene = ds.gene_names[g];
    t.gene_index = g;
    t.u = r.u;
    t.p = r.p;
    t.log2_fc = std::log2((mean_a + 1e-9) / (mean_b + 1e-9));
    t.frac_in = pos_a / static_cast<double>(a.size());
    t.frac_out = pos_b / static_cast<double>(b.size());
  }
  std::vector<double> pv(p);
  for (std::size_t g = 0; g < p; ++g) pv[g] = tests[g].p;
  const auto adj = benjamini_hochberg(pv);
  for (std::size_t g = 0; g < p; ++g) tests[g].p_adj = adj[g];
  std::sort(tests.begin(), tests.end(), [](const GeneTest& x, const GeneTest& y) {
    if (x.p_adj != y.p_adj) return x.p_adj < y.p_adj;
    if (std::abs(x.log2_fc) != std::abs(y.log2_fc)) return std::abs(x.log2_fc) > std::abs(y.log2_fc);
    return x.gene_index < y.gene_index;
  });
  return tests;
}

std::vector<GeneTest> select_markers(const std::vector<GeneTest>& tests, const MarkerFilter& filter) {
  std::vector<GeneTest> out;
  for (const auto& t : tests) {
    if (out.size() >= filter.top) break;
    if (t.p_adj < filter.max_p_adj && t.log2_fc > filter.min_log2_fc) out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composition

CompositionMatrix composition(const std::vector<std::uint32_t>& labels, const std::vector<std::string>& types,
                              std::size_t n_domains, WarningLog* warnings) {
  if (labels.size() != types.size()) throw DimensionMismatch("composition: domain vs type labels", labels.size(), types.size());
  if (labels.empty()) throw InvalidArgument("composition of zero cells");
  if (n_domains == 0) n_domains = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  CompositionMatrix c;
  c.types = types;
  std::sort(c.types.begin(), c.types.end());
  c.types.erase(std::unique(c.types.begin(), c.types.end()), c.types.end());
  const std::size_t T = c.types.size();
  Matrix full(n_domains, T);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_domains) throw InvalidArgument("label " + std::to_string(labels[i]) + " outside 0.." +
                                                      std::to_string(n_domains - 1));
    const auto j = static_cast<std::size_t>(std::lower_bound(c.types.begin(), c.types.end(), types[i]) - c.types.begin());
    full(labels[i], j) += 1.0;
  }
  std::vector<std::size_t> keep;
  for (std::size_t a = 0; a < n_domains; ++a) {
    double s = 0.0;
    for (std::size_t j = 0; j < T; ++j) s += full(a, j);
    if (s > 0.0) keep.push_back(a);
    else warn(warnings, "composition: domain " + std::to_string(a) + " is empty and was dropped");
  }
  c.N = Matrix(keep.size(), T);
  c.P = Matrix(keep.size(), T);
  c.P_all.assign(T, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < keep.size(); ++r) {
    c.domains.push_back(static_cast<std::uint32_t>(keep[r]));
    double s = 0.0;
    for (std::size_t j = 0; j < T; ++j) {
      c.N(r, j) = full(keep[r], j);
      s += c.N(r, j);
      c.P_all[j] += c.N(r, j);
    }
    for (std::size_t j = 0; j < T; ++j) c.P(r, j) = c.N(r, j) / s;
    total += s;
  }
  for (auto& v : c.P_all) v /= total;
  return c;
}

Matrix composition_shift(const CompositionMatrix& a, const CompositionMatrix& b) {
  if (a.domains != b.domains || a.types != b.types) {
    std::ostringstream msg;
    msg << "composition axes differ;";
    auto diff = [&](const auto& x, const auto& y, const char* what) {
      for (const auto& v : x)
        if (std::find(y.begin(), y.end(), v) == y.end()) msg << ' ' << what << ' ' << v << " only in first;";
      for (const auto& v : y)
        if (std::find(x.begin(), x.end(), v) == x.end()) msg << ' ' << what << ' ' << v << " only in second;";
    };
    diff(a.domains, b.domains, "domain");
    diff(a.types, b.types, "type");
    throw InvalidArgument(msg.str());
  }
  Matrix d(a.P.rows, a.P.cols);
  for (std::size_t i = 0; i < d.size(); ++i) d.data[i] = a.P.data[i] - b.P.data[i];
  return d;
}

// ---------------------------------------------------------------------------
// Enrichment

std::vector<GeneSet> read_gmt(const std::filesystem::path& path) {
  const auto lines = io::read_lines(path);
  std::vector<GeneSet> sets;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto f = io::split_csv(lines[r], '\t');
    if (f.size() < 2) throw ParseError("gene-set line needs a name and a description", r + 1, f.size());
    GeneSet s{f[0], f[1], {}};
    std::unordered_set<std::string> seen;
    for (std::size_t t = 2; t < f.size(); ++t)
      if (!f[t].empty() && seen.insert(f[t]).second) s.genes.push_back(f[t]);
    sets.push_back(std::move(s));
  }
  return sets;
}

double hypergeometric_upper_tail(std::size_t k, std::size_t population, std::size_t successes, std::size_t draws) {
  if (successes > population || draws > population)
    throw InvalidArgument("hypergeometric parameters exceed the population");
  const std::size_t lo = draws + successes > population ? draws + successes - population : 0;
  const std::size_t hi = std::min(successes, draws);
  if (k <= lo) return 1.0;
  if (k > hi) return 0.0;
  auto lchoose = [](std::size_t nn, std::size_t kk) {
    return std::lgamma(static_cast<double>(nn) + 1.0) - std::lgamma(static_cast<double>(kk) + 1.0) -
           std::lgamma(static_cast<double>(nn - kk) + 1.0);
  };
  const double denom = lchoose(population, draws);
  double s = 0.0;
  for (std::size_t i = k; i <= hi; ++i)
    s += std::exp(lchoose(successes, i) + lchoose(population - successes, draws - i) - denom);
  return std::min(s, 1.0);
}

std::vector<EnrichmentResult> geneset_enrichment(const std::vector<std::string>& markers,
                                                 const std::vector<std::string>& universe,
                                                 const std::vector<GeneSet>& gene_sets) {
  const std::unordered_set<std::string> U(universe.begin(), universe.end());
  if (U.empty()) throw InvalidArgument("enrichment universe is empty");
  const std::unordered_set<std::string> Mk(markers.begin(), markers.end());
  for (const auto& m : Mk)
    if (!U.count(m)) throw InvalidArgument("marker '" + m + "' is not in the universe");

  std::vector<EnrichmentResult> out;
  for (const auto& gs : gene_sets) {
    EnrichmentResult r;
    r.name = gs.name;
    std::unordered_set<std::string> seen;
    for (const auto& g : gs.genes) {
      if (!U.count(g) || !seen.insert(g).second) continue;
      ++r.set_size;
      if (Mk.count(g)) r.overlap_genes.push_back(g);
    }
    r.overlap = r.overlap_genes.size();
    r.p = hypergeometric_upper_tail(r.overlap, U.size(), r.set_size, Mk.size());
    out.push_back(std::move(r));
  }
  std::vector<double> pv;
  for (const auto& r : out) pv.push_back(r.p);
  const auto adj = benjamini_hochberg(pv);
  for (std::size_t s = 0; s < out.size(); ++s) out[s].p_adj = adj[s];
  std::stable_sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.p < y.p; });
  return out;
}

// ---------------------------------------------------------------------------
// Tables

void write_markers_csv(const std::filesystem::path& path, const std::vector<DomainMarkers>& markers) {
  std::ostringstream o;
  o << "domain,gene,u,p,p_adj,log2_fc,frac_in,frac_out\n";
  for (const auto& dm : markers)
    for (const auto& t : dm.tests)
      o << dm.domain << ',' << t.gene << ',' << io::format_double(t.u) << ',' << io::format_double(t.p) << ','
        << io::format_double(t.p_adj) << ',' << io::format_double(t.log2_fc) << ',' << io::format_double(t.frac_in)
        << ',' << io::format_double(t.frac_out) << '\n';
  io::write_text(path, o.str());
}

void write_enrichment_csv(const std::filesystem::path& path, const std::vector<DomainEnrichment>& enrichment) {
  std::ostringstream o;
  o << "domain,gene_set,set_size,overlap,p,p_adj,genes\n";
  for (const auto& de : enrichment)
    for (const auto& r : de.results) {
      o << de.domain << ',' << r.name << ',' << r.set_size << ',' << r.overlap << ',' << io::format_double(r.p) << ','
        << io::format_double(r.p_adj) << ',';
      for (std::size_t t = 0; t < r.overlap_genes.size(); ++t) o << (t ? ";" : "") << r.overlap_genes[t];
      o << '\n';
    }
  io::write_text(path, o.str());
}

void write_transition_csv(const std::filesystem::path& path, const TransitionGraph& t) {
  std::ostringstream o;
  o << "domain_a,domain_b,observed,connectivity\n";
  for (std::size_t a = 0; a < t.nodes.size(); ++a)
    for (std::size_t b = a + 1; b < t.nodes.size(); ++b)
      o << t.nodes[a] << ',' << t.nodes[b] << ',' << io::format_double(t.observed(a, b)) << ','
        << io::format_double(t.connectivity(a, b)) << '\n';
  io::write_text(path, o.str());
}

void write_composition_csv(const std::filesystem::path& path, const CompositionMatrix& c) {
  std::ostringstream o;
  o << "domain,type,count,fraction\n";
  for (std::size_t r = 0; r < c.domains.size(); ++r)
    for (std::size_t j = 0; j < c.types.size(); ++j)
      o << c.domains[r] << ',' << c.types[j] << ',' << io::format_double(c.N(r, j)) << ','
        << io::format_double(c.P(r, j)) << '\n';
  for (std::size_t j = 0; j < c.types.size(); ++j)
    o << "all," << c.types[j] << ",," << io::format_double(c.P_all[j]) << '\n';
  io::write_text(path, o.str());
}

}  // namespace cellscape::analysis
