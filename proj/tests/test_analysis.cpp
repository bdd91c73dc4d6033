#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cellscape/analysis.hpp"
#include "cellscape/rng.hpp"

using namespace cellscape;
using namespace cellscape::analysis;

namespace {

// U by pairwise comparison, p by walking every subset of the pooled values.
RankSumResult enumerate_rank_sum(const std::vector<double>& a, const std::vector<double>& b) {
  auto u_of = [](const std::vector<double>& x, const std::vector<double>& y) {
    double u = 0;
    for (double xi : x)
      for (double yj : y) u += xi > yj ? 1.0 : (xi == yj ? 0.5 : 0.0);
    return u;
  };
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const double mu = static_cast<double>(a.size() * b.size()) / 2.0;
  const double u = u_of(a, b);
  std::vector<bool> pick(pooled.size(), false);
  std::fill(pick.begin(), pick.begin() + static_cast<long>(a.size()), true);
  std::size_t total = 0, extreme = 0;
  do {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < pooled.size(); ++i) (pick[i] ? x : y).push_back(pooled[i]);
    ++total;
    if (std::abs(u_of(x, y) - mu) >= std::abs(u - mu) - 1e-12) ++extreme;
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return {u, static_cast<double>(extreme) / static_cast<double>(total), true};
}

double exact_choose(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  unsigned long long c = 1;
  for (std::size_t i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return static_cast<double>(c);
}

double exact_upper_tail(std::size_t k, std::size_t M, std::size_t n, std::size_t N) {
  double num = 0;
  for (std::size_t i = k; i <= std::min(n, N); ++i) num += exact_choose(n, i) * exact_choose(M - n, N - i);
  return num / exact_choose(M, N);
}

ingest::ExpressionDataset tiny_dataset(const Matrix& X) {
  ingest::ExpressionDataset ds;
  ds.X = X;
  ds.coords = Matrix(2, X.cols);
  for (std::size_t g = 0; g < X.rows; ++g) ds.gene_names.push_back("g" + std::to_string(g));
  for (std::size_t i = 0; i < X.cols; ++i) ds.cell_ids.push_back("c" + std::to_string(i));
  return ds;
}

spatialgraph::SpatialGraph grid_graph(std::size_t w, std::size_t h) {
  std::vector<spatialgraph::Edge> e;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const auto i = static_cast<std::uint32_t>(y * w + x);
      if (x + 1 < w) e.push_back({i, i + 1, 1.0});
      if (y + 1 < h) e.push_back({i, static_cast<std::uint32_t>(i + w), 1.0});
    }
  return spatialgraph::SpatialGraph(w * h, e);
}

}  // namespace

TEST_CASE("rank-sum worked examples") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const auto r = rank_sum_test(a, b);
  CHECK(r.exact);
  CHECK(r.u == 0.0);
  CHECK(r.p == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(std::abs(enumerate_rank_sum(a, b).p - 0.1) < 1e-15);

  const std::vector<double> c{1, 2, 3, 4}, d{4, 3, 2, 1};
  const auto s = rank_sum_test(c, d);
  CHECK(s.u == 8.0);
  CHECK(s.p == 1.0);

  const std::vector<double> flat(12, 2.5);
  CHECK(rank_sum_test(std::span(flat).first(5), std::span(flat).last(7)).p == 1.0);
  CHECK(rank_sum_test(std::vector<double>(20, 1.0), std::vector<double>(30, 1.0)).p == 1.0);
  CHECK_THROWS_AS(rank_sum_test(std::vector<double>{}, b), InvalidArgument);
}

TEST_CASE("rank-sum exact mode matches full enumeration") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n1 = 1 + rng.below(8), n2 = 1 + rng.below(8);
    std::vector<double> a(n1), b(n2);
    for (auto& v : a) v = static_cast<double>(rng.below(5));  // frequent ties
    for (auto& v : b) v = static_cast<double>(rng.below(5)) + (rng.uniform() < 0.3 ? 1.0 : 0.0);
    const auto got = rank_sum_test(a, b);
    const auto want = enumerate_rank_sum(a, b);
    CHECK(got.exact);
    CHECK(got.u == want.u);
    CHECK(std::abs(got.p - want.p) < 1e-14);
  }
}

TEST_CASE("rank-sum normal approximation is close to the exact null just past the cutoff") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> a(9), b(9);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal() + 0.8;
    const auto got = rank_sum_test(a, b);
    CHECK_FALSE(got.exact);
    CHECK(std::abs(got.p - enumerate_rank_sum(a, b).p) < 0.02);
  }
}

TEST_CASE("benjamini-hochberg matches the definition") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(30);
    std::vector<double> p(m);
    for (auto& v : p) v = rng.uniform() < 0.2 ? 0.01 : rng.uniform();  // some ties
    const auto adj = benjamini_hochberg(p);
    for (std::size_t i = 0; i < m; ++i) {
      double best = 1.0;
      for (std::size_t j = 0; j < m; ++j) {
        if (p[j] < p[i]) continue;
        std::size_t rank = 0;  // largest rank among equal values
        for (std::size_t t = 0; t < m; ++t) rank += p[t] <= p[j];
        best = std::min(best, p[j] * static_cast<double>(m) / static_cast<double>(rank));
      }
      CHECK(std::abs(adj[i] - best) < 1e-15);
    }
  }
}

TEST_CASE("wilcoxon marker ranking") {
  Rng rng(1);
  const std::size_t n = 40;
  Matrix X(4, n);
  std::vector<std::uint32_t> lab(n);
  for (std::size_t i = 0; i < n; ++i) {
    lab[i] = i < 15 ? 1 : 0;
    X(0, i) = rng.uniform();                             // noise
    X(1, i) = 3.0;                                       // constant
    X(2, i) = (lab[i] == 1 ? 4.0 : 0.0) + rng.uniform(); // marker of domain 1
    X(3, i) = lab[i] == 1 ? 0.0 : 2.0;                   // anti-marker
  }
  const auto ds = tiny_dataset(X);
  const auto tests = wilcoxon_dge(ds, lab, 1);
  REQUIRE(tests.size() == 4);
  // Two-sided p: the anti-marker ranks alongside the marker.
  CHECK(((tests[0].gene == "g2" && tests[1].gene == "g3") || (tests[0].gene == "g3" && tests[1].gene == "g2")));
  const auto up = std::find_if(tests.begin(), tests.end(), [](const GeneTest& t) { return t.gene == "g2"; });
  CHECK(up->log2_fc > 2.0);
  CHECK(up->frac_in == 1.0);
  const auto flat = std::find_if(tests.begin(), tests.end(), [](const GeneTest& t) { return t.gene == "g1"; });
  CHECK(flat->p == 1.0);
  CHECK(flat->log2_fc == 0.0);
  const auto anti = std::find_if(tests.begin(), tests.end(), [](const GeneTest& t) { return t.gene == "g3"; });
  CHECK(anti->log2_fc < -20.0);
  CHECK(anti->frac_in == 0.0);
  for (std::size_t t = 1; t < tests.size(); ++t) CHECK(tests[t - 1].p_adj <= tests[t].p_adj);

  const auto markers = select_markers(tests);
  REQUIRE(markers.size() == 1);
  CHECK(markers[0].gene == "g2");

  CHECK_THROWS_AS(wilcoxon_dge(ds, lab, 7), InvalidArgument);
  CHECK_THROWS_AS(wilcoxon_dge(ds, std::vector<std::uint32_t>(n, 1), 1), InvalidArgument);
  CHECK_THROWS_AS(wilcoxon_dge(ds, std::vector<std::uint32_t>(3, 1), 1), DimensionMismatch);
}

TEST_CASE("composition examples") {
  const auto one = composition({0, 0, 0}, {"A", "A", "B"});
  CHECK(one.P(0, 0) == 2.0 / 3.0);
  CHECK(one.P(0, 1) == 1.0 / 3.0);

  const auto mono = composition({0, 1, 1, 2}, {"T", "T", "T", "T"});
  for (std::size_t r = 0; r < 3; ++r) CHECK(mono.P(r, 0) == 1.0);

  const auto two = composition({0, 0, 1, 1}, {"A", "B", "B", "B"});
  CHECK(two.P == Matrix(2, 2, std::vector<double>{0.5, 0.5, 0.0, 1.0}));
  CHECK(two.N == Matrix(2, 2, std::vector<double>{1, 1, 0, 2}));
  CHECK(two.P_all == std::vector<double>{0.25, 0.75});

  WarningLog w;
  const auto gap = composition({0, 2, 2}, {"A", "B", "A"}, 4, &w);
  CHECK(gap.domains == std::vector<std::uint32_t>{0, 2});
  CHECK(w.size() == 2);
  CHECK(w.contains("domain 1"));

  Rng rng(8);
  std::vector<std::uint32_t> lab(300);
  std::vector<std::string> types(300);
  for (std::size_t i = 0; i < 300; ++i) {
    lab[i] = static_cast<std::uint32_t>(rng.below(6));
    types[i] = "t" + std::to_string(rng.below(7));
  }
  const auto big = composition(lab, types);
  for (std::size_t r = 0; r < big.domains.size(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < big.types.size(); ++j) s += big.P(r, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK(std::abs(std::accumulate(big.P_all.begin(), big.P_all.end(), 0.0) - 1.0) < 1e-12);
}

TEST_CASE("composition shift") {
  const auto a = composition({0, 0, 0, 0, 0, 1, 1}, {"A", "A", "A", "B", "B", "A", "B"});
  const auto b = composition({0, 0, 1, 1}, {"A", "B", "A", "B"});
  const auto self = composition_shift(a, a);
  for (double v : self.data) CHECK(v == 0.0);
  const auto d = composition_shift(a, b);
  CHECK(std::abs(d(0, 0) - 0.1) < 1e-15);
  CHECK(std::abs(d(0, 1) + 0.1) < 1e-15);
  const auto r = composition_shift(b, a);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(r.data[i] == -d.data[i]);

  const auto c = composition({0, 1, 2}, {"A", "C", "A"});
  try {
    composition_shift(a, c);
    FAIL("expected an axis error");
  } catch (const InvalidArgument& e) {
    const std::string m = e.what();
    CHECK(m.find("domain 2") != std::string::npos);
    CHECK(m.find("type B") != std::string::npos);
    CHECK(m.find("type C") != std::string::npos);
  }
}

TEST_CASE("hypergeometric tail matches exact PMF summation") {
  for (std::size_t M = 1; M <= 20; ++M)
    for (std::size_t n = 0; n <= M; ++n)
      for (std::size_t N = 0; N <= M; ++N)
        for (std::size_t k = 0; k <= std::min(n, N) + 1; ++k)
          CHECK(std::abs(hypergeometric_upper_tail(k, M, n, N) - exact_upper_tail(k, M, n, N)) < 1e-12);
}

TEST_CASE("gene-set enrichment examples") {
  const std::vector<std::string> U{"a", "b", "c", "d", "e"};
  const std::vector<GeneSet> sets{{"S", "", {"a", "b"}},
                                  {"disjoint", "", {"d", "e"}},
                                  {"all", "", {"a", "b", "c", "d", "e", "zz"}}};
  const auto res = geneset_enrichment({"a", "b"}, U, sets);
  REQUIRE(res.size() == 3);
  CHECK(res[0].name == "S");
  CHECK(res[0].overlap == 2);
  CHECK(std::abs(res[0].p - 0.1) < 1e-15);
  const auto by_name = [&](const std::string& nm) {
    return *std::find_if(res.begin(), res.end(), [&](const EnrichmentResult& r) { return r.name == nm; });
  };
  CHECK(by_name("disjoint").overlap == 0);
  CHECK(by_name("disjoint").p == 1.0);
  CHECK(by_name("all").set_size == 5);
  CHECK(by_name("all").overlap == 2);
  CHECK(by_name("all").p == 1.0);
  CHECK(std::abs(res[0].p_adj - 0.3) < 1e-15);

  CHECK_THROWS_AS(geneset_enrichment({"a"}, {}, sets), InvalidArgument);
  CHECK_THROWS_AS(geneset_enrichment({"q"}, U, sets), InvalidArgument);
}

TEST_CASE("transition graph examples") {
  SUBCASE("separate cliques") {
    std::vector<spatialgraph::Edge> e;
    for (std::uint32_t i = 0; i < 4; ++i)
      for (std::uint32_t j = i + 1; j < 4; ++j) {
        e.push_back({i, j, 1.0});
        e.push_back({i + 4, j + 4, 1.0});
      }
    const spatialgraph::SpatialGraph g(8, e);
    const auto t = transition_graph({{0, 0, 0, 0, 1, 1, 1, 1}, 2, {}}, g);
    CHECK(t.connectivity(0, 1) == 0.0);
    CHECK(t.connectivity(0, 0) == 0.0);
  }
  SUBCASE("grid halves and relabeling") {
    const auto g = grid_graph(8, 6);
    std::vector<std::uint32_t> lab(48), three(48);
    for (std::size_t i = 0; i < 48; ++i) {
      lab[i] = (i % 8) < 4 ? 0 : 1;
      three[i] = static_cast<std::uint32_t>((i % 8) / 3);  // bands of width 3, 3, 2
    }
    const auto t = transition_graph({lab, 2, {}}, g);
    CHECK(t.connectivity(0, 1) == 1.0);
    CHECK(t.observed(0, 1) == 6.0);  // one crossing edge per row

    const auto t3 = transition_graph({three, 3, {}}, g);
    // Edge-count oracle: band 0|1 and 1|2 each cross 6 times, 0|2 never.
    CHECK(t3.observed(0, 1) == 6.0);
    CHECK(t3.observed(1, 2) == 6.0);
    CHECK(t3.observed(0, 2) == 0.0);
    double deg[3] = {0, 0, 0};
    for (std::size_t i = 0; i < 48; ++i) deg[three[i]] += static_cast<double>(g.degree(i));
    const double two_m = 2.0 * static_cast<double>(g.n_edges());
    const double r01 = 6.0 / (deg[0] * deg[1] / two_m), r12 = 6.0 / (deg[1] * deg[2] / two_m);
    CHECK(std::abs(t3.connectivity(0, 1) - r01 / std::max(r01, r12)) < 1e-15);
    CHECK(std::abs(t3.connectivity(1, 2) - r12 / std::max(r01, r12)) < 1e-15);

    const std::uint32_t perm[3] = {2, 0, 1};
    std::vector<std::uint32_t> relab(48);
    for (std::size_t i = 0; i < 48; ++i) relab[i] = perm[three[i]];
    const auto tp = transition_graph({relab, 3, {}}, g);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        CHECK(tp.connectivity(perm[a], perm[b]) == t3.connectivity(a, b));
        CHECK(t3.connectivity(a, b) == t3.connectivity(b, a));
      }
  }
  SUBCASE("single domain") {
    const auto t = transition_graph({std::vector<std::uint32_t>(48, 0), 1, {}}, grid_graph(8, 6));
    CHECK(t.connectivity.rows == 1);
    CHECK(t.connectivity(0, 0) == 0.0);
  }
  CHECK_THROWS_AS(transition_graph({std::vector<std::uint32_t>(48, 0), 2, {}}, grid_graph(8, 6)), InvalidArgument);
}

TEST_CASE("analysis files") {
  const auto dir = std::filesystem::temp_directory_path() / "cellscape_test_analysis";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "sets.gmt");
    f << "SET_A\tfirst\tg1\tg2\tg2\n\nSET_B\tsecond\n";
  }
  const auto sets = read_gmt(dir / "sets.gmt");
  REQUIRE(sets.size() == 2);
  CHECK(sets[0].genes == std::vector<std::string>{"g1", "g2"});
  CHECK(sets[1].genes.empty());
  {
    std::ofstream f(dir / "bad.gmt");
    f << "lonely\n";
  }
  CHECK_THROWS_AS(read_gmt(dir / "bad.gmt"), ParseError);

  const auto t = transition_graph({{0, 0, 1, 1}, 2, {}}, grid_graph(2, 2));
  write_transition_csv(dir / "transition.csv", t);
  std::ifstream in(dir / "transition.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "domain_a,domain_b,observed,connectivity");
  CHECK(row == "0,1,2,1");
  std::filesystem::remove_all(dir);
}
