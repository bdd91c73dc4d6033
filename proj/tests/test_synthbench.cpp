#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include <json.hpp>

#include "cellscape/io.hpp"
#include "cellscape/synthbench.hpp"

using namespace cellscape;
using namespace cellscape::synthbench;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_cells = 300;
  s.n_genes = 40;
  s.n_domains = 4;
  return s;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows == b.rows && a.cols == b.cols && std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("spec validation") {
  auto s = small_spec();
  CHECK_NOTHROW(s.validate());
  s.n_domains = 41;
  CHECK_THROWS_AS(generate_tissue(s), InvalidArgument);
  s = small_spec();
  s.noise_sd = -1.0;
  CHECK_THROWS_AS(generate_tissue(s), InvalidArgument);
  s = small_spec();
  s.program_strength = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(generate_tissue(s), InvalidArgument);
  s = small_spec();
  s.batch_shift = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(generate_tissue(s), InvalidArgument);
  s = small_spec();
  s.n_cells = 0;
  CHECK_THROWS_AS(generate_tissue(s), InvalidArgument);
  CHECK_THROWS_AS(parse_band_axis("z"), InvalidArgument);
  CHECK_THROWS_AS(parse_method("louvain"), InvalidArgument);
  CHECK_THROWS_AS(parse_methods(""), InvalidArgument);
  CHECK(parse_methods("truth,random").size() == 2);
}

TEST_CASE("bands partition the square along the chosen axis") {
  for (auto axis : {BandAxis::x, BandAxis::y}) {
    auto s = small_spec();
    s.band_axis = axis;
    const auto t = generate_tissue(s);
    const auto& ds = t.data;
    REQUIRE(t.truth.labels.size() == s.n_cells);
    CHECK(t.truth.n_domains == s.n_domains);
    CHECK_NOTHROW(ds.validate(true));
    CHECK(ds.raw_counts.has_value());
    CHECK(ds.type_labels.has_value());
    std::vector<std::size_t> counts(s.n_domains, 0);
    for (std::size_t i = 0; i < s.n_cells; ++i) {
      const double x = ds.coords(0, i), y = ds.coords(1, i);
      CHECK(x >= 0.0);
      CHECK(x < 1.0);
      CHECK(y >= 0.0);
      CHECK(y < 1.0);
      const double t_axis = axis == BandAxis::x ? x : y;
      const auto d = t.truth.labels[i];
      REQUIRE(d < s.n_domains);
      CHECK(t_axis >= static_cast<double>(d) / 4.0);
      CHECK(t_axis < static_cast<double>(d + 1) / 4.0);
      ++counts[d];
    }
    for (auto c : counts) CHECK(c > 0);
  }
}

TEST_CASE("single domain gives all-zero labels") {
  auto s = small_spec();
  s.n_domains = 1;
  const auto t = generate_tissue(s);
  CHECK(std::all_of(t.truth.labels.begin(), t.truth.labels.end(), [](auto l) { return l == 0; }));
}

TEST_CASE("same seed is bitwise identical, different seed is not") {
  const auto a = generate_tissue(small_spec());
  const auto b = generate_tissue(small_spec());
  CHECK(bitwise_equal(a.data.X, b.data.X));
  CHECK(bitwise_equal(a.data.coords, b.data.coords));
  CHECK(a.truth.labels == b.truth.labels);
  CHECK(*a.data.type_labels == *b.data.type_labels);
  auto s = small_spec();
  s.seed = 8;
  CHECK_FALSE(bitwise_equal(a.data.X, generate_tissue(s).data.X));
}

TEST_CASE("program genes follow the Poisson mean oracle") {
  SyntheticSpec s;
  s.n_cells = 4000;
  s.n_genes = 10;
  s.n_domains = 2;
  s.noise_sd = 0.0;
  s.program_strength = 50.0;
  const auto t = generate_tissue(s);
  // Genes 0..4 belong to domain 0. In-domain ~ Poisson(51), out ~ Poisson(1).
  double sum_in = 0, sum_out = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t g = 0; g < 5; ++g)
    for (std::size_t i = 0; i < s.n_cells; ++i) {
      const double v = t.data.X(g, i);
      CHECK(v == std::floor(v));  // integer counts without noise
      if (t.truth.labels[i] == 0) sum_in += v, ++n_in;
      else sum_out += v, ++n_out;
    }
  const double diff = sum_in / double(n_in) - sum_out / double(n_out);
  const double se = std::sqrt(51.0 / double(n_in) + 1.0 / double(n_out));
  CHECK(std::abs(diff - 50.0) < 3.0 * se);
}

TEST_CASE("leftover genes are background only") {
  SyntheticSpec s;
  s.n_cells = 3000;
  s.n_genes = 11;  // 5 program genes per domain, gene 10 belongs to none
  s.n_domains = 2;
  s.noise_sd = 0.0;
  s.program_strength = 20.0;
  const auto t = generate_tissue(s);
  double mean = 0;
  for (std::size_t i = 0; i < s.n_cells; ++i) mean += t.data.X(10, i);
  mean /= double(s.n_cells);
  CHECK(std::abs(mean - 1.0) < 3.0 * std::sqrt(1.0 / double(s.n_cells)));
}

TEST_CASE("noise is clipped at zero and the batch shift is added after") {
  auto s = small_spec();
  s.noise_sd = 2.0;
  const auto base = generate_tissue(s);
  for (double v : base.data.X.data) CHECK(v >= 0.0);
  s.batch_shift = 3.0;
  s.sample_id = "b_";
  const auto shifted = generate_tissue(s);
  for (std::size_t i = 0; i < base.data.X.size(); ++i)
    CHECK(shifted.data.X.data[i] == doctest::Approx(base.data.X.data[i] + 3.0).epsilon(1e-15));
  CHECK(shifted.data.cell_ids.front() == "b_cell_0");
  REQUIRE(shifted.data.batch_labels.has_value());
  CHECK(shifted.data.batch_labels->front() == "b_");
}

TEST_CASE("summary statistics") {
  std::vector<BenchRun> runs;
  for (double v : {0.2, 0.4, 0.9}) runs.push_back({"a", runs.size(), 0, v, v / 2, 0.0, ""});
  runs.push_back({"a", 3, 0, 0.0, 0.0, 0.0, "boom"});
  runs.push_back({"b", 0, 0, 0.5, 0.5, 0.0, ""});
  const auto s = summarize(runs);
  REQUIRE(s.size() == 2);
  CHECK(s[0].method == "a");
  CHECK(s[0].ok_runs == 3);
  CHECK(s[0].mean_nmi == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s[0].median_nmi == 0.4);
  // sd with n-1: deviations -0.3, -0.1, 0.4 -> (0.09 + 0.01 + 0.16) / 2
  CHECK(s[0].sd_nmi == doctest::Approx(std::sqrt(0.13)).epsilon(1e-14));
  CHECK(s[0].mean_hom == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(s[1].sd_nmi == 0.0);
  CHECK(s[1].median_nmi == 0.5);
}

TEST_CASE("benchmark with oracle, random and failing methods") {
  SyntheticSpec s;  // n = 2000, K = 5
  const auto t = generate_tissue(s);
  pipeline::PipelineConfig cfg;
  std::vector<MethodSpec> methods{{"truth", Method::truth, cfg}, {"random", Method::random, cfg}};
  auto broken = cfg;
  broken.n_domains = 0;  // rejected by the clusterer
  methods.push_back({"baseline_broken", Method::baseline, broken});
  std::size_t callbacks = 0;
  const auto report = run_benchmark(t.data, t.truth, methods, 10, [&](const BenchRun&) { ++callbacks; });
  CHECK(report.runs.size() == methods.size() * 10);
  CHECK(callbacks == report.runs.size());
  for (const auto& r : report.runs) {
    CHECK(r.nmi >= 0.0);
    CHECK(r.nmi <= 1.0);
    CHECK(r.hom >= 0.0);
    CHECK(r.hom <= 1.0);
    if (r.method == "truth") {
      CHECK(r.nmi == 1.0);
      CHECK(r.hom == 1.0);
    }
    if (r.method == "baseline_broken") CHECK_FALSE(r.error.empty());
    else CHECK(r.error.empty());
  }
  CHECK(report.runs[10].seed == cfg.seed);
  CHECK(report.runs[19].seed == cfg.seed + 9);
  REQUIRE(report.summary.size() == 3);
  CHECK(report.summary[1].method == "random");
  CHECK(report.summary[1].mean_nmi < 0.05);
  CHECK(report.summary[2].ok_runs == 0);

  const auto dir = std::filesystem::temp_directory_path() / "cellscape_test_synthbench";
  std::filesystem::create_directories(dir);
  write_report_json(dir / "bench.json", report);
  write_report_csv(dir / "bench.csv", report);
  const auto j = nlohmann::json::parse(io::read_file(dir / "bench.json"));
  CHECK(j["runs"].size() == 30);
  CHECK(j["summary"][0]["nmi"]["mean"] == 1.0);
  CHECK(j["runs"][20].contains("error"));
  const auto lines = io::read_lines(dir / "bench.csv");
  CHECK(lines.size() == 31);
  CHECK(lines[0] == "method,repetition,seed,nmi,hom,seconds,error");
  std::filesystem::remove_all(dir);
}

TEST_CASE("benchmark input checks") {
  const auto t = generate_tissue(small_spec());
  cluster::DomainLabels short_truth{{0, 1}, 2, std::nullopt};
  CHECK_THROWS_AS(run_benchmark(t.data, short_truth, {{"truth", Method::truth, {}}}, 1), DimensionMismatch);
  CHECK_THROWS_AS(run_benchmark(t.data, t.truth, {}, 1), InvalidArgument);
}
