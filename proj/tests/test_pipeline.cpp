#include "doctest.h"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include <json.hpp>

#include "cellscape/io.hpp"
#include "cellscape/pipeline.hpp"
#include "cellscape/synthbench.hpp"

using namespace cellscape;
using namespace cellscape::pipeline;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig c;
  c.output = out.string();
  c.sim_cells = 200;
  c.sim_genes = 40;
  c.sim_domains = 3;
  c.n_domains = 3;
  c.model.epochs = 2;
  c.model.hidden_dim = 32;
  c.model.embed_dim = 16;
  c.model.intrinsic_dim = 16;
  c.model.fused_dim = 16;
  c.model.cnn_channels = {4, 8};
  return c;
}

// simulate + preprocess into `out`
PipelineConfig simulated_and_preprocessed(const fs::path& out) {
  auto c = small_config(out);
  cmd_simulate(c);
  c.expression = (out / files::expression).string();
  c.coords = (out / files::coords).string();
  cmd_preprocess(c);
  return c;
}

void write(const fs::path& p, const std::string& text) { io::write_text(p, text); }

}  // namespace

TEST_CASE("config keys are unique and round-trip through text") {
  std::set<std::string> keys, flags;
  for (const auto& k : config_keys()) {
    CHECK(keys.insert(k.key).second);
    CHECK(flags.insert(k.flag).second);
    CHECK(k.flag.rfind("--", 0) == 0);
    CHECK_FALSE(k.help.empty());
  }
  CHECK(config_key("model.epochs").flag == "--epochs");
  CHECK(config_key("model.cci_only").flag == "--cci-only");
  CHECK(config_key("cluster.n_domains").flag == "--n-domains");
  CHECK_THROWS_AS(config_key("model.nope"), InvalidArgument);

  PipelineConfig c;
  c.seed = 42;
  c.model.epochs = 17;
  c.model.cnn_channels = {3, 5, 7};
  c.graph.method = spatialgraph::GraphMethod::delaunay;
  c.segment_input = SegmentInput::fused;
  c.transition_input = TransitionInput::embedding_knn;
  c.combat = true;
  c.target_sum = 0.1;
  c.swap_budget = 0;
  TempDir dir("cellscape_test_cfg");
  write(dir.path / "c.ini", config_to_text(c));
  PipelineConfig back;
  apply_config(back, read_config_file(dir.path / "c.ini"));
  CHECK(config_to_text(back) == config_to_text(c));
  CHECK(back.seed == 42);
  CHECK(back.model.cnn_channels == std::vector<std::size_t>{3, 5, 7});
  CHECK(back.segment_input == SegmentInput::fused);
  CHECK(back.target_sum == 0.1);
}

TEST_CASE("config file syntax") {
  TempDir dir("cellscape_test_cfg_syntax");
  write(dir.path / "a.ini",
        "# comment\nseed = 9\n\n[model]\nepochs = 3   # trailing\ncci_only = yes\n[paths]\noutput = \"my out\"\n");
  const auto v = read_config_file(dir.path / "a.ini");
  CHECK(v.at("seed") == "9");
  CHECK(v.at("model.epochs") == "3");
  CHECK(v.at("paths.output") == "my out");
  PipelineConfig c;
  apply_config(c, v);
  CHECK(c.seed == 9);
  CHECK(c.model.epochs == 3);
  CHECK(c.model.cci_only);
  CHECK(c.output == "my out");

  write(dir.path / "b.ini", "[model]\nepochz = 3\n");
  CHECK_THROWS_AS(read_config_file(dir.path / "b.ini"), InvalidArgument);
  write(dir.path / "c.ini", "[model\n");
  CHECK_THROWS_AS(read_config_file(dir.path / "c.ini"), ParseError);
  write(dir.path / "d.ini", "epochs\n");
  CHECK_THROWS_AS(read_config_file(dir.path / "d.ini"), ParseError);
  CHECK_THROWS_AS(read_config_file(dir.path / "missing.ini"), IoError);
  CHECK_THROWS_AS(config_key("model.epochs").set(c, "-1"), InvalidArgument);
  CHECK_THROWS_AS(config_key("model.self_loops").set(c, "maybe"), InvalidArgument);
  CHECK_THROWS_AS(config_key("graph.method").set(c, "voronoi"), InvalidArgument);
}

TEST_CASE("seed override from the environment") {
  PipelineConfig c;
  c.seed = 1;
  ::setenv("CELLSCAPE_SEED", "123", 1);
  apply_seed_override(c);
  ::unsetenv("CELLSCAPE_SEED");
  CHECK(c.seed == 123);
  CHECK(c.model.seed == 123);
  apply_seed_override(c);
  CHECK(c.seed == 123);
  ::setenv("CELLSCAPE_SEED", "x", 1);
  CHECK_THROWS_AS(apply_seed_override(c), InvalidArgument);
  ::unsetenv("CELLSCAPE_SEED");
}

TEST_CASE("validation rejects out-of-range settings") {
  CHECK_NOTHROW(PipelineConfig{}.validate());
  auto bad = [](auto mutate) {
    PipelineConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
  };
  bad([](PipelineConfig& c) { c.target_sum = 0; });
  bad([](PipelineConfig& c) { c.graph.k = 0; });
  bad([](PipelineConfig& c) { c.graph.prune_percentile = 0; });
  bad([](PipelineConfig& c) { c.swap_budget = -2; });
  bad([](PipelineConfig& c) { c.n_domains = 0; });
  bad([](PipelineConfig& c) { c.pca_k = 0; });
  bad([](PipelineConfig& c) { c.model.mask_ratio = 1.0; });
  bad([](PipelineConfig& c) { c.format = "h5ad"; });
  bad([](PipelineConfig& c) { c.sim_band_axis = "z"; });
  bad([](PipelineConfig& c) { c.bench_methods = "full,umap"; });
  bad([](PipelineConfig& c) { c.marker_max_p_adj = 0; });
}

TEST_CASE("preprocess keeps the input gene order of the selected genes") {
  synthbench::SyntheticSpec s;
  s.n_cells = 150;
  s.n_genes = 30;
  s.n_domains = 3;
  const auto t = synthbench::generate_tissue(s);
  PipelineConfig c;
  c.n_hvg = 12;
  const auto ds = preprocess(t.data, c);
  REQUIRE(ds.n_genes() == 12);
  for (std::size_t i = 1; i < ds.gene_names.size(); ++i) {
    const auto a = std::stoul(ds.gene_names[i - 1].substr(5)), b = std::stoul(ds.gene_names[i].substr(5));
    CHECK(a < b);
  }
  const auto top = ingest::select_hvg(ingest::log1p_transform(ingest::normalize_total(t.data, c.target_sum)), 12);
  std::set<std::string> expected;
  for (auto g : top) expected.insert(t.data.gene_names[g]);
  CHECK(std::set<std::string>(ds.gene_names.begin(), ds.gene_names.end()) == expected);

  c.n_hvg = 31;
  CHECK_THROWS_AS(preprocess(t.data, c), InvalidArgument);

  WarningLog w;
  c.n_hvg = 0;
  c.combat = true;
  preprocess(t.data, c, &w);
  CHECK(w.contains("no batch labels"));
}

TEST_CASE("integration corrects batch means and keeps samples disconnected") {
  std::vector<ingest::ExpressionDataset> samples;
  for (int r = 0; r < 2; ++r) {
    synthbench::SyntheticSpec s;
    s.n_cells = 250;
    s.n_genes = 30;
    s.n_domains = 3;
    s.seed = 7 + r;
    s.sample_id = "r" + std::to_string(r) + "_";
    if (r == 1) s.batch_shift = 3.0;
    samples.push_back(synthbench::generate_tissue(s).data);
  }
  PipelineConfig c;
  c.model.cci_only = true;
  WarningLog w;
  const auto in = integrate(samples, c, &w);
  const auto& ds = in.prepared.data;
  REQUIRE(ds.n_cells() == 500);
  CHECK(in.sample_of_cell[249] == 0);
  CHECK(in.sample_of_cell[250] == 1);
  CHECK_FALSE(in.prepared.layout.has_value());
  for (std::size_t g = 0; g < ds.n_genes(); ++g) {
    double m[2] = {0, 0};
    for (std::size_t i = 0; i < 500; ++i) m[in.sample_of_cell[i]] += ds.X(g, i) / 250.0;
    CHECK(std::abs(m[0] - m[1]) < 1e-6);
  }
  std::size_t intra = 0;
  for (const auto& e : in.prepared.graph.edges()) {
    CHECK(in.sample_of_cell[e.i] == in.sample_of_cell[e.j]);
    ++intra;
  }
  const auto g0 = build_graph(samples[0].coords, c), g1 = build_graph(samples[1].coords, c);
  CHECK(intra == g0.n_edges() + g1.n_edges());
  CHECK_THROWS_AS(integrate({samples[0]}, c), InvalidArgument);
}

TEST_CASE("baseline and segmentation on a synthetic tissue") {
  synthbench::SyntheticSpec s;
  s.n_cells = 400;
  s.n_genes = 40;
  s.n_domains = 4;
  const auto t = synthbench::generate_tissue(s);
  PipelineConfig c;
  c.n_domains = 4;
  const auto b = run_baseline(preprocess(t.data, c), c);
  CHECK(b.labels.size() == 400);
  CHECK(cluster::nmi(t.truth.labels, b.labels) > 0.8);

  // Segmentation of a perfect embedding (one-hot truth) recovers the bands.
  model::EmbeddingSet emb;
  emb.z_spatial = Matrix(400, 4);
  for (std::size_t i = 0; i < 400; ++i) emb.z_spatial(i, t.truth.labels[i]) = 1.0 + 0.01 * double(i % 7);
  WarningLog w;
  c.refine = false;
  const auto d = segment(emb, t.data.coords, c, &w);
  CHECK(cluster::nmi(t.truth.labels, d.labels) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.contains("PCA skipped"));
  // The spatial vote only moves a few cells near band edges; interior cells keep their label.
  c.refine = true;
  const auto r = segment(emb, t.data.coords, c);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    if (r.labels[i] == d.labels[i]) continue;
    ++moved;
    const double x = t.data.coords(0, i) * 4.0;
    CHECK(std::abs(x - std::round(x)) < 0.25);  // within 1/16 of an edge
  }
  CHECK(moved < 40);
  c.segment_input = SegmentInput::fused;
  CHECK_THROWS_AS(segment(emb, t.data.coords, c), DimensionMismatch);
}

TEST_CASE("refinement stays inside each sample") {
  // Two sections in one coordinate frame with mirrored band labels.
  synthbench::SyntheticSpec s;
  s.n_cells = 300;
  s.n_genes = 40;
  s.n_domains = 3;
  const auto t = synthbench::generate_tissue(s);
  Matrix coords(2, 600);
  model::EmbeddingSet emb;
  emb.z_spatial = Matrix(600, 3);
  std::vector<std::size_t> samples(600);
  for (std::size_t i = 0; i < 600; ++i) {
    const std::size_t j = i % 300;
    samples[i] = i / 300;
    coords(0, i) = t.data.coords(0, j);
    coords(1, i) = t.data.coords(1, j);
    const auto band = t.truth.labels[j];
    emb.z_spatial(i, samples[i] ? 2 - band : band) = 1.0 + 0.01 * double(i % 5);
  }
  PipelineConfig c;
  c.n_domains = 3;
  c.refine = false;
  const auto raw = segment(emb, coords, c);
  c.refine = true;
  const auto per_sample = segment(emb, coords, c, nullptr, samples);
  for (std::size_t h = 0; h < 2; ++h) {
    cluster::DomainLabels part;
    part.n_domains = 3;
    part.labels.assign(raw.labels.begin() + h * 300, raw.labels.begin() + (h + 1) * 300);
    const auto expected = cluster::refine_labels(part, t.data.coords, c.refine_r);
    CHECK(std::equal(expected.labels.begin(), expected.labels.end(), per_sample.labels.begin() + h * 300));
  }
  // Pooled voting mixes the mirrored sections.
  const auto pooled = segment(emb, coords, c);
  CHECK(cluster::nmi(raw.labels, pooled.labels) < cluster::nmi(raw.labels, per_sample.labels));
  CHECK_THROWS_AS(segment(emb, coords, c, nullptr, std::vector<std::size_t>(5, 0)), DimensionMismatch);
}

TEST_CASE("file commands chain end to end") {
  TempDir dir("cellscape_test_chain");
  auto c = simulated_and_preprocessed(dir.path);
  for (const char* f : {files::normalized, files::coords, files::hvg, files::coexpression})
    CHECK(fs::exists(dir.path / f));
  cmd_graph(c);
  CHECK(fs::exists(dir.path / files::graph));
  cmd_train(c);
  for (const char* f : {files::checkpoint, files::embeddings, files::embeddings_spatial, files::embeddings_intrinsic,
                        files::train_log, files::layout})
    CHECK(fs::exists(dir.path / f));
  const auto first = io::read_file(dir.path / files::embeddings);
  cmd_train(c);
  CHECK(io::read_file(dir.path / files::embeddings) == first);

  cmd_segment(c);
  const auto [nmi, hom] = cmd_evaluate(c);
  const auto j = nlohmann::json::parse(io::read_file(dir.path / files::metrics));
  CHECK(j.contains("nmi"));
  CHECK(j.contains("hom"));
  CHECK(j["nmi"].get<double>() == nmi);
  CHECK(hom >= 0.0);

  write(dir.path / "sets.gmt", "s1\tx\tgene_0\tgene_1\n");
  c.gene_sets = (dir.path / "sets.gmt").string();
  cmd_analyze(c);
  for (const char* f : {files::transition, files::markers, files::composition, files::enrichment})
    CHECK(fs::exists(dir.path / f));
  CHECK(io::read_lines(dir.path / files::markers).front() == "domain,gene,u,p,p_adj,log2_fc,frac_in,frac_out");
  c.transition_input = TransitionInput::embedding_knn;
  CHECK_NOTHROW(cmd_analyze(c));

  // Spatial-only mode drops the intrinsic file and keeps the spatial one.
  c.model.cci_only = true;
  cmd_train(c);
  CHECK_FALSE(fs::exists(dir.path / files::embeddings_intrinsic));
  CHECK(fs::exists(dir.path / files::embeddings_spatial));

  // Different seed, different embedding.
  c.model.cci_only = false;
  c.seed = 5;
  cmd_train(c);
  CHECK(io::read_file(dir.path / files::embeddings) != first);
}

TEST_CASE("missing inputs name the expected path") {
  TempDir dir("cellscape_test_missing");
  auto c = small_config(dir.path);
  try {
    cmd_segment(c);
    FAIL("expected MissingArtifact");
  } catch (const MissingArtifact& e) {
    CHECK(e.path() == dir.path / files::coords);
    CHECK(std::string(e.what()).find((dir.path / files::coords).string()) != std::string::npos);
  }
  c.expression = (dir.path / "nope.csv").string();
  c.coords = (dir.path / "nope_coords.csv").string();
  try {
    cmd_preprocess(c);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("nope.csv") != std::string::npos);
  }
  c.expression.clear();
  CHECK_THROWS_AS(cmd_preprocess(c), InvalidArgument);
  CHECK_THROWS_AS(cmd_integrate(c), InvalidArgument);
}

TEST_CASE("evaluate rejects label files that do not match the cells") {
  TempDir dir("cellscape_test_eval");
  auto c = simulated_and_preprocessed(dir.path);
  // Hand-made domains so no training is needed.
  const auto lines = io::read_lines(dir.path / files::truth);
  std::string dom = "cell_id,domain\n";
  for (std::size_t i = 1; i < lines.size(); ++i) dom += io::split_csv(lines[i])[0] + ",0\n";
  write(dir.path / files::domains, dom);
  const auto [nmi, hom] = cmd_evaluate(c);
  CHECK(nmi == 0.0);
  CHECK(hom == 0.0);
  std::string shorter = "cell_id,domain\n";
  for (std::size_t i = 1; i + 1 < lines.size(); ++i) shorter += lines[i] + "\n";
  write(dir.path / "short.csv", shorter);
  c.labels = (dir.path / "short.csv").string();
  CHECK_THROWS_AS(cmd_evaluate(c), DimensionMismatch);
}

TEST_CASE("integrate command writes a merged graph without cross-sample edges") {
  TempDir dir("cellscape_test_integrate");
  auto c = small_config(dir.path / "sim");
  c.sim_replicates = 2;
  c.sim_batch_shift = 3.0;
  cmd_simulate(c);
  c.samples = (dir.path / "sim" / "sample_0").string() + "," + (dir.path / "sim" / "sample_1").string();
  c.output = (dir.path / "int").string();
  cmd_integrate(c);
  // Edge-list scan: each endpoint must map to the same sample via its cell id prefix.
  const auto coords = io::read_lines(dir.path / "int" / files::coords);
  std::vector<std::string> sample;
  for (std::size_t i = 1; i < coords.size(); ++i) sample.push_back(coords[i].substr(0, 3));
  REQUIRE(sample.size() == 400);
  const auto edges = io::read_lines(dir.path / "int" / files::graph);
  std::size_t scanned = 0;
  for (const auto& line : edges) {
    if (line.empty() || line[0] == '%') continue;
    const auto f = io::split_ws(line);
    REQUIRE(f.size() == 3);
    CHECK(sample[std::stoul(f[0])] == sample[std::stoul(f[1])]);
    ++scanned;
  }
  CHECK(scanned > 400);
  CHECK(fs::exists(dir.path / "int" / files::truth));
  CHECK(fs::exists(dir.path / "int" / files::batches));
  // The merged graph is picked up by training.
  c.output = (dir.path / "int").string();
  CHECK_NOTHROW(cmd_train(c));
}

TEST_CASE("one-epoch training smoke run on 200 synthetic cells") {
  TempDir dir("cellscape_test_smoke");
  PipelineConfig c;
  c.output = dir.path.string();
  c.sim_cells = 200;
  cmd_simulate(c);
  c.expression = (dir.path / files::expression).string();
  c.coords = (dir.path / files::coords).string();
  cmd_preprocess(c);
  c.model.epochs = 1;
  const auto t0 = std::chrono::steady_clock::now();
  cmd_train(c);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("one-epoch train: " << seconds << " s");
  CHECK(seconds < 30.0);
}

TEST_CASE("bench command writes both reports") {
  TempDir dir("cellscape_test_bench");
  auto c = small_config(dir.path);
  c.bench_methods = "baseline,truth,random";
  c.bench_repetitions = 2;
  std::vector<std::string> lines;
  cmd_bench(c, nullptr, [&](const std::string& l) { lines.push_back(l); });
  CHECK(lines.size() == 6);
  const auto j = nlohmann::json::parse(io::read_file(dir.path / files::bench_json));
  CHECK(j["runs"].size() == 6);
  CHECK(j["summary"][1]["nmi"]["mean"] == 1.0);
  CHECK(io::read_lines(dir.path / files::bench_csv).size() == 7);
}
