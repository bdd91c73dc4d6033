#include "cellscape/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "cellscape/analysis.hpp"
#include "cellscape/io.hpp"
#include "cellscape/synthbench.hpp"

namespace cellscape::pipeline {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw InvalidArgument(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

long long to_ll(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw InvalidArgument(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw InvalidArgument(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!io::try_parse_double(v, out)) throw InvalidArgument(key + ": expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  std::string s = v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw InvalidArgument(key + ": expected true or false, got '" + v + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

std::string flag_of(const std::string& key) {
  static const std::map<std::string, std::string> special = {
      {"graph.method", "--graph-method"},       {"graph.k", "--graph-k"},
      {"model.heads", "--heads"},               {"cluster.n_domains", "--n-domains"},
      {"simulate.cells", "--sim-cells"},        {"simulate.genes", "--sim-genes"},
      {"simulate.domains", "--sim-domains"},    {"simulate.band_axis", "--sim-band-axis"},
      {"simulate.program_strength", "--sim-program-strength"},
      {"simulate.noise_sd", "--sim-noise-sd"},  {"simulate.batch_shift", "--sim-batch-shift"},
      {"simulate.replicates", "--sim-replicates"}, {"simulate.seed", "--sim-seed"},
      {"bench.repetitions", "--bench-repetitions"}, {"bench.methods", "--bench-methods"},
  };
  if (auto it = special.find(key); it != special.end()) return it->second;
  std::string name = key.substr(key.find('.') + 1);
  std::replace(name.begin(), name.end(), '_', '-');
  return "--" + name;
}

template <class T>
ConfigKey make_key(std::string key, std::string help, T PipelineConfig::*member) {
  ConfigKey k;
  k.flag = flag_of(key);
  k.key = key;
  k.help = std::move(help);
  if constexpr (std::is_same_v<T, bool>) {
    k.is_bool = true;
    k.get = [member](const PipelineConfig& c) { return bool_text(c.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.*member = to_bool(key, v); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    k.get = [member](const PipelineConfig& c) { return c.*member; };
    k.set = [member](PipelineConfig& c, const std::string& v) { c.*member = v; };
  } else if constexpr (std::is_same_v<T, double>) {
    k.get = [member](const PipelineConfig& c) { return io::format_double(c.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.*member = to_real(key, v); };
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    k.get = [member](const PipelineConfig& c) { return std::to_string(c.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.*member = to_u64(key, v); };
  } else if constexpr (std::is_same_v<T, std::size_t>) {
    k.get = [member](const PipelineConfig& c) { return std::to_string(c.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.*member = to_size(key, v); };
  } else {
    static_assert(std::is_same_v<T, long long>);
    k.get = [member](const PipelineConfig& c) { return std::to_string(c.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.*member = to_ll(key, v); };
  }
  return k;
}

// Same as make_key for fields of the nested model config.
template <class T>
ConfigKey model_key(std::string key, std::string help, T model::ModelConfig::*member) {
  ConfigKey k;
  k.flag = flag_of(key);
  k.key = key;
  k.help = std::move(help);
  if constexpr (std::is_same_v<T, bool>) {
    k.is_bool = true;
    k.get = [member](const PipelineConfig& c) { return bool_text(c.model.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.model.*member = to_bool(key, v); };
  } else if constexpr (std::is_same_v<T, double>) {
    k.get = [member](const PipelineConfig& c) { return io::format_double(c.model.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.model.*member = to_real(key, v); };
  } else {
    static_assert(std::is_same_v<T, std::size_t>);
    k.get = [member](const PipelineConfig& c) { return std::to_string(c.model.*member); };
    k.set = [member, key](PipelineConfig& c, const std::string& v) { c.model.*member = to_size(key, v); };
  }
  return k;
}

std::vector<ConfigKey> build_keys() {
  using P = PipelineConfig;
  using M = model::ModelConfig;
  std::vector<ConfigKey> keys;
  keys.push_back(make_key("paths.expression", "expression matrix (genes x cells)", &P::expression));
  keys.push_back(make_key("paths.coords", "cell coordinates CSV (cell_id,x,y)", &P::coords));
  keys.push_back(make_key("paths.labels", "ground-truth domain labels CSV (cell_id,label)", &P::labels));
  keys.push_back(make_key("paths.types", "cell-type labels CSV (cell_id,label)", &P::types));
  keys.push_back(make_key("paths.batches", "batch labels CSV (cell_id,label)", &P::batches));
  keys.push_back(make_key("paths.gene_sets", "gene sets in GMT format", &P::gene_sets));
  keys.push_back(make_key("paths.samples", "comma-separated sample directories", &P::samples));
  keys.push_back(make_key("paths.output", "output directory", &P::output));
  keys.push_back(make_key("paths.format", "expression format: dense-csv or sparse-triplet", &P::format));

  keys.push_back(make_key("preprocess.target_sum", "total-count normalization target", &P::target_sum));
  keys.push_back(make_key("preprocess.n_hvg", "highly variable genes to keep (0 = min(3000, genes))", &P::n_hvg));
  keys.push_back(make_key("preprocess.combat", "batch-correct using the batch labels", &P::combat));

  {
    ConfigKey k;
    k.key = "graph.method";
    k.flag = flag_of(k.key);
    k.help = "spatial graph: auto, knn or delaunay";
    k.get = [](const P& c) { return spatialgraph::to_string(c.graph.method); };
    k.set = [](P& c, const std::string& v) { c.graph.method = spatialgraph::parse_graph_method(v); };
    keys.push_back(k);
    k.key = "graph.k";
    k.flag = flag_of(k.key);
    k.help = "neighbors per cell for the kNN graph";
    k.get = [](const P& c) { return std::to_string(c.graph.k); };
    k.set = [](P& c, const std::string& v) { c.graph.k = to_size("graph.k", v); };
    keys.push_back(k);
    k.key = "graph.prune_percentile";
    k.flag = flag_of(k.key);
    k.help = "Delaunay edges longer than this length percentile are dropped (100 keeps all)";
    k.get = [](const P& c) { return io::format_double(c.graph.prune_percentile); };
    k.set = [](P& c, const std::string& v) { c.graph.prune_percentile = to_real("graph.prune_percentile", v); };
    keys.push_back(k);
  }
  keys.push_back(make_key("layout.swap_budget", "gene-map swap evaluations (-1 = 20 p^2)", &P::swap_budget));

  keys.push_back(model_key("model.gat_layers", "GAT encoder layers", &M::gat_layers));
  keys.push_back(model_key("model.heads", "attention heads per hidden layer", &M::attention_heads));
  keys.push_back(model_key("model.hidden_dim", "hidden GAT width (all heads)", &M::hidden_dim));
  keys.push_back(model_key("model.embed_dim", "spatial embedding width", &M::embed_dim));
  {
    ConfigKey k;
    k.key = "model.cnn_channels";
    k.flag = flag_of(k.key);
    k.help = "CNN block widths, comma-separated";
    k.get = [](const P& c) {
      std::string s;
      for (std::size_t i = 0; i < c.model.cnn_channels.size(); ++i)
        s += (i ? "," : "") + std::to_string(c.model.cnn_channels[i]);
      return s;
    };
    k.set = [](P& c, const std::string& v) {
      std::vector<std::size_t> ch;
      for (const auto& f : io::split_csv(v)) ch.push_back(to_size("model.cnn_channels", trim(f)));
      c.model.cnn_channels = std::move(ch);
    };
    keys.push_back(k);
  }
  keys.push_back(model_key("model.intrinsic_dim", "intrinsic (CNN) embedding width", &M::intrinsic_dim));
  keys.push_back(model_key("model.fused_dim", "fused embedding width", &M::fused_dim));
  keys.push_back(model_key("model.gamma", "scaled cosine error exponent", &M::gamma));
  keys.push_back(model_key("model.tau", "contrastive temperature", &M::tau));
  keys.push_back(model_key("model.mask_ratio", "fraction of cells masked per epoch", &M::mask_ratio));
  keys.push_back(model_key("model.epochs", "training epochs", &M::epochs));
  keys.push_back(model_key("model.lr", "Adam learning rate", &M::learning_rate));
  keys.push_back(model_key("model.weight_decay", "L2 weight decay", &M::weight_decay));
  keys.push_back(model_key("model.lr_halve_every", "halve the learning rate every this many epochs", &M::lr_halve_every));
  keys.push_back(model_key("model.max_anchors", "contrastive anchors sampled per epoch", &M::max_anchors));
  keys.push_back(model_key("model.leaky_slope", "attention LeakyReLU slope", &M::leaky_slope));
  keys.push_back(model_key("model.self_loops", "include each cell in its own attention neighborhood", &M::self_loops));
  keys.push_back(model_key("model.cci_only", "spatial branch only (no gene maps or CNN)", &M::cci_only));

  keys.push_back(make_key("cluster.n_domains", "number of domains K", &P::n_domains));
  keys.push_back(make_key("cluster.pca_k", "PCA components before GMM", &P::pca_k));
  keys.push_back(make_key("cluster.refine", "spatial majority-vote refinement", &P::refine));
  keys.push_back(make_key("cluster.refine_r", "neighbors in the refinement vote", &P::refine_r));
  {
    ConfigKey k;
    k.key = "cluster.segment_input";
    k.flag = flag_of(k.key);
    k.help = "embedding to cluster: spatial or fused";
    k.get = [](const P& c) { return std::string(c.segment_input == SegmentInput::spatial ? "spatial" : "fused"); };
    k.set = [](P& c, const std::string& v) {
      if (v == "spatial") c.segment_input = SegmentInput::spatial;
      else if (v == "fused") c.segment_input = SegmentInput::fused;
      else throw InvalidArgument("cluster.segment_input: expected spatial or fused, got '" + v + "'");
    };
    keys.push_back(k);
    k.key = "analysis.transition_input";
    k.flag = flag_of(k.key);
    k.help = "graph for domain transitions: spatial or embedding";
    k.get = [](const P& c) {
      return std::string(c.transition_input == TransitionInput::spatial_graph ? "spatial" : "embedding");
    };
    k.set = [](P& c, const std::string& v) {
      if (v == "spatial") c.transition_input = TransitionInput::spatial_graph;
      else if (v == "embedding") c.transition_input = TransitionInput::embedding_knn;
      else throw InvalidArgument("analysis.transition_input: expected spatial or embedding, got '" + v + "'");
    };
    keys.push_back(k);
  }
  keys.push_back(make_key("analysis.embedding_k", "neighbors for the embedding kNN graph", &P::embedding_k));
  keys.push_back(make_key("analysis.marker_max_p_adj", "marker adjusted p cutoff", &P::marker_max_p_adj));
  keys.push_back(make_key("analysis.marker_min_log2_fc", "marker minimum log2 fold change", &P::marker_min_log2_fc));
  keys.push_back(make_key("analysis.marker_top", "markers kept per domain", &P::marker_top));

  keys.push_back(make_key("simulate.cells", "synthetic cells", &P::sim_cells));
  keys.push_back(make_key("simulate.genes", "synthetic genes", &P::sim_genes));
  keys.push_back(make_key("simulate.domains", "synthetic domains (bands)", &P::sim_domains));
  keys.push_back(make_key("simulate.band_axis", "band axis: x or y", &P::sim_band_axis));
  keys.push_back(make_key("simulate.program_strength", "mean boost of domain program genes", &P::sim_program_strength));
  keys.push_back(make_key("simulate.noise_sd", "Gaussian noise sd", &P::sim_noise_sd));
  keys.push_back(make_key("simulate.batch_shift", "additive offset per replicate index", &P::sim_batch_shift));
  keys.push_back(make_key("simulate.replicates", "number of replicates", &P::sim_replicates));
  keys.push_back(make_key("simulate.seed", "generator seed", &P::sim_seed));

  keys.push_back(make_key("bench.repetitions", "seeded repetitions per method", &P::bench_repetitions));
  keys.push_back(make_key("bench.methods", "methods: full, baseline, truth, random", &P::bench_methods));

  keys.push_back(make_key("seed", "seed for layout, model and clustering", &P::seed));
  return keys;
}

fs::path out_path(const PipelineConfig& cfg, const char* name) { return fs::path(cfg.output) / name; }

fs::path require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
  return p;
}

const std::string& require_setting(const std::string& value, const char* flag) {
  if (value.empty()) throw InvalidArgument(std::string("no path given for ") + flag);
  return value;
}

void ensure_output(const PipelineConfig& cfg) { fs::create_directories(cfg.output); }

struct CoordTable {
  std::vector<std::string> ids;
  Matrix coords;  // 2 x n
};

CoordTable read_coords(const fs::path& path) {
  const auto lines = io::read_lines(require(path));
  CoordTable t;
  std::vector<double> xs, ys;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (trim(lines[r]).empty()) continue;
    const auto f = io::split_csv(lines[r]);
    if (f.size() != 3) throw ParseError("coordinates need 'cell_id,x,y'", r + 1, f.size());
    t.ids.push_back(f[0]);
    xs.push_back(io::parse_double(f[1], r + 1, 2));
    ys.push_back(io::parse_double(f[2], r + 1, 3));
  }
  t.coords = Matrix(2, xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) t.coords(0, i) = xs[i], t.coords(1, i) = ys[i];
  return t;
}

// Normalized matrix and coordinates left by preprocess or integrate.
ingest::ExpressionDataset load_prepared(const PipelineConfig& cfg) {
  return ingest::load_dataset(require(out_path(cfg, files::normalized)), require(out_path(cfg, files::coords)),
                              ingest::MatrixFormat::dense_csv, false);
}

spatialgraph::SpatialGraph graph_for(const PipelineConfig& cfg, const Matrix& coords, WarningLog* warnings) {
  const auto path = out_path(cfg, files::graph);
  if (fs::exists(path)) {
    auto g = spatialgraph::read_edge_list(path);
    if (g.n_nodes() != coords.cols)
      throw DimensionMismatch("graph nodes in '" + path.string() + "' vs cells", coords.cols, g.n_nodes());
    return g;
  }
  auto g = build_graph(coords, cfg, warnings);
  spatialgraph::write_edge_list(path, g);
  return g;
}

void check_ids(const std::vector<std::string>& expected, const std::vector<std::string>& actual, const fs::path& p) {
  if (expected.size() != actual.size())
    throw DimensionMismatch("rows in '" + p.string() + "' vs cells", expected.size(), actual.size());
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (expected[i] != actual[i])
      throw InvalidArgument("cell order in '" + p.string() + "' differs from coordinates at row " +
                            std::to_string(i + 2) + " ('" + actual[i] + "' vs '" + expected[i] + "')");
}

std::vector<std::string> int_labels(const std::vector<std::uint32_t>& labels) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (auto l : labels) out.push_back(std::to_string(l));
  return out;
}

fs::path optional_input(const std::string& configured, const fs::path& fallback) {
  if (!configured.empty()) return require(configured);
  return fs::exists(fallback) ? fallback : fs::path();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  ingest::parse_matrix_format(format);
  if (!(target_sum > 0.0) || !std::isfinite(target_sum)) throw InvalidArgument("target_sum must be positive");
  if (graph.k == 0) throw InvalidArgument("graph k must be positive");
  if (!(graph.prune_percentile > 0.0 && graph.prune_percentile <= 100.0))
    throw InvalidArgument("prune_percentile must lie in (0, 100]");
  if (swap_budget < -1) throw InvalidArgument("swap_budget must be >= 0, or -1 for the default");
  model.validate();
  if (n_domains == 0) throw InvalidArgument("n_domains must be positive");
  if (pca_k == 0) throw InvalidArgument("pca_k must be positive");
  if (refine_r == 0) throw InvalidArgument("refine_r must be positive");
  if (embedding_k == 0) throw InvalidArgument("embedding_k must be positive");
  if (!(marker_max_p_adj > 0.0 && marker_max_p_adj <= 1.0)) throw InvalidArgument("marker_max_p_adj must lie in (0, 1]");
  if (!std::isfinite(marker_min_log2_fc)) throw InvalidArgument("marker_min_log2_fc must be finite");
  if (marker_top == 0) throw InvalidArgument("marker_top must be positive");
  synthbench::parse_band_axis(sim_band_axis);
  if (sim_replicates == 0) throw InvalidArgument("sim_replicates must be positive");
  if (!std::isfinite(sim_batch_shift)) throw InvalidArgument("sim_batch_shift must be finite");
  if (bench_repetitions == 0) throw InvalidArgument("bench_repetitions must be positive");
  synthbench::parse_methods(bench_methods);
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

const ConfigKey& config_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return k;
  throw InvalidArgument("unknown config key '" + key + "'");
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  std::map<std::string, std::string> out;
  std::string section;
  const auto lines = io::read_lines(path);
  for (std::size_t r = 0; r < lines.size(); ++r) {
    std::string line = lines[r];
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", r + 1, 1);
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", r + 1, 1);
    const std::string name = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (name.empty()) throw ParseError("empty key", r + 1, 1);
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    const std::string key = section.empty() ? name : section + "." + name;
    try {
      config_key(key);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(std::string(e.what()) + " in " + path.string() + " line " + std::to_string(r + 1));
    }
    out[key] = value;
  }
  return out;
}

void apply_config(PipelineConfig& cfg, const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) config_key(key).set(cfg, value);
}

std::string config_to_text(const PipelineConfig& cfg) {
  // Top-level keys first: anything after a section header belongs to it.
  std::ostringstream o;
  for (const auto& k : config_keys())
    if (k.key.find('.') == std::string::npos) o << k.key << " = " << k.get(cfg) << "\n";
  std::string section;
  for (const auto& k : config_keys()) {
    const auto dot = k.key.find('.');
    if (dot == std::string::npos) continue;
    if (k.key.substr(0, dot) != section) {
      section = k.key.substr(0, dot);
      o << "\n[" << section << "]\n";
    }
    o << k.key.substr(dot + 1) << " = " << k.get(cfg) << "\n";
  }
  return o.str();
}

void apply_seed_override(PipelineConfig& cfg) {
  if (const char* env = std::getenv("CELLSCAPE_SEED"); env && *env) {
    cfg.seed = to_u64("CELLSCAPE_SEED", env);
    cfg.model.seed = cfg.seed;
  }
}

// ---------------------------------------------------------------------------
// In-memory stages

ingest::ExpressionDataset preprocess(const ingest::ExpressionDataset& raw, const PipelineConfig& cfg,
                                     WarningLog* warnings) {
  auto ds = ingest::log1p_transform(ingest::normalize_total(raw, cfg.target_sum));
  const std::size_t n_hvg = cfg.n_hvg ? cfg.n_hvg : std::min<std::size_t>(3000, ds.n_genes());
  auto hvg = ingest::select_hvg(ds, n_hvg);
  std::sort(hvg.begin(), hvg.end());  // keep the input gene order
  ds = ingest::subset_genes(ds, hvg);
  if (cfg.combat) {
    if (ds.batch_labels) ds = ingest::combat_correct(ds, warnings);
    else warn(warnings, "batch correction requested but no batch labels were given; skipped");
  }
  return ds;
}

spatialgraph::SpatialGraph build_graph(const Matrix& coords, const PipelineConfig& cfg, WarningLog* warnings) {
  return spatialgraph::build_graph(coords, cfg.graph, warnings);
}

Prepared prepare(const ingest::ExpressionDataset& raw, const PipelineConfig& cfg, WarningLog* warnings) {
  Prepared p;
  p.data = preprocess(raw, cfg, warnings);
  p.coexpression = ingest::pearson_coexpression(p.data);
  p.graph = build_graph(p.data.coords, cfg, warnings);
  if (!cfg.model.cci_only) p.layout = genemap::layout_genes(p.coexpression.C, cfg.seed, cfg.swap_budget);
  return p;
}

cluster::DomainLabels segment(const model::EmbeddingSet& emb, const Matrix& coords, const PipelineConfig& cfg,
                              WarningLog* warnings, const std::vector<std::size_t>& sample_of_cell) {
  const Matrix& Z = cfg.segment_input == SegmentInput::spatial ? emb.z_spatial : emb.z;
  if (Z.rows != coords.cols) throw DimensionMismatch("embedding rows vs cells", coords.cols, Z.rows);
  if (!sample_of_cell.empty() && sample_of_cell.size() != coords.cols)
    throw DimensionMismatch("sample assignments vs cells", coords.cols, sample_of_cell.size());
  const Matrix R = cluster::reduce_for_clustering(Z, cfg.pca_k, warnings);
  auto labels = cluster::gmm_cluster(R, cfg.n_domains, cfg.seed, warnings);
  if (!cfg.refine) return labels;
  if (sample_of_cell.empty()) return cluster::refine_labels(labels, coords, cfg.refine_r);

  const std::size_t n_samples = *std::max_element(sample_of_cell.begin(), sample_of_cell.end()) + 1;
  auto refined = labels;
  for (std::size_t s = 0; s < n_samples; ++s) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < sample_of_cell.size(); ++i)
      if (sample_of_cell[i] == s) idx.push_back(i);
    if (idx.empty()) continue;
    cluster::DomainLabels part;
    part.n_domains = labels.n_domains;
    Matrix xy(2, idx.size());
    for (std::size_t t = 0; t < idx.size(); ++t) {
      part.labels.push_back(labels.labels[idx[t]]);
      xy(0, t) = coords(0, idx[t]);
      xy(1, t) = coords(1, idx[t]);
    }
    const auto r = cluster::refine_labels(part, xy, cfg.refine_r);
    for (std::size_t t = 0; t < idx.size(); ++t) refined.labels[idx[t]] = r.labels[t];
  }
  return refined;
}

FullRun run_full(const Prepared& prep, const PipelineConfig& cfg, WarningLog* warnings,
                 const std::function<void(const model::EpochLog&)>& on_epoch) {
  model::ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  FullRun out;
  out.training = model::train(prep.data, prep.graph, prep.layout ? &*prep.layout : nullptr, mc, warnings, on_epoch);
  out.domains = segment(out.training.embeddings, prep.data.coords, cfg, warnings, prep.sample_of_cell);
  return out;
}

cluster::DomainLabels run_baseline(const ingest::ExpressionDataset& data, const PipelineConfig& cfg,
                                   WarningLog* warnings) {
  const std::size_t n = data.n_cells(), p = data.n_genes();
  Matrix cells(n, p);
  for (std::size_t g = 0; g < p; ++g)
    for (std::size_t i = 0; i < n; ++i) cells(i, g) = data.X(g, i);
  const std::size_t k = std::min({cfg.pca_k, n, p});
  return cluster::gmm_cluster(cluster::pca_reduce(cells, k), cfg.n_domains, cfg.seed, warnings);
}

Integrated integrate(const std::vector<ingest::ExpressionDataset>& samples, const PipelineConfig& cfg,
                     WarningLog* warnings) {
  if (samples.size() < 2) throw InvalidArgument("integration needs at least two samples");
  std::vector<ingest::ExpressionDataset> parts = samples;
  Integrated out;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    parts[s].batch_labels = std::vector<std::string>(parts[s].n_cells(), "sample_" + std::to_string(s));
    out.sample_of_cell.insert(out.sample_of_cell.end(), parts[s].n_cells(), s);
  }
  PipelineConfig c = cfg;
  c.combat = true;
  auto& prep = out.prepared;
  prep.data = preprocess(ingest::concat_cells(parts), c, warnings);
  prep.coexpression = ingest::pearson_coexpression(prep.data);
  std::vector<spatialgraph::SpatialGraph> graphs;
  for (const auto& s : samples) graphs.push_back(build_graph(s.coords, cfg, warnings));
  prep.graph = spatialgraph::block_diagonal_merge(graphs);
  if (!cfg.model.cci_only) prep.layout = genemap::layout_genes(prep.coexpression.C, cfg.seed, cfg.swap_budget);
  prep.sample_of_cell = out.sample_of_cell;
  return out;
}

// ---------------------------------------------------------------------------
// File-backed commands

void cmd_preprocess(const PipelineConfig& cfg, WarningLog* warnings) {
  cfg.validate();
  auto raw = ingest::load_dataset(require_setting(cfg.expression, "--expression"),
                                  require_setting(cfg.coords, "--coords"), ingest::parse_matrix_format(cfg.format));
  if (!cfg.batches.empty()) raw.batch_labels = ingest::load_labels(require(cfg.batches), raw.cell_ids);
  const auto ds = preprocess(raw, cfg, warnings);
  ensure_output(cfg);
  ingest::write_dense_csv(out_path(cfg, files::normalized), ds);
  ingest::write_coords_csv(out_path(cfg, files::coords), ds);
  ingest::write_gene_list(out_path(cfg, files::hvg), ds.gene_names);
  ingest::write_coexpression_csv(out_path(cfg, files::coexpression), ingest::pearson_coexpression(ds), ds.gene_names);
}

void cmd_graph(const PipelineConfig& cfg, WarningLog* warnings) {
  cfg.validate();
  const auto table = read_coords(out_path(cfg, files::coords));
  spatialgraph::write_edge_list(out_path(cfg, files::graph), build_graph(table.coords, cfg, warnings));
}

void cmd_train(const PipelineConfig& cfg, WarningLog* warnings,
               const std::function<void(const model::EpochLog&)>& on_epoch) {
  cfg.validate();
  Prepared prep;
  prep.data = load_prepared(cfg);
  prep.graph = graph_for(cfg, prep.data.coords, warnings);
  if (!cfg.model.cci_only) {
    prep.coexpression = ingest::pearson_coexpression(prep.data);
    prep.layout = genemap::layout_genes(prep.coexpression.C, cfg.seed, cfg.swap_budget);
    genemap::write_layout_csv(out_path(cfg, files::layout), *prep.layout, prep.data.gene_names);
  }
  model::ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  const auto result =
      model::train(prep.data, prep.graph, prep.layout ? &*prep.layout : nullptr, mc, warnings, on_epoch);
  const auto& ids = prep.data.cell_ids;
  model::save_model(out_path(cfg, files::checkpoint), result.state);
  model::write_embedding_csv(out_path(cfg, files::embeddings), result.embeddings.z, ids);
  model::write_embedding_csv(out_path(cfg, files::embeddings_spatial), result.embeddings.z_spatial, ids);
  const auto intrinsic = out_path(cfg, files::embeddings_intrinsic);
  if (result.embeddings.z_intrinsic) model::write_embedding_csv(intrinsic, *result.embeddings.z_intrinsic, ids);
  else fs::remove(intrinsic);
  model::write_training_log(out_path(cfg, files::train_log), result.log);
}

void cmd_segment(const PipelineConfig& cfg, WarningLog* warnings) {
  cfg.validate();
  const auto table = read_coords(out_path(cfg, files::coords));
  const auto path = out_path(cfg, cfg.segment_input == SegmentInput::spatial ? files::embeddings_spatial
                                                                             : files::embeddings);
  auto emb_table = model::read_embedding_csv(require(path));
  check_ids(table.ids, emb_table.cell_ids, path);
  model::EmbeddingSet emb;
  (cfg.segment_input == SegmentInput::spatial ? emb.z_spatial : emb.z) = std::move(emb_table.values);
  // Written by integrate: keeps the refinement vote inside each sample.
  std::vector<std::size_t> samples;
  const auto batches = out_path(cfg, files::batches);
  if (fs::exists(batches)) {
    const auto codes = cluster::encode_labels(ingest::load_labels(batches, table.ids));
    samples.assign(codes.codes.begin(), codes.codes.end());
  }
  cluster::write_domain_csv(out_path(cfg, files::domains), table.ids,
                            segment(emb, table.coords, cfg, warnings, samples));
}

std::pair<double, double> cmd_evaluate(const PipelineConfig& cfg, WarningLog*) {
  cfg.validate();
  const auto table = read_coords(out_path(cfg, files::coords));
  const fs::path truth_path = cfg.labels.empty() ? require(out_path(cfg, files::truth)) : require(cfg.labels);
  const auto truth = cluster::encode_labels(ingest::load_labels(truth_path, table.ids));
  const auto pred = cluster::read_domain_csv(require(out_path(cfg, files::domains)), table.ids);
  const double n = cluster::nmi(truth.codes, pred.labels);
  const double h = cluster::hom(truth.codes, pred.labels);
  cluster::write_metrics_json(out_path(cfg, files::metrics), n, h);
  return {n, h};
}

void cmd_analyze(const PipelineConfig& cfg, WarningLog* warnings) {
  cfg.validate();
  const auto data = load_prepared(cfg);
  const auto domains = cluster::read_domain_csv(require(out_path(cfg, files::domains)), data.cell_ids);

  // Compact ids so every domain below n_domains is populated.
  std::set<std::uint32_t> present(domains.labels.begin(), domains.labels.end());
  std::vector<std::uint32_t> ids(present.begin(), present.end());
  std::map<std::uint32_t, std::uint32_t> compact;
  for (std::size_t i = 0; i < ids.size(); ++i) compact[ids[i]] = static_cast<std::uint32_t>(i);
  cluster::DomainLabels dl;
  dl.n_domains = ids.size();
  for (auto l : domains.labels) dl.labels.push_back(compact[l]);

  spatialgraph::SpatialGraph g;
  if (cfg.transition_input == TransitionInput::spatial_graph) {
    g = graph_for(cfg, data.coords, warnings);
  } else {
    const auto path = out_path(cfg, files::embeddings);
    auto emb = model::read_embedding_csv(require(path));
    check_ids(data.cell_ids, emb.cell_ids, path);
    g = spatialgraph::build_knn_graph_points(emb.values, cfg.embedding_k, warnings);
  }
  auto t = analysis::transition_graph(dl, g);
  t.nodes = ids;
  analysis::write_transition_csv(out_path(cfg, files::transition), t);

  const analysis::MarkerFilter filter{cfg.marker_max_p_adj, cfg.marker_min_log2_fc, cfg.marker_top};
  std::vector<analysis::DomainMarkers> markers;
  for (std::size_t d = 0; d < ids.size(); ++d)
    markers.push_back(
        {ids[d], analysis::select_markers(analysis::wilcoxon_dge(data, dl.labels, static_cast<std::uint32_t>(d)), filter)});
  analysis::write_markers_csv(out_path(cfg, files::markers), markers);

  if (const auto types = optional_input(cfg.types, out_path(cfg, files::types)); !types.empty()) {
    const auto labels = ingest::load_labels(types, data.cell_ids);
    auto comp = analysis::composition(domains.labels, labels, 0, warnings);
    analysis::write_composition_csv(out_path(cfg, files::composition), comp);
  }

  if (!cfg.gene_sets.empty()) {
    const auto sets = analysis::read_gmt(require(cfg.gene_sets));
    std::vector<analysis::DomainEnrichment> enr;
    for (const auto& m : markers) {
      std::vector<std::string> genes;
      for (const auto& t2 : m.tests) genes.push_back(t2.gene);
      enr.push_back({m.domain, analysis::geneset_enrichment(genes, data.gene_names, sets)});
    }
    analysis::write_enrichment_csv(out_path(cfg, files::enrichment), enr);
  }
}

void cmd_integrate(const PipelineConfig& cfg, WarningLog* warnings) {
  cfg.validate();
  std::vector<fs::path> dirs;
  for (const auto& s : io::split_csv(require_setting(cfg.samples, "--samples")))
    if (!trim(s).empty()) dirs.emplace_back(trim(s));
  const auto format = ingest::parse_matrix_format(cfg.format);
  std::vector<ingest::ExpressionDataset> samples;
  for (const auto& d : dirs)
    samples.push_back(ingest::load_dataset(require(d / files::expression), require(d / files::coords), format));
  const auto result = integrate(samples, cfg, warnings);
  const auto& prep = result.prepared;
  ensure_output(cfg);
  ingest::write_dense_csv(out_path(cfg, files::normalized), prep.data);
  ingest::write_coords_csv(out_path(cfg, files::coords), prep.data);
  ingest::write_gene_list(out_path(cfg, files::hvg), prep.data.gene_names);
  ingest::write_coexpression_csv(out_path(cfg, files::coexpression), prep.coexpression, prep.data.gene_names);
  spatialgraph::write_edge_list(out_path(cfg, files::graph), prep.graph);
  ingest::write_labels_csv(out_path(cfg, files::batches), prep.data.cell_ids, *prep.data.batch_labels, "batch");

  // Carry per-sample truth and type labels through when every sample has them.
  for (const char* name : {files::truth, files::types}) {
    std::vector<std::string> merged;
    bool all = true;
    for (std::size_t s = 0; s < dirs.size() && all; ++s) {
      if (!fs::exists(dirs[s] / name)) {
        all = false;
        break;
      }
      const auto l = ingest::load_labels(dirs[s] / name, samples[s].cell_ids);
      merged.insert(merged.end(), l.begin(), l.end());
    }
    if (all) ingest::write_labels_csv(out_path(cfg, name), prep.data.cell_ids, merged);
  }
}

void cmd_simulate(const PipelineConfig& cfg, WarningLog*) {
  cfg.validate();
  ensure_output(cfg);
  for (std::size_t r = 0; r < cfg.sim_replicates; ++r) {
    synthbench::SyntheticSpec spec;
    spec.n_cells = cfg.sim_cells;
    spec.n_genes = cfg.sim_genes;
    spec.n_domains = cfg.sim_domains;
    spec.band_axis = synthbench::parse_band_axis(cfg.sim_band_axis);
    spec.program_strength = cfg.sim_program_strength;
    spec.noise_sd = cfg.sim_noise_sd;
    const bool multi = cfg.sim_replicates > 1;
    const double shift = cfg.sim_batch_shift * static_cast<double>(multi ? r : 1);
    if (shift != 0.0) spec.batch_shift = shift;
    spec.seed = cfg.sim_seed + r;
    if (multi) spec.sample_id = "r" + std::to_string(r) + "_";
    const auto tissue = synthbench::generate_tissue(spec);
    const fs::path dir = multi ? fs::path(cfg.output) / ("sample_" + std::to_string(r)) : fs::path(cfg.output);
    fs::create_directories(dir);
    const auto& ds = tissue.data;
    ingest::write_dense_csv(dir / files::expression, ds);
    ingest::write_coords_csv(dir / files::coords, ds);
    ingest::write_labels_csv(dir / files::truth, ds.cell_ids, int_labels(tissue.truth.labels), "domain");
    ingest::write_labels_csv(dir / files::types, ds.cell_ids, *ds.type_labels, "type");
  }
}

void cmd_bench(const PipelineConfig& cfg, WarningLog*, const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  ingest::ExpressionDataset raw;
  cluster::DomainLabels truth;
  if (!cfg.expression.empty()) {
    raw = ingest::load_dataset(cfg.expression, require_setting(cfg.coords, "--coords"),
                               ingest::parse_matrix_format(cfg.format));
    const auto enc =
        cluster::encode_labels(ingest::load_labels(require(require_setting(cfg.labels, "--labels")), raw.cell_ids));
    truth.labels = enc.codes;
    truth.n_domains = enc.names.size();
  } else {
    synthbench::SyntheticSpec spec;
    spec.n_cells = cfg.sim_cells;
    spec.n_genes = cfg.sim_genes;
    spec.n_domains = cfg.sim_domains;
    spec.band_axis = synthbench::parse_band_axis(cfg.sim_band_axis);
    spec.program_strength = cfg.sim_program_strength;
    spec.noise_sd = cfg.sim_noise_sd;
    if (cfg.sim_batch_shift != 0.0) spec.batch_shift = cfg.sim_batch_shift;
    spec.seed = cfg.sim_seed;
    auto tissue = synthbench::generate_tissue(spec);
    raw = std::move(tissue.data);
    truth = std::move(tissue.truth);
  }
  std::vector<synthbench::MethodSpec> methods;
  for (auto m : synthbench::parse_methods(cfg.bench_methods)) methods.push_back({synthbench::to_string(m), m, cfg});
  const auto report = synthbench::run_benchmark(raw, truth, methods, cfg.bench_repetitions, [&](const auto& run) {
    if (!progress) return;
    std::ostringstream o;
    o << run.method << " rep " << run.repetition << " seed " << run.seed << ": ";
    if (run.error.empty()) o << "nmi " << io::format_double(run.nmi) << " hom " << io::format_double(run.hom);
    else o << "failed: " << run.error;
    o << " (" << io::format_double(std::round(run.seconds * 100.0) / 100.0) << " s)";
    progress(o.str());
  });
  ensure_output(cfg);
  synthbench::write_report_json(out_path(cfg, files::bench_json), report);
  synthbench::write_report_csv(out_path(cfg, files::bench_csv), report);
}

}  // namespace cellscape::pipeline
