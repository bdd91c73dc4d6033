#pragma once

// End-to-end composition of the modules, shared by the command-line tool,
// the benchmark harness and the acceptance checks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/cluster.hpp"
#include "cellscape/error.hpp"
#include "cellscape/genemap.hpp"
#include "cellscape/ingest.hpp"
#include "cellscape/model.hpp"
#include "cellscape/spatialgraph.hpp"

namespace cellscape::pipeline {

enum class SegmentInput { spatial, fused };
enum class TransitionInput { spatial_graph, embedding_knn };

struct PipelineConfig {
  // paths
  std::string expression;
  std::string coords;
  std::string labels;  // ground-truth domains (evaluate / bench)
  std::string types;   // cell-type labels (composition)
  std::string batches; // batch labels (combat within one sample)
  std::string gene_sets;
  std::string samples;  // comma-separated sample directories (integrate)
  std::string output = "cellscape_out";
  std::string format = "dense-csv";

  // preprocessing
  double target_sum = 1e4;
  std::size_t n_hvg = 0;  // 0 = min(3000, p)
  bool combat = false;

  spatialgraph::GraphOptions graph;
  long long swap_budget = -1;  // -1 = 20 p^2

  model::ModelConfig model;

  // clustering
  std::size_t n_domains = 5;
  std::size_t pca_k = 30;
  bool refine = true;
  std::size_t refine_r = 15;
  SegmentInput segment_input = SegmentInput::spatial;

  // analysis
  TransitionInput transition_input = TransitionInput::spatial_graph;
  std::size_t embedding_k = 10;
  double marker_max_p_adj = 0.05;
  double marker_min_log2_fc = 0.25;
  std::size_t marker_top = 5;

  // simulate / bench
  std::size_t sim_cells = 2000;
  std::size_t sim_genes = 200;
  std::size_t sim_domains = 5;
  std::string sim_band_axis = "x";
  double sim_program_strength = 5.0;
  double sim_noise_sd = 0.5;
  double sim_batch_shift = 0.0;
  std::size_t sim_replicates = 1;  // > 1 writes sample_<r>/ directories, replicate r shifted by r * batch_shift
  std::uint64_t sim_seed = 7;
  std::size_t bench_repetitions = 5;
  std::string bench_methods = "full,baseline,truth,random";

  std::uint64_t seed = 0;

  void validate() const;
};

/// One configurable value: dotted config-file key, flag name, help text,
/// and string conversions in both directions.
struct ConfigKey {
  std::string key;   // e.g. "model.epochs"
  std::string flag;  // e.g. "--epochs"
  std::string help;
  bool is_bool = false;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();
const ConfigKey& config_key(const std::string& key);

/// `[section]` headers, `key = value` lines, `#` comments. Keys are returned
/// fully qualified ("section.key").
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
void apply_config(PipelineConfig& cfg, const std::map<std::string, std::string>& values);
std::string config_to_text(const PipelineConfig& cfg);

/// CELLSCAPE_SEED, when set, replaces cfg.seed. Every stage seeds from
/// cfg.seed; cfg.model.seed is overwritten before training.
void apply_seed_override(PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// In-memory stages

/// normalize_total -> log1p -> HVG subset. Batch correction when requested and
/// batch labels are present.
ingest::ExpressionDataset preprocess(const ingest::ExpressionDataset& raw, const PipelineConfig& cfg,
                                     WarningLog* warnings = nullptr);

spatialgraph::SpatialGraph build_graph(const Matrix& coords, const PipelineConfig& cfg, WarningLog* warnings = nullptr);

struct Prepared {
  ingest::ExpressionDataset data;  // log-normalized HVGs
  ingest::CoexpressionMatrix coexpression;
  spatialgraph::SpatialGraph graph;
  std::optional<genemap::GeneLayout> layout;  // absent in cci_only mode
  std::vector<std::size_t> sample_of_cell;    // empty for a single sample
};

Prepared prepare(const ingest::ExpressionDataset& raw, const PipelineConfig& cfg, WarningLog* warnings = nullptr);

/// PCA (skipped when the embedding width is <= pca_k), GMM, optional refinement.
/// With `sample_of_cell`, the refinement vote only looks at cells of the same
/// sample, since coordinates of different sections share one frame.
cluster::DomainLabels segment(const model::EmbeddingSet& emb, const Matrix& coords, const PipelineConfig& cfg,
                              WarningLog* warnings = nullptr, const std::vector<std::size_t>& sample_of_cell = {});

struct FullRun {
  model::TrainResult training;
  cluster::DomainLabels domains;
};

FullRun run_full(const Prepared& prep, const PipelineConfig& cfg, WarningLog* warnings = nullptr,
                 const std::function<void(const model::EpochLog&)>& on_epoch = {});

/// Non-spatial control: PCA of the cells' expression, then GMM; no refinement.
cluster::DomainLabels run_baseline(const ingest::ExpressionDataset& data, const PipelineConfig& cfg,
                                   WarningLog* warnings = nullptr);

/// Multi-sample integration: concatenation (genes must match), batch
/// correction on the log-normalized HVGs and a block-diagonal graph.
struct Integrated {
  Prepared prepared;
  std::vector<std::size_t> sample_of_cell;
};
Integrated integrate(const std::vector<ingest::ExpressionDataset>& samples, const PipelineConfig& cfg,
                     WarningLog* warnings = nullptr);

// ---------------------------------------------------------------------------
// File-backed commands. Each reads its inputs from cfg paths or from the
// artifacts earlier commands left in cfg.output.

namespace files {
inline constexpr const char* normalized = "normalized.csv";
inline constexpr const char* coords = "coords.csv";
inline constexpr const char* hvg = "hvg.txt";
inline constexpr const char* coexpression = "coexpression.csv";
inline constexpr const char* graph = "graph.txt";
inline constexpr const char* layout = "layout.csv";
inline constexpr const char* checkpoint = "model.csk";
inline constexpr const char* embeddings = "embeddings.csv";
inline constexpr const char* embeddings_spatial = "embeddings_spatial.csv";
inline constexpr const char* embeddings_intrinsic = "embeddings_intrinsic.csv";
inline constexpr const char* train_log = "train_log.jsonl";
inline constexpr const char* domains = "domains.csv";
inline constexpr const char* metrics = "metrics.json";
inline constexpr const char* transition = "transition.csv";
inline constexpr const char* markers = "markers.csv";
inline constexpr const char* composition = "composition.csv";
inline constexpr const char* enrichment = "enrichment.csv";
inline constexpr const char* expression = "expression.csv";
inline constexpr const char* truth = "labels.csv";
inline constexpr const char* types = "types.csv";
inline constexpr const char* batches = "batches.csv";
inline constexpr const char* bench_json = "bench.json";
inline constexpr const char* bench_csv = "bench.csv";
}  // namespace files

void cmd_preprocess(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_graph(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_train(const PipelineConfig& cfg, WarningLog* warnings = nullptr,
               const std::function<void(const model::EpochLog&)>& on_epoch = {});
void cmd_segment(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
/// Returns {nmi, hom}.
std::pair<double, double> cmd_evaluate(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_analyze(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_integrate(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_simulate(const PipelineConfig& cfg, WarningLog* warnings = nullptr);
void cmd_bench(const PipelineConfig& cfg, WarningLog* warnings = nullptr,
               const std::function<void(const std::string&)>& progress = {});

/// Thrown when a command needs an artifact that is not on disk.
class MissingArtifact : public IoError {
 public:
  explicit MissingArtifact(const std::filesystem::path& p)
      : IoError("missing input '" + p.string() + "'; run the producing command first or set its path"), path_(p) {}
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace cellscape::pipeline
