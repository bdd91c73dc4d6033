#pragma once

// Dual-branch encoder: a GAT over the spatial graph and a CNN over per-cell
// gene maps, fused by a linear projection and decoded back to expression by
// a single GAT layer.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/diffcore/checkpoint.hpp"
#include "cellscape/diffcore/ops.hpp"
#include "cellscape/diffcore/optim.hpp"
#include "cellscape/error.hpp"
#include "cellscape/genemap.hpp"
#include "cellscape/ingest.hpp"
#include "cellscape/matrix.hpp"
#include "cellscape/spatialgraph.hpp"

namespace cellscape::model {

struct ModelConfig {
  std::size_t gat_layers = 2;
  std::size_t attention_heads = 4;
  std::size_t hidden_dim = 128;  // total width of a hidden GAT layer (all heads)
  std::size_t embed_dim = 64;    // spatial embedding d_s
  std::vector<std::size_t> cnn_channels{16, 32};
  std::size_t intrinsic_dim = 64;
  std::size_t fused_dim = 64;
  double gamma = 3.0;
  double tau = 0.1;
  double mask_ratio = 0.3;
  std::size_t epochs = 400;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  std::size_t lr_halve_every = 50;
  std::size_t max_anchors = 4096;
  double leaky_slope = 0.2;
  bool self_loops = true;
  bool cci_only = false;

  void validate() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

struct ModelState {
  ModelConfig config;
  std::size_t n_genes = 0;
  std::size_t q = 0;  // gene-map side; 0 when the CNN branch is absent
  std::vector<std::string> names;
  std::vector<ad::Tensor> params;
  std::vector<ad::BatchNormState> norms;  // one per CNN block
  ad::OptimizerState optimizer;

  const ad::Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;
};

/// Glorot-uniform weights, zero biases, unit batch-norm scales.
ModelState init_model(const ModelConfig& cfg, std::size_t n_genes, std::size_t q);

/// Attention neighborhoods (graph neighbors plus the node itself when
/// `self_loops`) and contrastive positives (graph neighbors only).
ad::Csr attention_csr(const spatialgraph::SpatialGraph& g, bool self_loops);
ad::Csr positive_csr(const spatialgraph::SpatialGraph& g);

enum class Activation { identity, elu };

/// One multi-head attention layer. Heads are concatenated or averaged.
ad::Tensor gat_layer(const ad::Tensor& h, const ad::Csr& neighborhood, const ad::Tensor& weight,
                     const ad::Tensor& att_src, const ad::Tensor& att_dst, std::size_t heads, bool concat_heads,
                     Activation activation, double slope = 0.2, std::vector<double>* attention = nullptr);

/// Maps [n, q, q, 1] -> [n, intrinsic_dim]. Batch norm uses batch statistics
/// when `training` and the running estimates otherwise.
ad::Tensor cnn_encode(ModelState& state, const ad::Tensor& maps, bool training);

/// z = [z_sp | z_in] W^T with W of shape [d, d_s + d_i]. z_in may be undefined
/// (spatial-only model).
ad::Tensor fuse(const ad::Tensor& z_sp, const ad::Tensor& z_in, const ad::Tensor& w);

struct ForwardResult {
  ad::Tensor z_spatial;
  ad::Tensor z_intrinsic;  // undefined in cci_only mode
  ad::Tensor z;            // fused, not normalized
  ad::Tensor x_hat;
};

/// features: [n, p] (cells as rows); maps: [n, q, q, 1] or undefined in
/// cci_only mode.
ForwardResult forward(ModelState& state, const ad::Tensor& features, const ad::Tensor& maps,
                      const ad::Csr& attention, bool training);

struct LossTerms {
  ad::Tensor recon;
  ad::Tensor contrastive;
};

/// Forward pass on masked inputs and both objectives. An empty `anchors`
/// list means every cell.
LossTerms compute_losses(ModelState& state, const Matrix& features, const genemap::CellMaps* maps,
                         const ad::Csr& attention, const ad::Csr& positives,
                         const std::vector<std::uint32_t>& mask, const std::vector<std::uint32_t>& anchors,
                         WarningLog* warnings = nullptr);

struct EmbeddingSet {
  Matrix z_spatial;                   // n x d_s
  std::optional<Matrix> z_intrinsic;  // n x d_i
  Matrix z;                           // n x d, unit rows
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_recon = 0.0;
  double loss_contrastive = 0.0;
};

struct TrainResult {
  ModelState state;
  EmbeddingSet embeddings;
  std::vector<EpochLog> log;
};

/// `layout` may be null only in cci_only mode.
TrainResult train(const ingest::ExpressionDataset& ds, const spatialgraph::SpatialGraph& g,
                  const genemap::GeneLayout* layout, const ModelConfig& cfg, WarningLog* warnings = nullptr,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Deterministic mask-free forward pass in evaluation mode.
EmbeddingSet embed(const ModelState& state, const ingest::ExpressionDataset& ds, const spatialgraph::SpatialGraph& g,
                   const genemap::GeneLayout* layout);

ad::Checkpoint to_checkpoint(const ModelState& state, bool with_optimizer = true);
ModelState from_checkpoint(const ad::Checkpoint& ckpt);
void save_model(const std::filesystem::path& path, const ModelState& state);
ModelState load_model(const std::filesystem::path& path);

void write_embedding_csv(const std::filesystem::path& path, const Matrix& z, const std::vector<std::string>& cell_ids);
struct EmbeddingTable {
  std::vector<std::string> cell_ids;
  Matrix values;  // n x d
};
EmbeddingTable read_embedding_csv(const std::filesystem::path& path);

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);
std::vector<EpochLog> read_training_log(const std::filesystem::path& path);

}  // namespace cellscape::model
