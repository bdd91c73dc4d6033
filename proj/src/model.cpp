#include "cellscape/model.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "cellscape/io.hpp"
#include "cellscape/rng.hpp"

namespace cellscape::model {

using ad::Tensor;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kAnchorStream = 3;
constexpr std::uint64_t kPcgradStream = 4;

std::size_t last_layer(const ModelConfig& c) { return c.gat_layers - 1; }

struct LayerShape {
  std::size_t din, dout, heads;
  bool concat;
};

LayerShape encoder_layer(const ModelConfig& c, std::size_t n_genes, std::size_t l) {
  const std::size_t din = l == 0 ? n_genes : c.hidden_dim;
  if (l == last_layer(c)) return {din, c.embed_dim, c.attention_heads, false};
  return {din, c.hidden_dim / c.attention_heads, c.attention_heads, true};
}

std::size_t cnn_flat_size(const ModelConfig& c, std::size_t q) {
  std::size_t s = q;
  for (std::size_t b = 0; b + 1 < c.cnn_channels.size(); ++b) {
    if (s < 2) throw InvalidArgument("gene map side " + std::to_string(q) + " too small for " +
                                     std::to_string(c.cnn_channels.size()) + " pooled CNN blocks");
    s /= 2;
  }
  return s * s * c.cnn_channels.back();
}

std::vector<double> glorot(Rng& rng, std::size_t count, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

std::size_t index_of(const ModelState& s, const std::string& name) {
  const auto it = std::find(s.names.begin(), s.names.end(), name);
  if (it == s.names.end()) throw InvalidArgument("model has no parameter '" + name + "'");
  return static_cast<std::size_t>(it - s.names.begin());
}

Tensor features_tensor(const Matrix& cells_by_genes) {
  return Tensor::constant({cells_by_genes.rows, cells_by_genes.cols}, cells_by_genes.data);
}

Tensor maps_tensor(const genemap::CellMaps& m) { return Tensor::constant({m.n, m.q, m.q, 1}, m.data); }

std::vector<std::uint32_t> sample_anchors(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

Matrix to_matrix(const Tensor& t) { return Matrix(t.dim(0), t.dim(1), t.value()); }

void check_inputs(const ModelState& s, const ingest::ExpressionDataset& ds, const spatialgraph::SpatialGraph& g,
                  const genemap::GeneLayout* layout) {
  if (ds.n_genes() != s.n_genes) throw DimensionMismatch("dataset genes vs model input", s.n_genes, ds.n_genes());
  if (g.n_nodes() != ds.n_cells()) throw DimensionMismatch("graph nodes vs cells", ds.n_cells(), g.n_nodes());
  if (s.config.cci_only) return;
  if (!layout) throw InvalidArgument("a gene layout is required unless the model is spatial-only");
  if (layout->n_genes() != s.n_genes) throw DimensionMismatch("layout genes vs model input", s.n_genes, layout->n_genes());
  if (layout->q != s.q) throw DimensionMismatch("layout side vs model gene-map side", s.q, layout->q);
}

}  // namespace

void ModelConfig::validate() const {
  if (gat_layers == 0 || attention_heads == 0 || hidden_dim == 0 || embed_dim == 0 || intrinsic_dim == 0 ||
      fused_dim == 0)
    throw InvalidArgument("model dimensions must be positive");
  if (gat_layers > 1 && hidden_dim % attention_heads != 0)
    throw InvalidArgument("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by " +
                          std::to_string(attention_heads) + " heads");
  if (!cci_only) {
    if (cnn_channels.empty()) throw InvalidArgument("cnn_channels must list at least one block");
    for (auto c : cnn_channels)
      if (c == 0) throw InvalidArgument("cnn_channels entries must be positive");
  }
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw InvalidArgument("gamma must be positive");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw InvalidArgument("mask_ratio must lie in (0, 1)");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw InvalidArgument("weight decay must be >= 0");
  if (lr_halve_every == 0) throw InvalidArgument("lr_halve_every must be positive");
  if (max_anchors == 0) throw InvalidArgument("max_anchors must be positive");
  if (!(leaky_slope >= 0.0)) throw InvalidArgument("leaky_slope must be >= 0");
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"gat_layers", c.gat_layers},       {"attention_heads", c.attention_heads},
            {"hidden_dim", c.hidden_dim},       {"embed_dim", c.embed_dim},
            {"cnn_channels", c.cnn_channels},   {"intrinsic_dim", c.intrinsic_dim},
            {"fused_dim", c.fused_dim},         {"gamma", c.gamma},
            {"tau", c.tau},                     {"mask_ratio", c.mask_ratio},
            {"epochs", c.epochs},               {"seed", c.seed},
            {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
            {"lr_halve_every", c.lr_halve_every}, {"max_anchors", c.max_anchors},
            {"leaky_slope", c.leaky_slope},     {"self_loops", c.self_loops},
            {"cci_only", c.cci_only}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("model configuration is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("gat_layers", c.gat_layers);
  get("attention_heads", c.attention_heads);
  get("hidden_dim", c.hidden_dim);
  get("embed_dim", c.embed_dim);
  get("cnn_channels", c.cnn_channels);
  get("intrinsic_dim", c.intrinsic_dim);
  get("fused_dim", c.fused_dim);
  get("gamma", c.gamma);
  get("tau", c.tau);
  get("mask_ratio", c.mask_ratio);
  get("epochs", c.epochs);
  get("seed", c.seed);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("lr_halve_every", c.lr_halve_every);
  get("max_anchors", c.max_anchors);
  get("leaky_slope", c.leaky_slope);
  get("self_loops", c.self_loops);
  get("cci_only", c.cci_only);
  return c;
}

const Tensor& ModelState::param(const std::string& name) const { return params[index_of(*this, name)]; }

std::size_t ModelState::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  return total;
}

ModelState init_model(const ModelConfig& cfg, std::size_t n_genes, std::size_t q) {
  cfg.validate();
  if (n_genes == 0) throw InvalidArgument("model needs at least one gene");
  ModelState s;
  s.config = cfg;
  s.n_genes = n_genes;
  Rng rng(derive_seed(cfg.seed, kInitStream));
  auto add = [&](std::string name, ad::Shape shape, std::vector<double> values) {
    s.names.push_back(std::move(name));
    s.params.push_back(Tensor::parameter(std::move(shape), std::move(values)));
  };

  for (std::size_t l = 0; l < cfg.gat_layers; ++l) {
    const auto ls = encoder_layer(cfg, n_genes, l);
    const std::string pre = "enc" + std::to_string(l);
    add(pre + ".weight", {ls.din, ls.heads * ls.dout}, glorot(rng, ls.din * ls.heads * ls.dout, ls.din, ls.dout));
    add(pre + ".att_src", {ls.heads, ls.dout}, glorot(rng, ls.heads * ls.dout, ls.dout, 1));
    add(pre + ".att_dst", {ls.heads, ls.dout}, glorot(rng, ls.heads * ls.dout, ls.dout, 1));
  }

  std::size_t fused_in = cfg.embed_dim;
  if (!cfg.cci_only) {
    if (q < 4) throw InvalidArgument("gene map side " + std::to_string(q) + " is below the minimum of 4");
    s.q = q;
    std::size_t cin = 1;
    for (std::size_t b = 0; b < cfg.cnn_channels.size(); ++b) {
      const std::size_t cout = cfg.cnn_channels[b];
      const std::string pre = "cnn" + std::to_string(b);
      add(pre + ".kernel", {3, 3, cin, cout}, glorot(rng, 9 * cin * cout, 9 * cin, 9 * cout));
      add(pre + ".gamma", {cout}, std::vector<double>(cout, 1.0));
      add(pre + ".beta", {cout}, std::vector<double>(cout, 0.0));
      s.norms.emplace_back(cout);
      cin = cout;
    }
    const std::size_t flat = cnn_flat_size(cfg, q);
    add("cnn.fc.weight", {flat, cfg.intrinsic_dim}, glorot(rng, flat * cfg.intrinsic_dim, flat, cfg.intrinsic_dim));
    add("cnn.fc.bias", {cfg.intrinsic_dim}, std::vector<double>(cfg.intrinsic_dim, 0.0));
    fused_in += cfg.intrinsic_dim;
  }
  add("fusion.weight", {cfg.fused_dim, fused_in}, glorot(rng, cfg.fused_dim * fused_in, fused_in, cfg.fused_dim));
  add("dec.weight", {cfg.fused_dim, n_genes}, glorot(rng, cfg.fused_dim * n_genes, cfg.fused_dim, n_genes));
  add("dec.att_src", {1, n_genes}, glorot(rng, n_genes, n_genes, 1));
  add("dec.att_dst", {1, n_genes}, glorot(rng, n_genes, n_genes, 1));

  ad::AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.weight_decay = cfg.weight_decay;
  s.optimizer = ad::make_adam(s.params, adam);
  return s;
}

ad::Csr attention_csr(const spatialgraph::SpatialGraph& g, bool self_loops) {
  ad::Csr csr;
  csr.offsets.reserve(g.n_nodes() + 1);
  csr.offsets.push_back(0);
  for (std::size_t i = 0; i < g.n_nodes(); ++i) {
    const auto& nb = g.neighbors(i);
    bool placed = !self_loops;
    for (auto j : nb) {
      if (!placed && j > i) {
        csr.indices.push_back(static_cast<std::uint32_t>(i));
        placed = true;
      }
      csr.indices.push_back(j);
    }
    if (!placed) csr.indices.push_back(static_cast<std::uint32_t>(i));
    csr.offsets.push_back(csr.indices.size());
  }
  return csr;
}

ad::Csr positive_csr(const spatialgraph::SpatialGraph& g) { return attention_csr(g, false); }

Tensor gat_layer(const Tensor& h, const ad::Csr& neighborhood, const Tensor& weight, const Tensor& att_src,
                 const Tensor& att_dst, std::size_t heads, bool concat_heads, Activation activation, double slope,
                 std::vector<double>* attention) {
  if (h.ndim() != 2 || h.dim(0) != neighborhood.n())
    throw DimensionMismatch("feature rows vs graph nodes", neighborhood.n(), h.ndim() == 2 ? h.dim(0) : 0);
  Tensor out = ad::graph_attention(h, weight, att_src, att_dst, neighborhood, heads, concat_heads, slope, attention);
  return activation == Activation::elu ? ad::elu(out) : out;
}

Tensor cnn_encode(ModelState& state, const Tensor& maps, bool training) {
  const auto& cfg = state.config;
  if (cfg.cci_only) throw InvalidArgument("spatial-only model has no CNN branch");
  if (maps.ndim() != 4 || maps.dim(3) != 1 || maps.dim(1) != maps.dim(2))
    throw InvalidArgument("gene maps must have shape [n, q, q, 1], got " + ad::shape_string(maps.shape()));
  if (maps.dim(1) != state.q) throw DimensionMismatch("gene map side", state.q, maps.dim(1));
  Tensor x = maps;
  for (std::size_t b = 0; b < cfg.cnn_channels.size(); ++b) {
    const std::string pre = "cnn" + std::to_string(b);
    x = ad::conv2d(x, state.param(pre + ".kernel"), 1);
    x = ad::batch_norm(x, state.param(pre + ".gamma"), state.param(pre + ".beta"), state.norms[b], training);
    x = ad::elu(x);
    if (b + 1 < cfg.cnn_channels.size()) x = ad::max_pool2x2(x);
  }
  const std::size_t n = x.dim(0);
  x = ad::reshape(x, {n, x.numel() / n});
  return ad::add_bias(ad::matmul(x, state.param("cnn.fc.weight")), state.param("cnn.fc.bias"));
}

Tensor fuse(const Tensor& z_sp, const Tensor& z_in, const Tensor& w) {
  if (w.ndim() != 2) throw InvalidArgument("fusion weight must be 2-D");
  Tensor cat = z_in.defined() ? ad::concat_cols({z_sp, z_in}) : z_sp;
  if (cat.dim(1) != w.dim(1)) throw DimensionMismatch("fusion input width", w.dim(1), cat.dim(1));
  return ad::matmul_transposed(cat, w);
}

ForwardResult forward(ModelState& state, const Tensor& features, const Tensor& maps, const ad::Csr& attention,
                      bool training) {
  const auto& cfg = state.config;
  if (features.ndim() != 2 || features.dim(1) != state.n_genes)
    throw DimensionMismatch("feature columns vs model genes", state.n_genes,
                            features.ndim() == 2 ? features.dim(1) : 0);
  ForwardResult r;
  Tensor h = features;
  for (std::size_t l = 0; l < cfg.gat_layers; ++l) {
    const auto ls = encoder_layer(cfg, state.n_genes, l);
    const std::string pre = "enc" + std::to_string(l);
    h = gat_layer(h, attention, state.param(pre + ".weight"), state.param(pre + ".att_src"),
                  state.param(pre + ".att_dst"), ls.heads, ls.concat,
                  l == last_layer(cfg) ? Activation::identity : Activation::elu, cfg.leaky_slope);
  }
  r.z_spatial = h;
  if (!cfg.cci_only) {
    r.z_intrinsic = cnn_encode(state, maps, training);
    if (r.z_intrinsic.dim(0) != h.dim(0)) throw DimensionMismatch("gene maps vs cells", h.dim(0), r.z_intrinsic.dim(0));
  }
  r.z = fuse(r.z_spatial, r.z_intrinsic, state.param("fusion.weight"));
  r.x_hat = gat_layer(r.z, attention, state.param("dec.weight"), state.param("dec.att_src"),
                      state.param("dec.att_dst"), 1, true, Activation::identity, cfg.leaky_slope);
  return r;
}

LossTerms compute_losses(ModelState& state, const Matrix& features, const genemap::CellMaps* maps,
                         const ad::Csr& attention, const ad::Csr& positives, const std::vector<std::uint32_t>& mask,
                         const std::vector<std::uint32_t>& anchors, WarningLog* warnings) {
  const std::size_t n = features.rows, p = features.cols;
  Matrix masked = features;
  for (auto i : mask) {
    if (i >= n) throw InvalidArgument("mask index " + std::to_string(i) + " out of range");
    std::fill_n(masked.data.begin() + static_cast<std::ptrdiff_t>(i * p), p, 0.0);
  }
  Tensor map_t;
  if (!state.config.cci_only) {
    if (!maps) throw InvalidArgument("gene maps are required unless the model is spatial-only");
    genemap::CellMaps mm = *maps;
    const std::size_t qq = mm.q * mm.q;
    for (auto i : mask) std::fill_n(mm.data.begin() + static_cast<std::ptrdiff_t>(i * qq), qq, 0.0);
    map_t = maps_tensor(mm);
  }
  auto fw = forward(state, features_tensor(masked), map_t, attention, true);
  LossTerms out;
  out.recon = ad::sce_loss(features_tensor(features), fw.x_hat, mask, state.config.gamma, warnings);
  out.contrastive = ad::contrastive_loss(ad::l2_normalize_rows(fw.z), positives, state.config.tau,
                                         anchors.empty() ? nullptr : &anchors);
  return out;
}

TrainResult train(const ingest::ExpressionDataset& ds, const spatialgraph::SpatialGraph& g,
                  const genemap::GeneLayout* layout, const ModelConfig& cfg, WarningLog* warnings,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  ad::retain_freed_memory();
  const std::size_t q = cfg.cci_only ? 0 : (layout ? layout->q : 0);
  TrainResult res{init_model(cfg, ds.n_genes(), q), {}, {}};
  auto& state = res.state;
  check_inputs(state, ds, g, layout);

  const Matrix features = ds.X.transposed();
  std::optional<genemap::CellMaps> maps;
  if (!cfg.cci_only) maps = genemap::render_maps(ds.X, *layout);
  const auto attention = attention_csr(g, cfg.self_loops);
  const auto positives = positive_csr(g);
  const std::size_t n = ds.n_cells();

  WarningLog epoch_warnings;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto mask = genemap::sample_mask(n, cfg.mask_ratio, derive_seed(derive_seed(cfg.seed, kMaskStream), epoch));
    std::vector<std::uint32_t> anchors;
    if (n > cfg.max_anchors)
      anchors = sample_anchors(n, cfg.max_anchors, derive_seed(derive_seed(cfg.seed, kAnchorStream), epoch));

    auto losses = compute_losses(state, features, maps ? &*maps : nullptr, attention, positives, mask, anchors,
                                 &epoch_warnings);
    EpochLog entry{epoch, ad::lr_schedule(epoch, cfg.learning_rate, cfg.lr_halve_every), losses.recon.item(),
                   losses.contrastive.item()};
    if (!std::isfinite(entry.loss_recon) || !std::isfinite(entry.loss_contrastive)) {
      std::ostringstream msg;
      msg << "non-finite loss at epoch " << epoch << ": loss_recon=" << entry.loss_recon
          << " loss_contrastive=" << entry.loss_contrastive;
      throw NumericalError(msg.str());
    }

    ad::zero_grad(state.params);
    ad::backward(losses.recon);
    auto g_recon = ad::flatten_grads(state.params);
    ad::zero_grad(state.params);
    ad::backward(losses.contrastive);
    auto g_con = ad::flatten_grads(state.params);
    ad::zero_grad(state.params);

    auto surgery = ad::pcgrad({std::move(g_recon), std::move(g_con)},
                              derive_seed(derive_seed(cfg.seed, kPcgradStream), epoch), &epoch_warnings);
    std::vector<double> total(surgery.adjusted[0].size());
    for (std::size_t i = 0; i < total.size(); ++i) total[i] = surgery.adjusted[0][i] + surgery.adjusted[1][i];
    ad::adam_step(state.optimizer, state.params, ad::unflatten(total, state.params), entry.lr);

    res.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  if (!epoch_warnings.empty()) {
    for (const auto& m : epoch_warnings.messages()) {
      if (warnings && !warnings->contains(m)) warnings->add(m);
    }
  }
  res.embeddings = embed(state, ds, g, layout);
  return res;
}

EmbeddingSet embed(const ModelState& state, const ingest::ExpressionDataset& ds, const spatialgraph::SpatialGraph& g,
                   const genemap::GeneLayout* layout) {
  check_inputs(state, ds, g, layout);
  ModelState s = state;
  Tensor maps;
  if (!s.config.cci_only) maps = maps_tensor(genemap::render_maps(ds.X, *layout));
  auto fw = forward(s, features_tensor(ds.X.transposed()), maps, attention_csr(g, s.config.self_loops), false);
  EmbeddingSet out;
  out.z_spatial = to_matrix(fw.z_spatial);
  if (fw.z_intrinsic.defined()) out.z_intrinsic = to_matrix(fw.z_intrinsic);
  out.z = to_matrix(ad::l2_normalize_rows(fw.z));
  return out;
}

ad::Checkpoint to_checkpoint(const ModelState& s, bool with_optimizer) {
  ad::Checkpoint c;
  c.config_json = json{{"model", json::parse(config_to_json(s.config))}, {"n_genes", s.n_genes}, {"q", s.q}}.dump();
  for (std::size_t i = 0; i < s.params.size(); ++i)
    c.tensors.push_back({s.names[i], s.params[i].shape(), s.params[i].value()});
  for (std::size_t b = 0; b < s.norms.size(); ++b) {
    const std::string pre = "cnn" + std::to_string(b);
    c.buffers.push_back({pre + ".running_mean", {s.norms[b].running_mean.size()}, s.norms[b].running_mean});
    c.buffers.push_back({pre + ".running_var", {s.norms[b].running_var.size()}, s.norms[b].running_var});
  }
  if (with_optimizer) c.optimizer = s.optimizer;
  return c;
}

ModelState from_checkpoint(const ad::Checkpoint& c) {
  json meta;
  try {
    meta = json::parse(c.config_json);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint configuration is not valid JSON: ") + e.what());
  }
  if (!meta.contains("model") || !meta.contains("n_genes") || !meta.contains("q"))
    throw IoError("checkpoint configuration lacks model metadata");
  ModelState s = init_model(config_from_json(meta["model"].dump()), meta["n_genes"].get<std::size_t>(),
                            meta["q"].get<std::size_t>());
  if (c.tensors.size() != s.params.size())
    throw IoError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                  std::to_string(s.params.size()));
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    const auto& t = c.tensors[i];
    if (t.name != s.names[i] || t.shape != s.params[i].shape())
      throw IoError("checkpoint tensor '" + t.name + "' " + ad::shape_string(t.shape) + " does not match '" +
                    s.names[i] + "' " + ad::shape_string(s.params[i].shape()));
    s.params[i].mutable_value() = t.values;
  }
  if (c.buffers.size() != 2 * s.norms.size()) throw IoError("checkpoint batch-norm buffers do not match the model");
  for (std::size_t b = 0; b < s.norms.size(); ++b) {
    const auto& mean = c.buffers[2 * b];
    const auto& var = c.buffers[2 * b + 1];
    if (mean.values.size() != s.norms[b].running_mean.size() || var.values.size() != s.norms[b].running_var.size())
      throw IoError("checkpoint batch-norm buffer size mismatch in block " + std::to_string(b));
    s.norms[b].running_mean = mean.values;
    s.norms[b].running_var = var.values;
  }
  if (c.optimizer) {
    if (c.optimizer->m.size() != s.params.size()) throw IoError("checkpoint optimizer state does not match the model");
    s.optimizer = *c.optimizer;
  }
  return s;
}

void save_model(const std::filesystem::path& path, const ModelState& state) {
  ad::write_checkpoint(path, to_checkpoint(state));
}

ModelState load_model(const std::filesystem::path& path) { return from_checkpoint(ad::read_checkpoint(path)); }

void write_embedding_csv(const std::filesystem::path& path, const Matrix& z, const std::vector<std::string>& cell_ids) {
  if (cell_ids.size() != z.rows) throw DimensionMismatch("cell ids vs embedding rows", z.rows, cell_ids.size());
  std::string out = "cell_id";
  for (std::size_t j = 0; j < z.cols; ++j) out += ",dim_" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < z.rows; ++i) {
    out += cell_ids[i];
    for (std::size_t j = 0; j < z.cols; ++j) {
      out += ',';
      out += io::format_double(z(i, j));
    }
    out += '\n';
  }
  io::write_text(path, out);
}

EmbeddingTable read_embedding_csv(const std::filesystem::path& path) {
  const auto lines = io::read_lines(path);
  if (lines.empty()) throw ParseError("empty embedding file " + path.string(), 1, 1);
  const auto header = io::split_csv(lines[0]);
  if (header.empty() || header[0] != "cell_id") throw ParseError("embedding header must start with cell_id", 1, 1);
  const std::size_t d = header.size() - 1;
  EmbeddingTable t;
  std::vector<double> values;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto f = io::split_csv(lines[r]);
    if (f.size() != d + 1) throw ParseError("expected " + std::to_string(d + 1) + " fields", r + 1, f.size());
    t.cell_ids.push_back(f[0]);
    for (std::size_t j = 1; j <= d; ++j) values.push_back(io::parse_double(f[j], r + 1, j + 1));
  }
  t.values = Matrix(t.cell_ids.size(), d, std::move(values));
  return t;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    out += json{{"epoch", e.epoch}, {"lr", e.lr}, {"loss_recon", e.loss_recon}, {"loss_contrastive", e.loss_contrastive}}
               .dump();
    out += '\n';
  }
  io::write_text(path, out);
}

std::vector<EpochLog> read_training_log(const std::filesystem::path& path) {
  std::vector<EpochLog> log;
  const auto lines = io::read_lines(path);
  for (std::size_t r = 0; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    try {
      const auto j = json::parse(lines[r]);
      log.push_back({j.at("epoch").get<std::size_t>(), j.at("lr").get<double>(), j.at("loss_recon").get<double>(),
                     j.at("loss_contrastive").get<double>()});
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad training log entry: ") + e.what(), r + 1, 1);
    }
  }
  return log;
}

}  // namespace cellscape::model
