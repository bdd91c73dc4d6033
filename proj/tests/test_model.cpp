#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numeric>

#include "cellscape/model.hpp"
#include "support/finite_diff.hpp"
#include "support/toy_data.hpp"

using namespace cellscape;
using namespace cellscape::model;
using ad::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.embed_dim = 8;
  c.cnn_channels = {4, 8};
  c.intrinsic_dim = 8;
  c.fused_dim = 8;
  c.epochs = 0;
  c.seed = 3;
  return c;
}

Tensor features_of(const ingest::ExpressionDataset& ds) {
  Matrix f = ds.X.transposed();
  return Tensor::constant({f.rows, f.cols}, f.data);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cellscape_model_" + name);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("attention neighborhoods") {
  spatialgraph::SpatialGraph g(4, {{0, 1, 1.0}, {1, 2, 1.0}, {1, 3, 1.0}});
  const auto with = attention_csr(g, true);
  const auto without = positive_csr(g);
  CHECK(with.offsets == std::vector<std::size_t>{0, 2, 6, 8, 10});
  CHECK(with.indices == std::vector<std::uint32_t>{0, 1, 0, 1, 2, 3, 1, 2, 1, 3});
  CHECK(without.indices == std::vector<std::uint32_t>{1, 0, 2, 3, 1, 1});
}

TEST_CASE("gat layer examples") {
  SUBCASE("two nodes: attention rows sum to one") {
    spatialgraph::SpatialGraph g(2, {{0, 1, 1.0}});
    const auto csr = attention_csr(g, true);
    Rng rng(1);
    auto rnd = [&](ad::Shape s) {
      std::vector<double> v(ad::numel(s));
      for (auto& x : v) x = rng.normal();
      return Tensor::constant(s, v);
    };
    std::vector<double> alpha;
    gat_layer(rnd({2, 3}), csr, rnd({3, 4}), rnd({2, 2}), rnd({2, 2}), 2, true, Activation::elu, 0.2, &alpha);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t h = 0; h < 2; ++h) {
        double s = 0;
        for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) s += alpha[e * 2 + h];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
  }
  SUBCASE("identical features give uniform attention") {
    spatialgraph::SpatialGraph g(4, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}, {2, 3, 1.0}});
    const auto csr = attention_csr(g, true);
    Rng rng(2);
    std::vector<double> w(12), a(4), b(4);
    for (auto* v : {&w, &a, &b})
      for (auto& x : *v) x = rng.normal();
    std::vector<double> h(4 * 3);
    for (std::size_t i = 0; i < 4; ++i) h[i * 3] = 0.5, h[i * 3 + 1] = -1.0, h[i * 3 + 2] = 2.0;
    std::vector<double> alpha;
    gat_layer(Tensor::constant({4, 3}, h), csr, Tensor::constant({3, 4}, w), Tensor::constant({1, 4}, a),
              Tensor::constant({1, 4}, b), 1, true, Activation::identity, 0.2, &alpha);
    for (std::size_t i = 0; i < 4; ++i) {
      const double deg = static_cast<double>(csr.offsets[i + 1] - csr.offsets[i]);
      for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) CHECK(alpha[e] == doctest::Approx(1.0 / deg));
    }
  }
  SUBCASE("scalar softmax oracle on a path") {
    spatialgraph::SpatialGraph g(3, {{0, 1, 1.0}, {1, 2, 1.0}});
    auto one = Tensor::constant({1, 1}, {1.0});
    auto out = gat_layer(Tensor::constant({3, 1}, {0.0, 1.0, 2.0}), attention_csr(g, true), one, one, one, 1, true,
                         Activation::identity);
    const double e = std::exp(1.0);
    CHECK(out.value()[1] == doctest::Approx((e * e + 2 * e * e * e) / (e + e * e + e * e * e)).epsilon(1e-14));
  }
  SUBCASE("isolated node without self loops") {
    spatialgraph::SpatialGraph g(3, {{0, 1, 1.0}});
    auto one = Tensor::constant({1, 1}, {1.0});
    try {
      gat_layer(Tensor::constant({3, 1}, {0.0, 1.0, 2.0}), attention_csr(g, false), one, one, one, 1, true,
                Activation::identity);
      FAIL("expected an error");
    } catch (const InvalidArgument& err) {
      CHECK(std::string(err.what()).find("node 2") != std::string::npos);
    }
  }
}

TEST_CASE("attention rows sum to one in every layer of a model") {
  const auto ds = testing::toy_tissue(5, 4, 16, 11);
  const auto g = spatialgraph::build_knn_graph(ds.coords, 4, nullptr);
  auto state = init_model(small_config(), 16, 4);
  const auto csr = attention_csr(g, true);
  Tensor h = features_of(ds);
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string pre = "enc" + std::to_string(l);
    const std::size_t heads = state.config.attention_heads;
    std::vector<double> alpha;
    h = gat_layer(h, csr, state.param(pre + ".weight"), state.param(pre + ".att_src"), state.param(pre + ".att_dst"),
                  heads, l == 0, l == 0 ? Activation::elu : Activation::identity, 0.2, &alpha);
    for (std::size_t i = 0; i < csr.n(); ++i)
      for (std::size_t hd = 0; hd < heads; ++hd) {
        double s = 0;
        for (std::size_t e = csr.offsets[i]; e < csr.offsets[i + 1]; ++e) s += alpha[e * heads + hd];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
  }
}

TEST_CASE("cnn encoder examples") {
  auto state = init_model(small_config(), 30, 6);
  SUBCASE("zero maps give zero embeddings") {
    auto z = cnn_encode(state, Tensor::zeros({3, 6, 6, 1}), true);
    for (double v : z.value()) CHECK(v == 0.0);
    auto ze = cnn_encode(state, Tensor::zeros({3, 6, 6, 1}), false);
    for (double v : ze.value()) CHECK(v == 0.0);
  }
  SUBCASE("batch permutation permutes outputs") {
    Rng rng(4);
    std::vector<double> maps(4 * 36);
    for (auto& v : maps) v = rng.uniform();
    std::vector<double> perm_maps(maps.size());
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    for (std::size_t b = 0; b < 4; ++b)
      std::copy_n(maps.begin() + static_cast<long>(perm[b] * 36), 36, perm_maps.begin() + static_cast<long>(b * 36));
    auto z = cnn_encode(state, Tensor::constant({4, 6, 6, 1}, maps), false);
    auto zp = cnn_encode(state, Tensor::constant({4, 6, 6, 1}, perm_maps), false);
    const std::size_t d = z.dim(1);
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t j = 0; j < d; ++j) CHECK(zp.value()[b * d + j] == z.value()[perm[b] * d + j]);
  }
  SUBCASE("hand convolution oracle") {
    std::vector<double> img(64, 0.0);
    img[4 * 8 + 4] = 1.0;
    auto y = ad::conv2d(Tensor::constant({1, 8, 8, 1}, img), Tensor::constant({3, 3, 1, 1}, std::vector<double>(9, 1.0)), 1);
    CHECK(std::accumulate(y.value().begin(), y.value().end(), 0.0) == 9.0);
    auto pooled = ad::max_pool2x2(y);
    CHECK(*std::max_element(pooled.value().begin(), pooled.value().end()) == 1.0);
  }
  SUBCASE("maps smaller than 4x4 are rejected") { CHECK_THROWS_AS(init_model(small_config(), 9, 3), InvalidArgument); }
  SUBCASE("wrong map side") { CHECK_THROWS_AS(cnn_encode(state, Tensor::zeros({2, 5, 5, 1}), false), DimensionMismatch); }
}

TEST_CASE("fusion examples") {
  auto zs = Tensor::constant({1, 2}, {1.0, -2.0});
  auto zi = Tensor::constant({1, 1}, {3.0});
  SUBCASE("identity weight concatenates") {
    auto z = fuse(zs, zi, Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    CHECK(z.value() == std::vector<double>{1.0, -2.0, 3.0});
  }
  SUBCASE("zero intrinsic part leaves the spatial block") {
    auto w = Tensor::constant({2, 3}, {1, 2, 5, 3, 4, 7});
    auto z = fuse(zs, Tensor::constant({1, 1}, {0.0}), w);
    CHECK(z.value() == std::vector<double>{1 - 4, 3 - 8});
  }
  SUBCASE("scalar product") {
    auto z = fuse(Tensor::constant({1, 1}, {1.0}), Tensor::constant({1, 1}, {4.0}), Tensor::constant({1, 2}, {2.0, 3.0}));
    CHECK(z.value() == std::vector<double>{14.0});
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(fuse(zs, zi, Tensor::constant({2, 2}, {1, 0, 0, 1})), DimensionMismatch); }
}

TEST_CASE("configuration validation and serialization") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.gamma = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = c;
  bad.tau = -1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = c;
  bad.mask_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = c;
  bad.hidden_dim = 10;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  c.seed = 99;
  c.cnn_channels = {3, 5, 7};
  c.cci_only = true;
  const auto back = config_from_json(config_to_json(c));
  CHECK(back.seed == 99);
  CHECK(back.cnn_channels == c.cnn_channels);
  CHECK(back.cci_only);
  CHECK(back.tau == c.tau);
}

TEST_CASE("gradient of the total loss matches finite differences") {
  const auto ds = testing::toy_tissue(5, 4, 16, 21);
  const auto g = spatialgraph::build_knn_graph(ds.coords, 4, nullptr);
  const auto layout = testing::row_major_layout(16);
  auto state = init_model(small_config(), 16, layout.q);
  const Matrix features = ds.X.transposed();
  const auto maps = genemap::render_maps(ds.X, layout);
  const auto attn = attention_csr(g, true), pos = positive_csr(g);
  const auto mask = genemap::sample_mask(20, 0.3, 5);
  auto build = [&] {
    auto l = compute_losses(state, features, &maps, attn, pos, mask, {});
    return ad::add(l.recon, l.contrastive);
  };
  const auto check = testing::check_gradients(build, state.params, 1e-4);
  for (std::size_t k = 0; k < state.params.size(); ++k) {
    INFO(state.names[k]);
    CHECK(check.errors[k] < 1e-4);
  }
}

TEST_CASE("training on a toy tissue") {
  const auto ds = testing::toy_tissue(5, 4, 16, 31);
  const auto g = spatialgraph::build_knn_graph(ds.coords, 4, nullptr);
  const auto layout = testing::row_major_layout(16);
  ModelConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 7;

  SUBCASE("loss decreases and neighbors end up closer than non-neighbors") {
    const auto res = train(ds, g, &layout, cfg);
    REQUIRE(res.log.size() == 50);
    auto window = [&](std::size_t end) {
      double s = 0;
      for (std::size_t e = end - 5; e < end; ++e) s += res.log[e].loss_recon + res.log[e].loss_contrastive;
      return s / 5;
    };
    CHECK(window(50) < window(5));
    CHECK(res.log[0].lr == 1e-3);
    CHECK(res.state.optimizer.step == 50);

    double nb = 0, non = 0;
    std::size_t n_nb = 0, n_non = 0;
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = i + 1; j < 20; ++j) {
        const double c = cosine(res.embeddings.z.row(i), res.embeddings.z.row(j));
        if (g.has_edge(i, j)) nb += c, ++n_nb;
        else non += c, ++n_non;
      }
    CHECK(nb / n_nb > non / n_non);
    for (std::size_t i = 0; i < 20; ++i) {
      double s = 0;
      for (double v : res.embeddings.z.row(i)) s += v * v;
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-9);
    }
  }

  SUBCASE("zero epochs returns the initial model") {
    cfg.epochs = 0;
    const auto res = train(ds, g, &layout, cfg);
    CHECK(res.log.empty());
    CHECK(res.state.optimizer.step == 0);
    const auto init = init_model(cfg, 16, layout.q);
    for (std::size_t k = 0; k < init.params.size(); ++k) CHECK(init.params[k].value() == res.state.params[k].value());
    CHECK(embed(init, ds, g, &layout).z == res.embeddings.z);
  }

  SUBCASE("spatial-only mode ignores the layout") {
    cfg.cci_only = true;
    cfg.epochs = 5;
    const auto a = train(ds, g, &layout, cfg);
    const auto other = genemap::layout_genes(ingest::pearson_coexpression(ds).C, 1);
    const auto b = train(ds, g, &other, cfg);
    const auto c = train(ds, g, nullptr, cfg);
    CHECK_FALSE(a.embeddings.z_intrinsic.has_value());
    CHECK(a.embeddings.z_spatial.rows == 20);
    CHECK(a.embeddings.z_spatial == b.embeddings.z_spatial);
    CHECK(a.embeddings.z == c.embeddings.z);
  }

  SUBCASE("exploding learning rate aborts with the epoch") {
    cfg.learning_rate = 1e300;
    cfg.epochs = 10;
    try {
      train(ds, g, &layout, cfg);
      FAIL("expected a numerical error");
    } catch (const NumericalError& err) {
      CHECK(std::string(err.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_CASE("embedding contracts") {
  const auto ds = testing::toy_tissue(5, 4, 16, 41);
  const auto g = spatialgraph::build_knn_graph(ds.coords, 4, nullptr);
  const auto layout = testing::row_major_layout(16);
  ModelConfig cfg = small_config();
  cfg.epochs = 3;
  const auto res = train(ds, g, &layout, cfg);

  SUBCASE("repeatable") {
    const auto a = embed(res.state, ds, g, &layout);
    const auto b = embed(res.state, ds, g, &layout);
    CHECK(a.z == b.z);
    CHECK(a.z_spatial == b.z_spatial);
    CHECK(*a.z_intrinsic == *b.z_intrinsic);
    CHECK(a.z == res.embeddings.z);
  }

  SUBCASE("permuting cells permutes rows") {
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(8);
    rng.shuffle(perm);
    const auto pds = ingest::subset_cells(ds, perm);
    std::vector<std::size_t> inv(20);
    for (std::size_t i = 0; i < 20; ++i) inv[perm[i]] = i;
    std::vector<spatialgraph::Edge> edges;
    for (const auto& e : g.edges()) edges.push_back({static_cast<std::uint32_t>(inv[e.i]), static_cast<std::uint32_t>(inv[e.j]), e.weight});
    const spatialgraph::SpatialGraph pg(20, edges);
    const auto a = embed(res.state, ds, g, &layout);
    const auto b = embed(res.state, pds, pg, &layout);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < a.z.cols; ++j) CHECK(b.z(i, j) == doctest::Approx(a.z(perm[i], j)).epsilon(1e-10));
  }

  SUBCASE("shape drift is rejected") {
    const auto other = testing::toy_tissue(5, 4, 12, 1);
    CHECK_THROWS_AS(embed(res.state, other, g, &layout), DimensionMismatch);
    CHECK_THROWS_AS(embed(res.state, ds, g, nullptr), InvalidArgument);
  }

  SUBCASE("checkpoint round trip") {
    const auto path = temp_path("ckpt.csk");
    save_model(path, res.state);
    const auto loaded = load_model(path);
    CHECK(loaded.names == res.state.names);
    CHECK(loaded.optimizer.step == res.state.optimizer.step);
    CHECK(embed(loaded, ds, g, &layout).z == res.embeddings.z);
    std::filesystem::remove(path);
  }

  SUBCASE("embedding csv and training log round trip") {
    const auto path = temp_path("z.csv");
    write_embedding_csv(path, res.embeddings.z, ds.cell_ids);
    const auto t = read_embedding_csv(path);
    CHECK(t.cell_ids == ds.cell_ids);
    CHECK(t.values == res.embeddings.z);
    const auto log_path = temp_path("log.jsonl");
    write_training_log(log_path, res.log);
    const auto log = read_training_log(log_path);
    REQUIRE(log.size() == res.log.size());
    for (std::size_t e = 0; e < log.size(); ++e) {
      CHECK(log[e].epoch == e);
      CHECK(log[e].lr == res.log[e].lr);
      CHECK(log[e].loss_recon == res.log[e].loss_recon);
    }
    std::filesystem::remove(path);
    std::filesystem::remove(log_path);
  }
}
