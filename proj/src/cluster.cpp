#include "cellscape/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "cellscape/ingest.hpp"
#include "cellscape/io.hpp"
#include "cellscape/kernels.hpp"
#include "cellscape/rng.hpp"

namespace cellscape::cluster {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

Matrix to_matrix(const RowMatrix& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  Eigen::Map<RowMatrix>(out.data.data(), m.rows(), m.cols()) = m;
  return out;
}

}  // namespace

PcaResult pca(const Matrix& Z, std::size_t k) {
  const std::size_t n = Z.rows, d = Z.cols;
  if (k == 0) throw InvalidArgument("pca needs k >= 1");
  if (k > std::min(n, d))
    throw InvalidArgument("pca k = " + std::to_string(k) + " exceeds min(n, d) = " + std::to_string(std::min(n, d)));
  const ConstMap X(Z.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const RowMatrix Xc = X.rowwise() - mu;
  const Eigen::MatrixXd cov = (Xc.transpose() * Xc) / static_cast<double>(std::max<std::size_t>(n - 1, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("pca eigendecomposition failed");

  PcaResult out;
  out.mean.assign(mu.data(), mu.data() + d);
  RowMatrix V(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
  for (std::size_t a = 0; a < k; ++a) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - a);  // eigenvalues come ascending
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index big = 0;
    for (Eigen::Index j = 1; j < v.size(); ++j)
      if (std::abs(v(j)) > std::abs(v(big))) big = j;
    if (v(big) < 0) v = -v;
    V.row(static_cast<Eigen::Index>(a)) = v.transpose();
    out.eigenvalues.push_back(std::max(es.eigenvalues()(col), 0.0));
  }
  out.scores = to_matrix(Xc * V.transpose());
  out.components = to_matrix(V);
  return out;
}

Matrix pca_reduce(const Matrix& Z, std::size_t k) { return pca(Z, k).scores; }

Matrix reduce_for_clustering(const Matrix& Z, std::size_t k, WarningLog* warnings) {
  if (Z.cols <= k) {
    warn(warnings, "PCA skipped: embedding has " + std::to_string(Z.cols) + " <= " + std::to_string(k) + " dimensions");
    return Z;
  }
  return pca_reduce(Z, k);
}

// ---------------------------------------------------------------------------
// Gaussian mixture

namespace {

struct Component {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  double weight = 0.0;
};

struct EmRun {
  std::vector<Component> comps;
  RowMatrix resp;  // n x K
  double ll = -std::numeric_limits<double>::infinity();
  std::vector<double> trace;
  std::vector<std::size_t> reseeds;
  std::vector<std::string> warnings;
};

Eigen::MatrixXd global_covariance(const ConstMap& X, double reg) {
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const RowMatrix Xc = X.rowwise() - mu;
  Eigen::MatrixXd cov = (Xc.transpose() * Xc) / static_cast<double>(X.rows());
  cov.diagonal().array() += reg;
  return cov;
}

// Log-likelihood of the data; fills responsibilities.
double e_step(const ConstMap& X, const std::vector<Component>& comps, RowMatrix& resp) {
  const Eigen::Index n = X.rows(), d = X.cols();
  const Eigen::Index K = static_cast<Eigen::Index>(comps.size());
  resp.resize(n, K);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& c = comps[static_cast<std::size_t>(k)];
    Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
    if (llt.info() != Eigen::Success) throw NumericalError("GMM covariance is not positive definite");
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    Eigen::MatrixXd D = (X.rowwise() - c.mean.transpose()).transpose();  // d x n
    llt.matrixL().solveInPlace(D);
    const Eigen::VectorXd maha = D.colwise().squaredNorm().transpose();
    const double base = std::log(c.weight) - 0.5 * (static_cast<double>(d) * log2pi + logdet);
    resp.col(k) = (base - 0.5 * maha.array()).matrix();
  }
  double ll = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = resp.row(i).maxCoeff();
    const double s = (resp.row(i).array() - m).exp().sum();
    const double lse = m + std::log(s);
    ll += lse;
    resp.row(i) = (resp.row(i).array() - lse).exp();
  }
  return ll;
}

void m_step(const ConstMap& X, const RowMatrix& resp, double reg, std::vector<Component>& comps) {
  const Eigen::Index n = X.rows();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Eigen::VectorXd r = resp.col(static_cast<Eigen::Index>(k));
    const double nk = r.sum();
    if (nk <= 0.0) continue;  // left for the degeneracy guard
    auto& c = comps[k];
    c.mean = (X.transpose() * r) / nk;
    const RowMatrix Xc = X.rowwise() - c.mean.transpose();
    c.cov = (Xc.transpose() * (Xc.array().colwise() * r.array()).matrix()) / nk;
    c.cov = 0.5 * (c.cov + c.cov.transpose());
    c.cov.diagonal().array() += reg;
    c.weight = nk / static_cast<double>(n);
  }
}

std::vector<Eigen::VectorXd> kmeanspp(const ConstMap& X, std::size_t K, Rng& rng) {
  const Eigen::Index n = X.rows();
  std::vector<Eigen::VectorXd> centers;
  centers.push_back(X.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)))).transpose());
  Eigen::VectorXd d2 = (X.rowwise() - centers[0].transpose()).rowwise().squaredNorm();
  while (centers.size() < K) {
    const double total = d2.sum();
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= d2(i);
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
      while (d2(pick) == 0.0 && pick > 0) --pick;  // never land on an existing center
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(X.row(pick).transpose());
    d2 = d2.cwiseMin((X.rowwise() - centers.back().transpose()).rowwise().squaredNorm());
  }
  return centers;
}

std::vector<Component> init_components(const ConstMap& X, std::vector<Eigen::VectorXd> centers,
                                       std::size_t lloyd_iterations, double reg) {
  const Eigen::Index n = X.rows();
  const std::size_t K = centers.size();
  std::vector<Eigen::Index> assign(static_cast<std::size_t>(n), 0);
  auto assign_all = [&] {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        const double dist = (X.row(i).transpose() - centers[k]).squaredNorm();
        if (dist < best) {
          best = dist;
          assign[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(k);
        }
      }
    }
  };
  assign_all();
  for (std::size_t it = 0; it < lloyd_iterations; ++it) {
    std::vector<Eigen::VectorXd> sum(K, Eigen::VectorXd::Zero(X.cols()));
    std::vector<double> cnt(K, 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]);
      sum[k] += X.row(i).transpose();
      cnt[k] += 1.0;
    }
    for (std::size_t k = 0; k < K; ++k)
      if (cnt[k] > 0) centers[k] = sum[k] / cnt[k];
    const auto before = assign;
    assign_all();
    if (assign == before) break;
  }
  const Eigen::MatrixXd global = global_covariance(X, reg);
  std::vector<Component> comps(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Eigen::Index> members;
    for (Eigen::Index i = 0; i < n; ++i)
      if (static_cast<std::size_t>(assign[static_cast<std::size_t>(i)]) == k) members.push_back(i);
    comps[k].mean = centers[k];
    comps[k].weight = std::max<double>(static_cast<double>(members.size()), 1.0) / static_cast<double>(n);
    if (members.size() < 2) {
      comps[k].cov = global;
      continue;
    }
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(X.cols(), X.cols());
    for (auto i : members) {
      const Eigen::VectorXd dv = X.row(i).transpose() - centers[k];
      cov.noalias() += dv * dv.transpose();
    }
    comps[k].cov = cov / static_cast<double>(members.size());
    comps[k].cov.diagonal().array() += reg;
  }
  double wsum = 0.0;
  for (auto& c : comps) wsum += c.weight;
  for (auto& c : comps) c.weight /= wsum;
  return comps;
}

// Returns true when some component was re-seeded.
bool guard_degenerate(const ConstMap& X, const RowMatrix& resp, const Eigen::MatrixXd& global,
                      std::vector<Component>& comps, std::vector<std::string>& warnings) {
  bool any = false;
  const Eigen::Index n = X.rows();
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double nk = resp.col(static_cast<Eigen::Index>(k)).sum();
    if (nk >= 2.0) continue;
    // Farthest point from its nearest current mean.
    Eigen::Index far = 0;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : comps) best = std::min(best, (X.row(i).transpose() - c.mean).squaredNorm());
      if (best > far_d) {
        far_d = best;
        far = i;
      }
    }
    comps[k].mean = X.row(far).transpose();
    comps[k].cov = global;
    comps[k].weight = 1.0 / static_cast<double>(comps.size());
    double wsum = 0.0;
    for (auto& c : comps) wsum += c.weight;
    for (auto& c : comps) c.weight /= wsum;
    warnings.push_back("GMM component " + std::to_string(k) + " degenerate (mass " + std::to_string(nk) +
                       "); re-seeded at point " + std::to_string(far));
    any = true;
  }
  return any;
}

EmRun run_em(const ConstMap& X, std::vector<Component> comps, const GmmOptions& opts) {
  EmRun run;
  const Eigen::MatrixXd global = global_covariance(X, opts.regularization);
  const std::size_t max_reseeds = 4 * comps.size();
  const double n = static_cast<double>(X.rows());
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it <= opts.max_iterations; ++it) {
    const double ll = e_step(X, comps, run.resp);
    if (!std::isfinite(ll)) throw NumericalError("GMM log-likelihood is not finite");
    run.trace.push_back(ll);
    if (run.reseeds.size() < max_reseeds) {
      const std::size_t before = run.warnings.size();
      if (guard_degenerate(X, run.resp, global, comps, run.warnings)) {
        run.reseeds.insert(run.reseeds.end(), run.warnings.size() - before, run.trace.size() - 1);
        prev = -std::numeric_limits<double>::infinity();
        continue;
      }
    }
    if (ll - prev < opts.tolerance * n || it == opts.max_iterations) {
      run.ll = ll;
      break;
    }
    prev = ll;
    m_step(X, run.resp, opts.regularization, comps);
  }
  run.comps = std::move(comps);
  return run;
}

}  // namespace

GmmFit gmm_fit(const Matrix& Xm, std::size_t K, std::uint64_t seed, const GmmOptions& opts, WarningLog* warnings) {
  const std::size_t n = Xm.rows, d = Xm.cols;
  if (K < 2) throw InvalidArgument("GMM needs K >= 2, got " + std::to_string(K));
  if (n <= K) throw InvalidArgument("GMM needs more points than components: n = " + std::to_string(n) +
                                    ", K = " + std::to_string(K));
  if (d == 0) throw InvalidArgument("GMM input has no columns");
  if (opts.restarts == 0) throw InvalidArgument("GMM needs at least one restart");
  for (double v : Xm.data)
    if (!std::isfinite(v)) throw InvalidArgument("GMM input contains non-finite values");
  if (opts.initial_means && (opts.initial_means->rows != K || opts.initial_means->cols != d))
    throw DimensionMismatch("GMM initial means", K * d, opts.initial_means->rows * opts.initial_means->cols);

  const ConstMap X(Xm.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const std::size_t restarts = opts.initial_means ? 1 : opts.restarts;
  std::vector<EmRun> runs(restarts);
  std::vector<std::string> errors(restarts);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t r = 0; r < restarts; ++r) {
    try {
      std::vector<Eigen::VectorXd> centers;
      if (opts.initial_means) {
        for (std::size_t k = 0; k < K; ++k)
          centers.push_back(Eigen::Map<const Eigen::VectorXd>(opts.initial_means->row(k).data(),
                                                              static_cast<Eigen::Index>(d)));
      } else {
        Rng rng(derive_seed(seed, r));
        centers = kmeanspp(X, K, rng);
      }
      runs[r] = run_em(X, init_components(X, std::move(centers), opts.kmeans_iterations, opts.regularization), opts);
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  }

  std::size_t best = restarts;
  GmmFit fit;
  for (std::size_t r = 0; r < restarts; ++r) {
    fit.restart_log_likelihoods.push_back(errors[r].empty() ? runs[r].ll : -std::numeric_limits<double>::infinity());
    for (const auto& w : runs[r].warnings) warn(warnings, "restart " + std::to_string(r) + ": " + w);
    if (!errors[r].empty()) {
      warn(warnings, "GMM restart " + std::to_string(r) + " failed: " + errors[r]);
      continue;
    }
    if (best == restarts || runs[r].ll > runs[best].ll) best = r;
  }
  if (best == restarts) throw NumericalError("every GMM restart failed: " + errors[0]);

  EmRun& w = runs[best];
  fit.winning_restart = best;
  fit.log_likelihood = w.ll;
  fit.trace = std::move(w.trace);
  fit.reseeds = std::move(w.reseeds);
  fit.means = Matrix(K, d);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = w.comps[k];
    for (std::size_t j = 0; j < d; ++j) fit.means(k, j) = c.mean(static_cast<Eigen::Index>(j));
    Matrix cov(d, d);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(a, b) = c.cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    fit.covariances.push_back(std::move(cov));
    fit.weights.push_back(c.weight);
  }
  fit.labels.n_domains = K;
  fit.labels.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    w.resp.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    fit.labels.labels[i] = static_cast<std::uint32_t>(arg);
  }
  fit.labels.posterior = to_matrix(w.resp);
  return fit;
}

DomainLabels gmm_cluster(const Matrix& X, std::size_t K, std::uint64_t seed, WarningLog* warnings) {
  return gmm_fit(X, K, seed, {}, warnings).labels;
}

// ---------------------------------------------------------------------------

DomainLabels refine_labels(const DomainLabels& in, const Matrix& coords, std::size_t r) {
  const std::size_t n = in.labels.size();
  if (coords.cols != n) throw DimensionMismatch("refine: coordinate columns vs labels", n, coords.cols);
  if (r == 0) throw InvalidArgument("refine needs r >= 1");
  if (r >= n) throw InvalidArgument("refine r = " + std::to_string(r) + " must be below n = " + std::to_string(n));
  const Matrix pts = coords.transposed();
  const auto knn = kernels::knn_search(pts.data.data(), n, pts.cols, r);

  std::uint32_t top = 0;
  for (auto l : in.labels) top = std::max(top, l);
  std::vector<std::size_t> votes(static_cast<std::size_t>(top) + 1, 0);

  DomainLabels out;
  out.n_domains = in.n_domains;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < r; ++t) ++votes[in.labels[knn.index[i * r + t]]];
    std::size_t best_count = 0;
    for (std::size_t t = 0; t < r; ++t) best_count = std::max(best_count, votes[in.labels[knn.index[i * r + t]]]);
    std::size_t n_best = 0;
    std::uint32_t best = in.labels[i];
    for (std::size_t t = 0; t < r; ++t) {
      const std::uint32_t l = in.labels[knn.index[i * r + t]];
      if (votes[l] == best_count) {
        ++n_best;
        best = l;
      }
      votes[l] = 0;  // each distinct label counted once; also resets for the next cell
    }
    out.labels[i] = n_best == 1 ? best : in.labels[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Information scores

namespace {

struct Contingency {
  double n = 0;
  std::vector<double> a, b;  // row (truth) and column (predicted) sums
  struct Cell {
    std::size_t i, j;
    double count;
  };
  std::vector<Cell> cells;  // nonzero entries, ascending (i, j)
};

// Relabel by first appearance so equal partitions produce equal code vectors.
std::vector<std::size_t> canonical(const std::vector<std::uint32_t>& y, std::size_t& n_codes) {
  std::vector<std::size_t> order(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t p, std::size_t q) { return y[p] < y[q]; });
  std::vector<std::pair<std::size_t, std::uint32_t>> firsts;  // (first position, id)
  for (std::size_t t = 0; t < order.size(); ++t)
    if (t == 0 || y[order[t]] != y[order[t - 1]]) firsts.emplace_back(order[t], y[order[t]]);
  std::sort(firsts.begin(), firsts.end());
  std::vector<std::pair<std::uint32_t, std::size_t>> code_of;
  for (std::size_t c = 0; c < firsts.size(); ++c) code_of.emplace_back(firsts[c].second, c);
  std::sort(code_of.begin(), code_of.end());
  std::vector<std::size_t> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    out[i] = std::lower_bound(code_of.begin(), code_of.end(), std::make_pair(y[i], std::size_t{0}))->second;
  n_codes = firsts.size();
  return out;
}

Contingency contingency(const std::vector<std::uint32_t>& y, const std::vector<std::uint32_t>& yh) {
  if (y.size() != yh.size()) throw DimensionMismatch("label vectors differ in length", y.size(), yh.size());
  if (y.empty()) throw InvalidArgument("label vectors are empty");
  std::size_t ka = 0, kb = 0;
  const auto cy = canonical(y, ka), ch = canonical(yh, kb);
  Contingency t;
  t.n = static_cast<double>(y.size());
  t.a.assign(ka, 0.0);
  t.b.assign(kb, 0.0);
  std::vector<std::uint64_t> keys(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    t.a[cy[i]] += 1.0;
    t.b[ch[i]] += 1.0;
    keys[i] = static_cast<std::uint64_t>(cy[i]) * kb + ch[i];
  }
  std::sort(keys.begin(), keys.end());
  for (std::size_t s = 0; s < keys.size();) {
    std::size_t e = s;
    while (e < keys.size() && keys[e] == keys[s]) ++e;
    t.cells.push_back({static_cast<std::size_t>(keys[s] / kb), static_cast<std::size_t>(keys[s] % kb),
                       static_cast<double>(e - s)});
    s = e;
  }
  return t;
}

double entropy(const std::vector<double>& counts, double n) {
  double h = 0.0;
  for (double c : counts) h += (c / n) * std::log(n / c);
  return h;
}

}  // namespace

double nmi(const std::vector<std::uint32_t>& truth, const std::vector<std::uint32_t>& predicted) {
  const auto t = contingency(truth, predicted);
  const double hy = entropy(t.a, t.n), hp = entropy(t.b, t.n);
  if (hy + hp == 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& c : t.cells) mi += (c.count / t.n) * std::log((t.n * c.count) / (t.a[c.i] * t.b[c.j]));
  return std::clamp(2.0 * mi / (hy + hp), 0.0, 1.0);
}

double hom(const std::vector<std::uint32_t>& truth, const std::vector<std::uint32_t>& predicted) {
  const auto t = contingency(truth, predicted);
  const double hy = entropy(t.a, t.n);
  if (hy == 0.0) return 1.0;
  double hcond = 0.0;
  for (const auto& c : t.cells) hcond += (c.count / t.n) * std::log(t.b[c.j] / c.count);
  return std::clamp(1.0 - hcond / hy, 0.0, 1.0);
}

EncodedLabels encode_labels(const std::vector<std::string>& labels) {
  EncodedLabels out;
  out.names = labels;
  std::sort(out.names.begin(), out.names.end());
  out.names.erase(std::unique(out.names.begin(), out.names.end()), out.names.end());
  out.codes.reserve(labels.size());
  for (const auto& l : labels)
    out.codes.push_back(
        static_cast<std::uint32_t>(std::lower_bound(out.names.begin(), out.names.end(), l) - out.names.begin()));
  return out;
}

void write_domain_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                      const DomainLabels& labels) {
  if (cell_ids.size() != labels.labels.size())
    throw DimensionMismatch("domain labels vs cell ids", cell_ids.size(), labels.labels.size());
  std::vector<std::string> text;
  text.reserve(labels.labels.size());
  for (auto l : labels.labels) text.push_back(std::to_string(l));
  ingest::write_labels_csv(path, cell_ids, text, "domain");
}

DomainLabels read_domain_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids) {
  const auto text = ingest::load_labels(path, cell_ids);
  DomainLabels out;
  out.labels.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const long long v = io::parse_int(text[i], i + 2, 2);
    if (v < 0) throw ParseError("negative domain id", i + 2, 2);
    out.labels.push_back(static_cast<std::uint32_t>(v));
    out.n_domains = std::max<std::size_t>(out.n_domains, static_cast<std::size_t>(v) + 1);
  }
  return out;
}

void write_metrics_json(const std::filesystem::path& path, double nmi_value, double hom_value) {
  nlohmann::ordered_json j;
  j["nmi"] = nmi_value;
  j["hom"] = hom_value;
  io::write_text(path, j.dump(2) + "\n");
}

}  // namespace cellscape::cluster
