#pragma once

// Embedding -> domain labels: PCA, Gaussian-mixture EM, spatial majority
// vote, and the NMI / HOM agreement scores.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/error.hpp"
#include "cellscape/matrix.hpp"

namespace cellscape::cluster {

struct DomainLabels {
  std::vector<std::uint32_t> labels;
  std::size_t n_domains = 0;
  std::optional<Matrix> posterior;  // n x K responsibilities
};

struct PcaResult {
  Matrix scores;                    // n x k
  Matrix components;                // k x d, unit rows
  std::vector<double> eigenvalues;  // descending, covariance with 1/(n-1)
  std::vector<double> mean;         // length d
};

/// Top-k principal axes of the centered rows of Z. The largest-magnitude
/// loading of each axis is made positive.
PcaResult pca(const Matrix& Z, std::size_t k);
Matrix pca_reduce(const Matrix& Z, std::size_t k = 30);

/// PCA to k dimensions, or a copy of Z when it already has at most k columns.
Matrix reduce_for_clustering(const Matrix& Z, std::size_t k, WarningLog* warnings = nullptr);

struct GmmOptions {
  std::size_t restarts = 5;
  std::size_t max_iterations = 500;
  double tolerance = 1e-10;  // stop when the per-point log-likelihood gain is below this
  double regularization = 1e-6;
  std::size_t kmeans_iterations = 10;
  std::optional<Matrix> initial_means;  // K x d; replaces k-means++ for every restart
};

struct GmmFit {
  DomainLabels labels;
  Matrix means;                         // K x d
  std::vector<Matrix> covariances;      // K of d x d, regularized
  std::vector<double> weights;          // K
  double log_likelihood = 0.0;
  std::vector<double> trace;            // per-iteration log-likelihood of the winning restart
  std::vector<std::size_t> reseeds;     // trace indices after which a component was re-seeded
  std::size_t winning_restart = 0;
  std::vector<double> restart_log_likelihoods;
};

/// Full-covariance EM. Requires n > K >= 2.
GmmFit gmm_fit(const Matrix& X, std::size_t K, std::uint64_t seed, const GmmOptions& opts = {},
               WarningLog* warnings = nullptr);
DomainLabels gmm_cluster(const Matrix& X, std::size_t K, std::uint64_t seed, WarningLog* warnings = nullptr);

/// One synchronous majority-vote pass over the r nearest neighbors of each
/// cell (self excluded). coords is dim x n. Ties keep the current label.
DomainLabels refine_labels(const DomainLabels& labels, const Matrix& coords, std::size_t r = 15);

/// Natural-log information scores over arbitrary integer label ids.
double nmi(const std::vector<std::uint32_t>& truth, const std::vector<std::uint32_t>& predicted);
double hom(const std::vector<std::uint32_t>& truth, const std::vector<std::uint32_t>& predicted);

/// Dense codes for string labels, numbered by sorted order of the distinct values.
struct EncodedLabels {
  std::vector<std::uint32_t> codes;
  std::vector<std::string> names;
};
EncodedLabels encode_labels(const std::vector<std::string>& labels);

void write_domain_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                      const DomainLabels& labels);
DomainLabels read_domain_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids);
void write_metrics_json(const std::filesystem::path& path, double nmi_value, double hom_value);

}  // namespace cellscape::cluster
