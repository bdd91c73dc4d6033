#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/error.hpp"
#include "cellscape/matrix.hpp"

namespace cellscape::ingest {

/// Expression matrix X (genes x cells) with per-cell tissue coordinates.
struct ExpressionDataset {
  Matrix X;       // p x n
  Matrix coords;  // 2 x n, columns align with X
  std::vector<std::string> gene_names;
  std::vector<std::string> cell_ids;
  std::optional<std::vector<std::string>> batch_labels;
  std::optional<std::vector<std::string>> type_labels;
  std::optional<Matrix> raw_counts;

  std::size_t n_genes() const noexcept { return X.rows; }
  std::size_t n_cells() const noexcept { return X.cols; }

  /// Throws on any broken invariant (shape, uniqueness, non-finite values).
  /// `require_nonnegative` is for data that has not been harmonized yet.
  void validate(bool require_nonnegative = false) const;
};

enum class MatrixFormat { dense_csv, sparse_triplet };

MatrixFormat parse_matrix_format(const std::string& name);

/// Dense CSV: header `gene_id,<cell>...`, one gene per row.
/// Sparse triplet: `%shape p n`, optional `%genes ...` / `%cells ...` lines,
/// then `row col value` lines (0-based). Coordinates CSV: `cell_id,x,y`.
/// With `raw`, values must be non-negative and are kept as raw_counts;
/// otherwise the matrix is taken as already transformed (may be negative).
ExpressionDataset load_dataset(const std::filesystem::path& expr_path, const std::filesystem::path& coords_path,
                               MatrixFormat format, bool raw = true);

/// Reads `cell_id,label` rows and aligns them to `cell_ids`.
std::vector<std::string> load_labels(const std::filesystem::path& path, const std::vector<std::string>& cell_ids);

void write_dense_csv(const std::filesystem::path& path, const ExpressionDataset& ds);
void write_coords_csv(const std::filesystem::path& path, const ExpressionDataset& ds);
void write_labels_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                      const std::vector<std::string>& labels, const std::string& column = "label");
void write_gene_list(const std::filesystem::path& path, const std::vector<std::string>& genes);

ExpressionDataset normalize_total(const ExpressionDataset& ds, double target = 1e4);
ExpressionDataset log1p_transform(const ExpressionDataset& ds);

/// Top `n_top` genes by the clipped variance-stabilized statistic on raw
/// counts, best first; ties go to the lower index.
std::vector<std::size_t> select_hvg(const ExpressionDataset& ds, std::size_t n_top = 3000);

/// Per-gene statistic used by select_hvg (exposed for diagnostics and tests).
std::vector<double> hvg_statistic(const Matrix& counts);

/// Keeps the given gene rows (in the given order) in X and raw_counts.
ExpressionDataset subset_genes(const ExpressionDataset& ds, const std::vector<std::size_t>& genes);

/// Keeps the given cells (in the given order).
ExpressionDataset subset_cells(const ExpressionDataset& ds, const std::vector<std::size_t>& cells);

/// Concatenates datasets over cells; gene axes must match exactly.
ExpressionDataset concat_cells(const std::vector<ExpressionDataset>& parts);

struct CoexpressionMatrix {
  Matrix C;                         // p x p
  std::vector<bool> constant_gene;  // flagged genes have zero off-diagonal
};

CoexpressionMatrix pearson_coexpression(const ExpressionDataset& ds);
CoexpressionMatrix pearson_coexpression(const Matrix& genes_by_cells);

void write_coexpression_csv(const std::filesystem::path& path, const CoexpressionMatrix& c,
                            const std::vector<std::string>& gene_names);

struct ComBatOptions {
  bool shrink_location = false;  // empirical-Bayes shrinkage of the additive batch effect
  bool shrink_scale = true;      // empirical-Bayes shrinkage of the multiplicative batch effect
  double tolerance = 1e-4;
  int max_iterations = 1000;
};

/// Parametric location/scale batch harmonization keyed on batch_labels.
/// A single batch returns the input unchanged and logs a warning.
ExpressionDataset combat_correct(const ExpressionDataset& ds, WarningLog* warnings = nullptr,
                                 const ComBatOptions& options = {});

}  // namespace cellscape::ingest
