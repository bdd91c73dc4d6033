#include "cellscape/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "cellscape/io.hpp"
#include "cellscape/kernels.hpp"

namespace cellscape::ingest {

namespace {

template <typename Seq>
void require_unique(const Seq& ids, const std::string& what) {
  std::unordered_set<std::string> seen;
  seen.reserve(ids.size());
  for (const auto& id : ids)
    if (!seen.insert(id).second) throw DuplicateIdentifier("duplicate " + what, id);
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

Matrix parse_dense(const std::vector<std::string>& lines, std::vector<std::string>& genes,
                   std::vector<std::string>& cells) {
  if (lines.empty()) throw ParseError("empty expression file", 1, 1);
  const auto header = io::split_csv(lines[0]);
  if (header.size() < 2) throw ParseError("header must list at least one cell", 1, 2);
  cells.assign(header.begin() + 1, header.end());
  std::vector<double> values;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto fields = io::split_csv(lines[r]);
    if (fields.size() != header.size())
      throw DimensionMismatch("row " + std::to_string(r + 1) + " field count differs from header", header.size(),
                              fields.size());
    genes.push_back(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) values.push_back(io::parse_double(fields[c], r + 1, c + 1));
  }
  return Matrix(genes.size(), cells.size(), std::move(values));
}

Matrix parse_triplet(const std::vector<std::string>& lines, std::vector<std::string>& genes,
                     std::vector<std::string>& cells) {
  std::size_t p = 0, n = 0;
  bool have_shape = false;
  Matrix X;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const auto tok = io::split_ws(lines[r]);
    if (tok.empty()) continue;
    if (tok[0] == "%shape") {
      if (tok.size() != 3) throw ParseError("%shape needs two counts", r + 1, 1);
      p = static_cast<std::size_t>(io::parse_int(tok[1], r + 1, 2));
      n = static_cast<std::size_t>(io::parse_int(tok[2], r + 1, 3));
      X = Matrix(p, n);
      have_shape = true;
      continue;
    }
    if (tok[0] == "%genes") {
      genes.assign(tok.begin() + 1, tok.end());
      continue;
    }
    if (tok[0] == "%cells") {
      cells.assign(tok.begin() + 1, tok.end());
      continue;
    }
    if (tok[0].starts_with("%")) continue;
    if (!have_shape) throw ParseError("entry before %shape header", r + 1, 1);
    if (tok.size() != 3) throw ParseError("expected 'row col value'", r + 1, 1);
    const long long i = io::parse_int(tok[0], r + 1, 1);
    const long long j = io::parse_int(tok[1], r + 1, 2);
    const double v = io::parse_double(tok[2], r + 1, 3);
    if (i < 0 || static_cast<std::size_t>(i) >= p) throw ParseError("row index out of range", r + 1, 1);
    if (j < 0 || static_cast<std::size_t>(j) >= n) throw ParseError("column index out of range", r + 1, 2);
    X(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) += v;
  }
  if (!have_shape) throw ParseError("missing %shape header", 1, 1);
  if (genes.empty())
    for (std::size_t g = 0; g < p; ++g) genes.push_back("gene_" + std::to_string(g));
  if (genes.size() != p) throw DimensionMismatch("%genes count differs from %shape", p, genes.size());
  if (!cells.empty() && cells.size() != n) throw DimensionMismatch("%cells count differs from %shape", n, cells.size());
  return X;
}

struct CoordRow {
  std::string id;
  double x, y;
};

std::vector<CoordRow> parse_coords(const std::vector<std::string>& lines) {
  std::vector<CoordRow> rows;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto f = io::split_csv(lines[r]);
    if (f.size() != 3) throw ParseError("coordinates need 'cell_id,x,y'", r + 1, f.size());
    double tmp;
    if (r == 0 && !io::try_parse_double(f[1], tmp) && !io::try_parse_double(f[2], tmp)) continue;  // header
    rows.push_back({f[0], io::parse_double(f[1], r + 1, 2), io::parse_double(f[2], r + 1, 3)});
  }
  return rows;
}

}  // namespace

void ExpressionDataset::validate(bool require_nonnegative) const {
  const std::size_t p = X.rows, n = X.cols;
  if (gene_names.size() != p) throw DimensionMismatch("gene name count vs matrix rows", p, gene_names.size());
  if (cell_ids.size() != n) throw DimensionMismatch("cell id count vs matrix columns", n, cell_ids.size());
  if (coords.rows != 2) throw DimensionMismatch("coordinate rows", 2, coords.rows);
  if (coords.cols != n) throw DimensionMismatch("coordinate columns vs cells", n, coords.cols);
  require_unique(gene_names, "gene name");
  require_unique(cell_ids, "cell id");
  if (!all_finite(X)) throw NumericalError("expression matrix contains NaN or Inf");
  if (!all_finite(coords)) throw NumericalError("coordinates contain NaN or Inf");
  if (require_nonnegative)
    for (std::size_t i = 0; i < X.size(); ++i)
      if (X.data[i] < 0.0)
        throw InvalidArgument("negative expression for gene '" + gene_names[i / n] + "' in cell '" +
                              cell_ids[i % n] + "'");
  if (batch_labels && batch_labels->size() != n) throw DimensionMismatch("batch labels", n, batch_labels->size());
  if (type_labels && type_labels->size() != n) throw DimensionMismatch("type labels", n, type_labels->size());
  if (raw_counts && (raw_counts->rows != p || raw_counts->cols != n))
    throw DimensionMismatch("raw count shape", p * n, raw_counts->rows * raw_counts->cols);
}

MatrixFormat parse_matrix_format(const std::string& name) {
  if (name == "dense-csv" || name == "dense") return MatrixFormat::dense_csv;
  if (name == "sparse-triplet" || name == "sparse") return MatrixFormat::sparse_triplet;
  throw InvalidArgument("unknown matrix format '" + name + "' (expected dense-csv or sparse-triplet)");
}

ExpressionDataset load_dataset(const std::filesystem::path& expr_path, const std::filesystem::path& coords_path,
                               MatrixFormat format, bool raw) {
  if (!std::filesystem::exists(expr_path)) throw IoError("expression file not found: " + expr_path.string());
  if (!std::filesystem::exists(coords_path)) throw IoError("coordinates file not found: " + coords_path.string());
  ExpressionDataset ds;
  const auto lines = io::read_lines(expr_path);
  ds.X = format == MatrixFormat::dense_csv ? parse_dense(lines, ds.gene_names, ds.cell_ids)
                                           : parse_triplet(lines, ds.gene_names, ds.cell_ids);
  require_unique(ds.gene_names, "gene name");

  const auto coords = parse_coords(io::read_lines(coords_path));
  const std::size_t n = ds.X.cols;
  if (coords.size() != n)
    throw DimensionMismatch("coordinate rows (" + std::to_string(coords.size()) + ") vs expression cells (" +
                                std::to_string(n) + ")",
                            n, coords.size());
  if (ds.cell_ids.empty())
    for (const auto& c : coords) ds.cell_ids.push_back(c.id);
  require_unique(ds.cell_ids, "cell id");

  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < coords.size(); ++i)
    if (!pos.emplace(coords[i].id, i).second) throw DuplicateIdentifier("duplicate cell id in coordinates", coords[i].id);
  ds.coords = Matrix(2, n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto it = pos.find(ds.cell_ids[j]);
    if (it == pos.end()) throw InvalidArgument("cell '" + ds.cell_ids[j] + "' has no coordinates");
    ds.coords(0, j) = coords[it->second].x;
    ds.coords(1, j) = coords[it->second].y;
  }
  if (raw) ds.raw_counts = ds.X;
  ds.validate(raw);
  return ds;
}

std::vector<std::string> load_labels(const std::filesystem::path& path, const std::vector<std::string>& cell_ids) {
  const auto lines = io::read_lines(path);
  std::unordered_map<std::string, std::string> by_id;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto f = io::split_csv(lines[r]);
    if (f.size() < 2) throw ParseError("labels need 'cell_id,label'", r + 1, f.size());
    if (r == 0 && f[0] == "cell_id") continue;
    if (!by_id.emplace(f[0], f[1]).second) throw DuplicateIdentifier("duplicate cell id in labels", f[0]);
  }
  if (by_id.size() != cell_ids.size())
    throw DimensionMismatch("label rows vs cells in '" + path.string() + "'", cell_ids.size(), by_id.size());
  std::vector<std::string> out;
  out.reserve(cell_ids.size());
  for (const auto& id : cell_ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw InvalidArgument("cell '" + id + "' missing from labels file " + path.string());
    out.push_back(it->second);
  }
  return out;
}

void write_dense_csv(const std::filesystem::path& path, const ExpressionDataset& ds) {
  std::ostringstream out;
  out << "gene_id";
  for (const auto& c : ds.cell_ids) out << ',' << c;
  out << '\n';
  for (std::size_t g = 0; g < ds.n_genes(); ++g) {
    out << ds.gene_names[g];
    for (std::size_t j = 0; j < ds.n_cells(); ++j) out << ',' << io::format_double(ds.X(g, j));
    out << '\n';
  }
  io::write_text(path, out.str());
}

void write_coords_csv(const std::filesystem::path& path, const ExpressionDataset& ds) {
  std::ostringstream out;
  out << "cell_id,x,y\n";
  for (std::size_t j = 0; j < ds.n_cells(); ++j)
    out << ds.cell_ids[j] << ',' << io::format_double(ds.coords(0, j)) << ',' << io::format_double(ds.coords(1, j))
        << '\n';
  io::write_text(path, out.str());
}

void write_labels_csv(const std::filesystem::path& path, const std::vector<std::string>& cell_ids,
                      const std::vector<std::string>& labels, const std::string& column) {
  if (cell_ids.size() != labels.size()) throw DimensionMismatch("labels vs cells", cell_ids.size(), labels.size());
  std::ostringstream out;
  out << "cell_id," << column << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) out << cell_ids[i] << ',' << labels[i] << '\n';
  io::write_text(path, out.str());
}

void write_gene_list(const std::filesystem::path& path, const std::vector<std::string>& genes) {
  std::ostringstream out;
  for (const auto& g : genes) out << g << '\n';
  io::write_text(path, out.str());
}

ExpressionDataset normalize_total(const ExpressionDataset& ds, double target) {
  if (!(target > 0.0)) throw InvalidArgument("normalization target must be positive");
  ExpressionDataset out = ds;
  const std::size_t p = ds.n_genes(), n = ds.n_cells();
  for (std::size_t j = 0; j < n; ++j) {
    double total = 0.0;
    for (std::size_t g = 0; g < p; ++g) {
      const double v = ds.X(g, j);
      if (v < 0.0) throw InvalidArgument("negative expression in cell '" + ds.cell_ids[j] + "'");
      total += v;
    }
    if (total <= 0.0) throw InvalidArgument("cell '" + ds.cell_ids[j] + "' has no counts");
    const double scale = target / total;
    for (std::size_t g = 0; g < p; ++g) out.X(g, j) = ds.X(g, j) * scale;
  }
  return out;
}

ExpressionDataset log1p_transform(const ExpressionDataset& ds) {
  ExpressionDataset out = ds;
  for (double& v : out.X.data) {
    if (v < 0.0) throw InvalidArgument("log1p of negative expression");
    v = std::log1p(v);
  }
  return out;
}

std::vector<double> hvg_statistic(const Matrix& counts) {
  const std::size_t p = counts.rows, n = counts.cols;
  if (n < 2) throw InvalidArgument("highly variable gene selection needs at least 2 cells");
  std::vector<double> mean(p), var(p);
#pragma omp parallel for schedule(static)
  for (long gg = 0; gg < static_cast<long>(p); ++gg) {
    const auto g = static_cast<std::size_t>(gg);
    const auto row = counts.row(g);
    double s = 0.0;
    for (double v : row) s += v;
    const double m = s / static_cast<double>(n);
    double ss = 0.0;
    for (double v : row) ss += (v - m) * (v - m);
    mean[g] = m;
    var[g] = ss / static_cast<double>(n - 1);
  }

  // Least-squares power-law trend log10(var) = a + b log10(mean) over genes
  // with positive mean and variance.
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t fit = 0;
  for (std::size_t g = 0; g < p; ++g) {
    if (!(mean[g] > 0.0) || !(var[g] > 0.0)) continue;
    const double x = std::log10(mean[g]), y = std::log10(var[g]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++fit;
  }
  double intercept = 0.0, slope = 0.0;
  if (fit > 0) {
    const double f = static_cast<double>(fit);
    const double vx = sxx / f - (sx / f) * (sx / f);
    if (fit >= 2 && vx > 1e-12) {
      slope = (sxy / f - (sx / f) * (sy / f)) / vx;
      intercept = sy / f - slope * sx / f;
    } else {
      intercept = sy / f;
    }
  }

  const double clip = std::sqrt(static_cast<double>(n));
  std::vector<double> stat(p, 0.0);
#pragma omp parallel for schedule(static)
  for (long gg = 0; gg < static_cast<long>(p); ++gg) {
    const auto g = static_cast<std::size_t>(gg);
    if (!(var[g] > 0.0) || !(mean[g] > 0.0)) continue;
    const double sd = std::sqrt(std::pow(10.0, intercept + slope * std::log10(mean[g])));
    const auto row = counts.row(g);
    double s = 0.0;
    std::vector<double> z(n);
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = std::clamp((row[j] - mean[g]) / sd, -clip, clip);
      s += z[j];
    }
    const double m = s / static_cast<double>(n);
    double ss = 0.0;
    for (double v : z) ss += (v - m) * (v - m);
    stat[g] = ss / static_cast<double>(n - 1);
  }
  return stat;
}

std::vector<std::size_t> select_hvg(const ExpressionDataset& ds, std::size_t n_top) {
  if (!ds.raw_counts) throw InvalidArgument("highly variable gene selection requires raw counts");
  const std::size_t p = ds.raw_counts->rows;
  if (n_top == 0) throw InvalidArgument("n_top must be positive");
  if (n_top > p)
    throw InvalidArgument("requested " + std::to_string(n_top) + " highly variable genes but only " +
                          std::to_string(p) + " genes are present");
  const auto stat = hvg_statistic(*ds.raw_counts);
  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return stat[a] > stat[b]; });
  order.resize(n_top);
  return order;
}

ExpressionDataset subset_genes(const ExpressionDataset& ds, const std::vector<std::size_t>& genes) {
  ExpressionDataset out;
  const std::size_t n = ds.n_cells();
  out.X = Matrix(genes.size(), n);
  if (ds.raw_counts) out.raw_counts = Matrix(genes.size(), n);
  for (std::size_t r = 0; r < genes.size(); ++r) {
    if (genes[r] >= ds.n_genes()) throw InvalidArgument("gene index out of range");
    std::copy_n(ds.X.row(genes[r]).begin(), n, out.X.row(r).begin());
    if (ds.raw_counts) std::copy_n(ds.raw_counts->row(genes[r]).begin(), n, out.raw_counts->row(r).begin());
    out.gene_names.push_back(ds.gene_names[genes[r]]);
  }
  out.coords = ds.coords;
  out.cell_ids = ds.cell_ids;
  out.batch_labels = ds.batch_labels;
  out.type_labels = ds.type_labels;
  return out;
}

ExpressionDataset subset_cells(const ExpressionDataset& ds, const std::vector<std::size_t>& cells) {
  ExpressionDataset out;
  const std::size_t p = ds.n_genes(), m = cells.size();
  out.X = Matrix(p, m);
  out.coords = Matrix(2, m);
  if (ds.raw_counts) out.raw_counts = Matrix(p, m);
  if (ds.batch_labels) out.batch_labels.emplace();
  if (ds.type_labels) out.type_labels.emplace();
  for (std::size_t c = 0; c < m; ++c) {
    const std::size_t j = cells[c];
    if (j >= ds.n_cells()) throw InvalidArgument("cell index out of range");
    for (std::size_t g = 0; g < p; ++g) {
      out.X(g, c) = ds.X(g, j);
      if (ds.raw_counts) (*out.raw_counts)(g, c) = (*ds.raw_counts)(g, j);
    }
    out.coords(0, c) = ds.coords(0, j);
    out.coords(1, c) = ds.coords(1, j);
    out.cell_ids.push_back(ds.cell_ids[j]);
    if (ds.batch_labels) out.batch_labels->push_back((*ds.batch_labels)[j]);
    if (ds.type_labels) out.type_labels->push_back((*ds.type_labels)[j]);
  }
  out.gene_names = ds.gene_names;
  return out;
}

ExpressionDataset concat_cells(const std::vector<ExpressionDataset>& parts) {
  if (parts.empty()) throw InvalidArgument("nothing to concatenate");
  const auto& genes = parts.front().gene_names;
  std::size_t n = 0;
  bool raw = true, batch = true, types = true;
  for (const auto& p : parts) {
    if (p.gene_names != genes) throw InvalidArgument("datasets do not share the same gene axis");
    n += p.n_cells();
    raw = raw && p.raw_counts.has_value();
    batch = batch && p.batch_labels.has_value();
    types = types && p.type_labels.has_value();
  }
  ExpressionDataset out;
  out.gene_names = genes;
  const std::size_t pg = genes.size();
  out.X = Matrix(pg, n);
  out.coords = Matrix(2, n);
  if (raw) out.raw_counts = Matrix(pg, n);
  if (batch) out.batch_labels.emplace();
  if (types) out.type_labels.emplace();
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t j = 0; j < p.n_cells(); ++j) {
      for (std::size_t g = 0; g < pg; ++g) {
        out.X(g, off + j) = p.X(g, j);
        if (raw) (*out.raw_counts)(g, off + j) = (*p.raw_counts)(g, j);
      }
      out.coords(0, off + j) = p.coords(0, j);
      out.coords(1, off + j) = p.coords(1, j);
    }
    out.cell_ids.insert(out.cell_ids.end(), p.cell_ids.begin(), p.cell_ids.end());
    if (batch) out.batch_labels->insert(out.batch_labels->end(), p.batch_labels->begin(), p.batch_labels->end());
    if (types) out.type_labels->insert(out.type_labels->end(), p.type_labels->begin(), p.type_labels->end());
    off += p.n_cells();
  }
  require_unique(out.cell_ids, "cell id");
  return out;
}

CoexpressionMatrix pearson_coexpression(const ExpressionDataset& ds) { return pearson_coexpression(ds.X); }

CoexpressionMatrix pearson_coexpression(const Matrix& X) {
  const std::size_t p = X.rows, n = X.cols;
  if (n < 2) throw InvalidArgument("co-expression needs at least 2 cells, got " + std::to_string(n));
  Matrix unit(p, n);
  CoexpressionMatrix out{Matrix(p, p), std::vector<bool>(p, false)};
  for (std::size_t g = 0; g < p; ++g) {
    const auto row = X.row(g);
    double s = 0.0, scale = 0.0;
    for (double v : row) {
      s += v;
      scale = std::max(scale, std::abs(v));
    }
    const double m = s / static_cast<double>(n);
    double ss = 0.0;
    for (double v : row) ss += (v - m) * (v - m);
    // Rounding noise on a constant row is ~n*(eps*scale)^2.
    if (ss <= static_cast<double>(n) * 1e-28 * (1.0 + scale * scale)) {
      out.constant_gene[g] = true;
      continue;
    }
    const double inv = 1.0 / std::sqrt(ss);
    auto u = unit.row(g);
    for (std::size_t j = 0; j < n; ++j) u[j] = (row[j] - m) * inv;
  }
  kernels::gemm_nt(p, n, p, unit.data.data(), unit.data.data(), out.C.data.data());
  for (std::size_t a = 0; a < p; ++a) {
    out.C(a, a) = 1.0;
    for (std::size_t b = a + 1; b < p; ++b) {
      const double v = (out.constant_gene[a] || out.constant_gene[b]) ? 0.0 : std::clamp(out.C(a, b), -1.0, 1.0);
      out.C(a, b) = v;
      out.C(b, a) = v;
    }
  }
  return out;
}

void write_coexpression_csv(const std::filesystem::path& path, const CoexpressionMatrix& c,
                            const std::vector<std::string>& gene_names) {
  std::ostringstream out;
  out << "gene_id";
  for (const auto& g : gene_names) out << ',' << g;
  out << '\n';
  for (std::size_t a = 0; a < c.C.rows; ++a) {
    out << gene_names[a];
    for (std::size_t b = 0; b < c.C.cols; ++b) out << ',' << io::format_double(c.C(a, b));
    out << '\n';
  }
  io::write_text(path, out.str());
}

ExpressionDataset combat_correct(const ExpressionDataset& ds, WarningLog* warnings, const ComBatOptions& options) {
  if (!ds.batch_labels) throw InvalidArgument("batch correction requires batch labels");
  const std::size_t p = ds.n_genes(), n = ds.n_cells();
  const auto& labels = *ds.batch_labels;
  if (labels.size() != n) throw DimensionMismatch("batch labels vs cells", n, labels.size());

  std::vector<std::string> names;
  std::vector<std::size_t> batch_of(n);
  {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t j = 0; j < n; ++j) {
      auto [it, inserted] = index.emplace(labels[j], names.size());
      if (inserted) names.push_back(labels[j]);
      batch_of[j] = it->second;
    }
  }
  const std::size_t nb = names.size();
  if (nb < 2) {
    warn(warnings, "combat: only one batch present; data left unchanged");
    return ds;
  }
  std::vector<std::size_t> size(nb, 0);
  for (std::size_t b : batch_of) ++size[b];
  for (std::size_t b = 0; b < nb; ++b)
    if (size[b] < 2) throw InvalidArgument("batch '" + names[b] + "' has a single cell; cannot estimate its scale");

  // Gene-wise standardization with the pooled within-batch variance.
  Matrix z(p, n);
  std::vector<double> grand(p, 0.0), sd(p, 0.0);
  std::vector<bool> usable(p, false);
  Matrix gamma_hat(nb, p), delta_hat(nb, p);  // delta as variance
  for (std::size_t g = 0; g < p; ++g) {
    std::vector<double> bmean(nb, 0.0);
    for (std::size_t j = 0; j < n; ++j) bmean[batch_of[j]] += ds.X(g, j);
    for (std::size_t b = 0; b < nb; ++b) bmean[b] /= static_cast<double>(size[b]);
    double alpha = 0.0;
    for (std::size_t b = 0; b < nb; ++b) alpha += static_cast<double>(size[b]) / static_cast<double>(n) * bmean[b];
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double r = ds.X(g, j) - bmean[batch_of[j]];
      ss += r * r;
    }
    const double s = std::sqrt(ss / static_cast<double>(n));
    grand[g] = alpha;
    sd[g] = s;
    if (!(s > 1e-12 * (1.0 + std::abs(alpha)))) continue;
    usable[g] = true;
    for (std::size_t j = 0; j < n; ++j) z(g, j) = (ds.X(g, j) - alpha) / s;
    std::vector<double> zs(nb, 0.0), zss(nb, 0.0);
    for (std::size_t j = 0; j < n; ++j) zs[batch_of[j]] += z(g, j);
    for (std::size_t b = 0; b < nb; ++b) gamma_hat(b, g) = zs[b] / static_cast<double>(size[b]);
    for (std::size_t j = 0; j < n; ++j) {
      const double r = z(g, j) - gamma_hat(batch_of[j], g);
      zss[batch_of[j]] += r * r;
    }
    for (std::size_t b = 0; b < nb; ++b) delta_hat(b, g) = zss[b] / static_cast<double>(size[b] - 1);
  }

  std::vector<std::size_t> genes;
  for (std::size_t g = 0; g < p; ++g)
    if (usable[g]) genes.push_back(g);
  if (genes.size() < p) warn(warnings, "combat: " + std::to_string(p - genes.size()) + " zero-variance genes left unchanged");

  Matrix gamma_star = gamma_hat, delta_star = delta_hat;
  const bool priors = genes.size() >= 2;
  if (!priors && (options.shrink_location || options.shrink_scale))
    warn(warnings, "combat: fewer than 2 informative genes; empirical-Bayes priors skipped");

  for (std::size_t b = 0; b < nb && priors; ++b) {
    const double ng = static_cast<double>(genes.size());
    double gbar = 0.0, dbar = 0.0;
    for (std::size_t g : genes) {
      gbar += gamma_hat(b, g);
      dbar += delta_hat(b, g);
    }
    gbar /= ng;
    dbar /= ng;
    double t2 = 0.0, s2 = 0.0;
    for (std::size_t g : genes) {
      t2 += (gamma_hat(b, g) - gbar) * (gamma_hat(b, g) - gbar);
      s2 += (delta_hat(b, g) - dbar) * (delta_hat(b, g) - dbar);
    }
    t2 /= ng - 1.0;
    s2 /= ng - 1.0;
    // Inverse-gamma hyperparameters by method of moments.
    const bool scale_prior = options.shrink_scale && s2 > 1e-300;
    const double a_prior = scale_prior ? (2.0 * s2 + dbar * dbar) / s2 : 0.0;
    const double b_prior = scale_prior ? (dbar * s2 + dbar * dbar * dbar) / s2 : 0.0;
    const bool loc_prior = options.shrink_location && t2 > 0.0;
    const double nbat = static_cast<double>(size[b]);

    for (std::size_t g : genes) {
      double g_old = gamma_hat(b, g), d_old = delta_hat(b, g);
      double g_new = g_old, d_new = d_old;
      for (int it = 0; it < options.max_iterations; ++it) {
        g_new = loc_prior ? (t2 * nbat * gamma_hat(b, g) + d_old * gbar) / (t2 * nbat + d_old) : gamma_hat(b, g);
        if (scale_prior) {
          double sum2 = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            if (batch_of[j] == b) sum2 += (z(g, j) - g_new) * (z(g, j) - g_new);
          d_new = (0.5 * sum2 + b_prior) / (nbat / 2.0 + a_prior - 1.0);
        }
        const double change = std::max(g_old != 0.0 ? std::abs(g_new - g_old) / std::abs(g_old) : std::abs(g_new - g_old),
                                       d_old != 0.0 ? std::abs(d_new - d_old) / std::abs(d_old) : std::abs(d_new - d_old));
        g_old = g_new;
        d_old = d_new;
        if (!(loc_prior || scale_prior) || change < options.tolerance) break;
      }
      gamma_star(b, g) = g_new;
      delta_star(b, g) = d_new;
    }
  }

  ExpressionDataset out = ds;
  for (std::size_t g : genes) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t b = batch_of[j];
      const double centered = z(g, j) - gamma_star(b, g);
      const double scale = std::sqrt(delta_star(b, g));
      const double adjusted = scale > 1e-300 ? centered / scale : 0.0;
      out.X(g, j) = sd[g] * adjusted + grand[g];
    }
  }
  return out;
}

}  // namespace cellscape::ingest
