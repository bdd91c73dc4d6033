#pragma once

// Domain-level summaries: inter-domain connectivity, marker genes,
// cell-type composition and gene-set enrichment.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cellscape/cluster.hpp"
#include "cellscape/error.hpp"
#include "cellscape/ingest.hpp"
#include "cellscape/matrix.hpp"
#include "cellscape/spatialgraph.hpp"

namespace cellscape::analysis {

struct TransitionGraph {
  std::vector<std::uint32_t> nodes;  // domain ids 0..D-1
  Matrix observed;                   // D x D inter-domain edge counts
  Matrix connectivity;               // D x D, symmetric, zero diagonal, max entry 1 (or all 0)
};

/// Observed / expected inter-domain edges, expected = deg_a * deg_b / (2|E|)
/// with deg_a the summed node degree of domain a, scaled by the matrix max.
/// Every domain id below labels.n_domains must have at least one cell.
TransitionGraph transition_graph(const cluster::DomainLabels& labels, const spatialgraph::SpatialGraph& g);

struct RankSumResult {
  double u = 0.0;  // statistic of the first group
  double p = 1.0;  // two-sided
  bool exact = false;
};

/// Mann-Whitney U with midranks. Exact enumeration when both groups have at
/// most 8 members, otherwise the tie-corrected normal approximation with a
/// continuity correction. All values tied -> p = 1.
RankSumResult rank_sum_test(std::span<const double> a, std::span<const double> b);

/// Benjamini-Hochberg step-up adjustment; output aligned with the input.
std::vector<double> benjamini_hochberg(const std::vector<double>& p);

struct GeneTest {
  std::string gene;
  std::size_t gene_index = 0;
  double u = 0.0;
  double p = 1.0;
  double p_adj = 1.0;
  double log2_fc = 0.0;
  double frac_in = 0.0;   // fraction of in-domain cells with expression > 0
  double frac_out = 0.0;
};

/// Every gene, in-domain vs the rest, sorted by adjusted p then |log2 fc|
/// (descending) then gene index.
std::vector<GeneTest> wilcoxon_dge(const ingest::ExpressionDataset& ds, const std::vector<std::uint32_t>& labels,
                                   std::uint32_t domain);

struct MarkerFilter {
  double max_p_adj = 0.05;
  double min_log2_fc = 0.25;
  std::size_t top = 5;
};
std::vector<GeneTest> select_markers(const std::vector<GeneTest>& tests, const MarkerFilter& filter = {});

struct CompositionMatrix {
  std::vector<std::uint32_t> domains;  // row ids (empty domains dropped)
  std::vector<std::string> types;      // column ids, sorted
  Matrix N;                            // D x T counts
  Matrix P;                            // row-normalized N
  std::vector<double> P_all;           // column totals over the grand total
};

/// n_domains = 0 takes the largest label + 1.
CompositionMatrix composition(const std::vector<std::uint32_t>& labels, const std::vector<std::string>& types,
                              std::size_t n_domains = 0, WarningLog* warnings = nullptr);

/// a.P - b.P; both must have identical domain and type axes.
Matrix composition_shift(const CompositionMatrix& a, const CompositionMatrix& b);

struct GeneSet {
  std::string name;
  std::string description;
  std::vector<std::string> genes;
};

/// `set_name<TAB>description<TAB>gene...` per line.
std::vector<GeneSet> read_gmt(const std::filesystem::path& path);

/// P(X >= k) for X ~ Hypergeometric(population, successes, draws).
double hypergeometric_upper_tail(std::size_t k, std::size_t population, std::size_t successes, std::size_t draws);

struct EnrichmentResult {
  std::string name;
  std::size_t set_size = 0;  // after intersecting with the universe
  std::size_t overlap = 0;
  double p = 1.0;
  double p_adj = 1.0;
  std::vector<std::string> overlap_genes;
};

/// One-sided over-representation of `markers` in each set; sorted by p then
/// input order.
std::vector<EnrichmentResult> geneset_enrichment(const std::vector<std::string>& markers,
                                                 const std::vector<std::string>& universe,
                                                 const std::vector<GeneSet>& gene_sets);

struct DomainMarkers {
  std::uint32_t domain = 0;
  std::vector<GeneTest> tests;
};
struct DomainEnrichment {
  std::uint32_t domain = 0;
  std::vector<EnrichmentResult> results;
};

void write_markers_csv(const std::filesystem::path& path, const std::vector<DomainMarkers>& markers);
void write_enrichment_csv(const std::filesystem::path& path, const std::vector<DomainEnrichment>& enrichment);
/// Edge list `domain_a,domain_b,observed,connectivity` over pairs a < b.
void write_transition_csv(const std::filesystem::path& path, const TransitionGraph& t);
/// Long format `domain,type,count,fraction`, then `all` rows with P_all.
void write_composition_csv(const std::filesystem::path& path, const CompositionMatrix& c);

}  // namespace cellscape::analysis
