#pragma once

// Banded synthetic tissue with known domains, and a harness that scores
// segmentation methods against it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/cluster.hpp"
#include "cellscape/ingest.hpp"
#include "cellscape/pipeline.hpp"

namespace cellscape::synthbench {

enum class BandAxis { x, y };
BandAxis parse_band_axis(const std::string& s);

struct SyntheticSpec {
  std::size_t n_cells = 2000;
  std::size_t n_genes = 200;
  std::size_t n_domains = 5;
  BandAxis band_axis = BandAxis::x;
  double program_strength = 5.0;
  double noise_sd = 0.5;
  std::optional<double> batch_shift;  // added to every value after clipping
  std::string sample_id;              // cell-id prefix and batch label when non-empty
  std::uint64_t seed = 7;

  void validate() const;
};

struct SyntheticTissue {
  ingest::ExpressionDataset data;  // X = raw_counts, type_labels set
  cluster::DomainLabels truth;
};

/// Cells uniform in the unit square; domain = band along the axis. Domain d
/// owns genes [d*m, (d+1)*m), m = floor(n_genes / n_domains), drawn as
/// Poisson(1 + strength) inside the domain and Poisson(1) elsewhere, plus
/// Gaussian noise clipped at 0.
SyntheticTissue generate_tissue(const SyntheticSpec& spec);

enum class Method { full, baseline, truth, random };
Method parse_method(const std::string& s);
std::string to_string(Method m);
std::vector<Method> parse_methods(const std::string& comma_list);

struct MethodSpec {
  std::string name;
  Method kind = Method::full;
  pipeline::PipelineConfig config;
};

struct BenchRun {
  std::string method;
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  double nmi = 0.0;
  double hom = 0.0;
  double seconds = 0.0;
  std::string error;  // empty on success
};

struct MethodSummary {
  std::string method;
  std::size_t ok_runs = 0;
  double mean_nmi = 0.0, sd_nmi = 0.0, median_nmi = 0.0;
  double mean_hom = 0.0, sd_hom = 0.0, median_hom = 0.0;
};

struct BenchmarkReport {
  std::vector<BenchRun> runs;  // method-major, repetition-minor
  std::vector<MethodSummary> summary;
};

/// Repetition r runs every method with seed = config.seed + r. A failing run
/// is recorded with its error and excluded from the summary.
BenchmarkReport run_benchmark(const ingest::ExpressionDataset& raw, const cluster::DomainLabels& truth,
                              const std::vector<MethodSpec>& methods, std::size_t repetitions,
                              const std::function<void(const BenchRun&)>& on_run = {});

std::vector<MethodSummary> summarize(const std::vector<BenchRun>& runs);

void write_report_json(const std::filesystem::path& path, const BenchmarkReport& report);
void write_report_csv(const std::filesystem::path& path, const BenchmarkReport& report);

}  // namespace cellscape::synthbench
