#include "cellscape/synthbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "cellscape/io.hpp"
#include "cellscape/rng.hpp"

namespace cellscape::synthbench {

BandAxis parse_band_axis(const std::string& s) {
  if (s == "x") return BandAxis::x;
  if (s == "y") return BandAxis::y;
  throw InvalidArgument("band axis must be 'x' or 'y', got '" + s + "'");
}

void SyntheticSpec::validate() const {
  if (n_cells == 0) throw InvalidArgument("synthetic tissue needs at least one cell");
  if (n_domains == 0) throw InvalidArgument("synthetic tissue needs at least one domain");
  if (n_domains > n_genes)
    throw InvalidArgument("n_domains (" + std::to_string(n_domains) + ") exceeds n_genes (" + std::to_string(n_genes) + ")");
  if (!std::isfinite(program_strength) || program_strength < 0.0)
    throw InvalidArgument("program_strength must be finite and >= 0");
  if (!std::isfinite(noise_sd) || noise_sd < 0.0) throw InvalidArgument("noise_sd must be finite and >= 0");
  if (batch_shift && !std::isfinite(*batch_shift)) throw InvalidArgument("batch_shift must be finite");
}

SyntheticTissue generate_tissue(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_cells, p = spec.n_genes, D = spec.n_domains;
  const std::size_t m = p / D;
  Rng rng(spec.seed);
  Rng type_rng(derive_seed(spec.seed, 1));

  SyntheticTissue out;
  auto& ds = out.data;
  ds.X = Matrix(p, n);
  ds.coords = Matrix(2, n);
  for (std::size_t g = 0; g < p; ++g) ds.gene_names.push_back("gene_" + std::to_string(g));
  out.truth.n_domains = D;
  out.truth.labels.resize(n);
  std::vector<std::string> types(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.cell_ids.push_back(spec.sample_id + "cell_" + std::to_string(i));
    ds.coords(0, i) = rng.uniform();
    ds.coords(1, i) = rng.uniform();
    const double t = ds.coords(spec.band_axis == BandAxis::x ? 0 : 1, i);
    const auto d = std::min<std::size_t>(static_cast<std::size_t>(t * static_cast<double>(D)), D - 1);
    out.truth.labels[i] = static_cast<std::uint32_t>(d);
    // Each domain is dominated by its own cell type.
    const std::size_t type = type_rng.uniform() < 0.6 ? d : static_cast<std::size_t>(type_rng.below(D));
    types[i] = "type_" + std::to_string(type);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = out.truth.labels[i];
    for (std::size_t g = 0; g < p; ++g) {
      const bool program = g / m == d && g < D * m;
      double v = static_cast<double>(rng.poisson(1.0 + (program ? spec.program_strength : 0.0)));
      if (spec.noise_sd > 0.0) v += spec.noise_sd * rng.normal();
      v = std::max(v, 0.0);
      if (spec.batch_shift) v += *spec.batch_shift;
      ds.X(g, i) = v;
    }
  }
  ds.raw_counts = ds.X;
  ds.type_labels = std::move(types);
  if (!spec.sample_id.empty()) ds.batch_labels = std::vector<std::string>(n, spec.sample_id);
  return out;
}

Method parse_method(const std::string& s) {
  if (s == "full") return Method::full;
  if (s == "baseline") return Method::baseline;
  if (s == "truth") return Method::truth;
  if (s == "random") return Method::random;
  throw InvalidArgument("unknown benchmark method '" + s + "' (expected full, baseline, truth or random)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::baseline: return "baseline";
    case Method::truth: return "truth";
    case Method::random: return "random";
  }
  return "?";
}

std::vector<Method> parse_methods(const std::string& comma_list) {
  std::vector<Method> out;
  for (const auto& s : io::split_csv(comma_list))
    if (!s.empty()) out.push_back(parse_method(s));
  if (out.empty()) throw InvalidArgument("no benchmark methods given");
  return out;
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size();
  return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

}  // namespace

std::vector<MethodSummary> summarize(const std::vector<BenchRun>& runs) {
  std::vector<MethodSummary> out;
  std::vector<std::string> order;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
  for (const auto& name : order) {
    std::vector<double> nmi, hom;
    for (const auto& r : runs)
      if (r.method == name && r.error.empty()) nmi.push_back(r.nmi), hom.push_back(r.hom);
    MethodSummary s;
    s.method = name;
    s.ok_runs = nmi.size();
    if (!nmi.empty()) {
      s.mean_nmi = mean_of(nmi), s.sd_nmi = sd_of(nmi), s.median_nmi = median_of(nmi);
      s.mean_hom = mean_of(hom), s.sd_hom = sd_of(hom), s.median_hom = median_of(hom);
    }
    out.push_back(s);
  }
  return out;
}

BenchmarkReport run_benchmark(const ingest::ExpressionDataset& raw, const cluster::DomainLabels& truth,
                              const std::vector<MethodSpec>& methods, std::size_t repetitions,
                              const std::function<void(const BenchRun&)>& on_run) {
  if (truth.labels.size() != raw.n_cells())
    throw DimensionMismatch("benchmark truth labels vs cells", raw.n_cells(), truth.labels.size());
  if (methods.empty()) throw InvalidArgument("benchmark needs at least one method");
  BenchmarkReport report;
  for (const auto& ms : methods) {
    for (std::size_t r = 0; r < repetitions; ++r) {
      BenchRun run;
      run.method = ms.name;
      run.repetition = r;
      run.seed = ms.config.seed + r;
      pipeline::PipelineConfig cfg = ms.config;
      cfg.seed = run.seed;
      cfg.model.seed = run.seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        std::vector<std::uint32_t> labels;
        switch (ms.kind) {
          case Method::full: {
            const auto prep = pipeline::prepare(raw, cfg);
            labels = pipeline::run_full(prep, cfg).domains.labels;
            break;
          }
          case Method::baseline:
            labels = pipeline::run_baseline(pipeline::preprocess(raw, cfg), cfg).labels;
            break;
          case Method::truth:
            labels = truth.labels;
            break;
          case Method::random: {
            Rng rng(derive_seed(run.seed, 0xBE));
            labels.resize(raw.n_cells());
            for (auto& l : labels) l = static_cast<std::uint32_t>(rng.below(cfg.n_domains));
            break;
          }
        }
        run.nmi = cluster::nmi(truth.labels, labels);
        run.hom = cluster::hom(truth.labels, labels);
      } catch (const std::exception& e) {
        run.error = e.what();
      }
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (on_run) on_run(run);
      report.runs.push_back(std::move(run));
    }
  }
  report.summary = summarize(report.runs);
  return report;
}

void write_report_json(const std::filesystem::path& path, const BenchmarkReport& report) {
  nlohmann::ordered_json j;
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) {
    nlohmann::ordered_json e;
    e["method"] = r.method;
    e["repetition"] = r.repetition;
    e["seed"] = r.seed;
    if (r.error.empty()) {
      e["nmi"] = r.nmi;
      e["hom"] = r.hom;
    } else {
      e["error"] = r.error;
    }
    e["seconds"] = r.seconds;
    j["runs"].push_back(e);
  }
  j["summary"] = nlohmann::ordered_json::array();
  for (const auto& s : report.summary) {
    nlohmann::ordered_json e;
    e["method"] = s.method;
    e["ok_runs"] = s.ok_runs;
    e["nmi"] = {{"mean", s.mean_nmi}, {"sd", s.sd_nmi}, {"median", s.median_nmi}};
    e["hom"] = {{"mean", s.mean_hom}, {"sd", s.sd_hom}, {"median", s.median_hom}};
    j["summary"].push_back(e);
  }
  io::write_text(path, j.dump(2) + "\n");
}

void write_report_csv(const std::filesystem::path& path, const BenchmarkReport& report) {
  std::ostringstream o;
  o << "method,repetition,seed,nmi,hom,seconds,error\n";
  for (const auto& r : report.runs) {
    o << r.method << ',' << r.repetition << ',' << r.seed << ',';
    if (r.error.empty()) o << io::format_double(r.nmi) << ',' << io::format_double(r.hom);
    else o << ',';
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    o << ',' << io::format_double(r.seconds) << ',' << err << '\n';
  }
  io::write_text(path, o.str());
}

}  // namespace cellscape::synthbench
