// cellscape command-line entry point.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cellscape/pipeline.hpp"

namespace pl = cellscape::pipeline;

namespace {

struct Command {
  std::string name;
  std::string description;
  std::vector<std::string> keys;  // exact keys, or "section." prefixes
};

bool selected(const std::string& key, const std::vector<std::string>& wanted) {
  for (const auto& w : wanted)
    if (w == key || (w.back() == '.' && key.rfind(w, 0) == 0)) return true;
  return false;
}

const std::vector<Command>& commands() {
  static const std::vector<Command> cmds = {
      {"preprocess", "normalize, log-transform and select highly variable genes",
       {"paths.expression", "paths.coords", "paths.batches", "paths.output", "paths.format", "preprocess."}},
      {"graph", "build the spatial cell graph from the preprocessed coordinates", {"paths.output", "graph."}},
      {"train", "train the dual-branch encoder and export embeddings",
       {"paths.output", "graph.", "layout.", "model.", "seed"}},
      {"segment", "cluster embeddings into spatial domains", {"paths.output", "cluster.", "seed"}},
      {"evaluate", "score domains against ground-truth labels", {"paths.output", "paths.labels"}},
      {"analyze", "domain transitions, markers, composition and gene-set enrichment",
       {"paths.output", "paths.types", "paths.gene_sets", "graph.", "analysis."}},
      {"integrate", "merge samples with batch correction and a block-diagonal graph",
       {"paths.samples", "paths.output", "paths.format", "preprocess.target_sum", "preprocess.n_hvg", "graph."}},
      {"simulate", "write a synthetic banded tissue with known domains", {"paths.output", "simulate."}},
      {"bench", "score full pipeline, baseline and controls over seeded repetitions",
       {"paths.expression", "paths.coords", "paths.labels", "paths.format", "paths.output", "preprocess.", "graph.",
        "layout.", "model.", "cluster.", "simulate.", "bench.", "seed"}},
  };
  return cmds;
}

void print_warnings(const cellscape::WarningLog& w) {
  for (const auto& m : w.messages()) std::cerr << "warning: " << m << "\n";
}

int run(const std::string& name, const pl::PipelineConfig& cfg) {
  cellscape::WarningLog w;
  try {
    if (name == "preprocess") pl::cmd_preprocess(cfg, &w);
    else if (name == "graph") pl::cmd_graph(cfg, &w);
    else if (name == "train")
      pl::cmd_train(cfg, &w, [&](const cellscape::model::EpochLog& e) {
        if (e.epoch % cfg.model.lr_halve_every == 0 || e.epoch + 1 == cfg.model.epochs)
          std::cerr << "epoch " << e.epoch << " lr " << e.lr << " recon " << e.loss_recon << " contrastive "
                    << e.loss_contrastive << "\n";
      });
    else if (name == "segment") pl::cmd_segment(cfg, &w);
    else if (name == "evaluate") {
      const auto [nmi, hom] = pl::cmd_evaluate(cfg, &w);
      std::cout << "nmi " << nmi << "\nhom " << hom << "\n";
    } else if (name == "analyze") pl::cmd_analyze(cfg, &w);
    else if (name == "integrate") pl::cmd_integrate(cfg, &w);
    else if (name == "simulate") pl::cmd_simulate(cfg, &w);
    else if (name == "bench") pl::cmd_bench(cfg, &w, [](const std::string& line) { std::cerr << line << "\n"; });
  } catch (const cellscape::NumericalError& e) {
    print_warnings(w);
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    print_warnings(w);
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  print_warnings(w);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial transcriptomics domain pipeline"};
  app.name("cellscape");
  app.require_subcommand(1);

  const pl::PipelineConfig defaults;
  struct Bound {
    const pl::ConfigKey* key;
    CLI::Option* option;
  };
  std::map<std::string, std::vector<Bound>> bound;
  std::map<std::string, std::string> config_path;
  // Stable storage for option values; one slot per (command, key).
  std::map<std::string, std::string> values;

  for (const auto& c : commands()) {
    auto* sub = app.add_subcommand(c.name, c.description);
    sub->add_option("--config", config_path[c.name], "config file ([section] / key = value)");
    for (const auto& k : pl::config_keys()) {
      if (!selected(k.key, c.keys)) continue;
      auto& slot = values[c.name + "/" + k.key];
      CLI::Option* opt = k.is_bool ? sub->add_flag(k.flag, slot, k.help)
                                   : sub->add_option(k.flag, slot, k.help);
      opt->default_str(k.get(defaults));
      bound[c.name].push_back({&k, opt});
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const auto& c : commands()) {
    auto* sub = app.get_subcommand(c.name);
    if (!sub->parsed()) continue;
    pl::PipelineConfig cfg;
    try {
      if (!config_path[c.name].empty()) pl::apply_config(cfg, pl::read_config_file(config_path[c.name]));
      for (const auto& b : bound[c.name])
        if (b.option->count() > 0) b.key->set(cfg, values[c.name + "/" + b.key->key]);
      pl::apply_seed_override(cfg);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
    return run(c.name, cfg);
  }
  return 1;
}
