#include "doctest.h"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <regex>
#include <string>

#include <json.hpp>

#include "cellscape/io.hpp"
#include "cellscape/pipeline.hpp"

#ifndef CELLSCAPE_CLI
#error "CELLSCAPE_CLI must name the cellscape executable"
#endif

using namespace cellscape;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;  // stdout + stderr
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" CELLSCAPE_CLI "\" " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (const auto n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& rel = "") const { return (rel.empty() ? path : path / rel).string(); }
};

// flag -> default shown in --help
std::map<std::string, std::string> help_defaults(const std::string& help) {
  std::map<std::string, std::string> out;
  const std::regex re(R"((--[a-z0-9-]+)(?: [A-Z]+)?(?: \[([^\]]*)\])?)");
  std::istringstream in(help);
  std::string line;
  while (std::getline(in, line)) {
    std::smatch m;
    if (std::regex_search(line, m, re) && line.find("  --") == 0) out[m[1]] = m[2].matched ? m[2].str() : "";
  }
  return out;
}

const char* kSmallModel = "--epochs 2 --hidden-dim 32 --embed-dim 16 --intrinsic-dim 16 --fused-dim 16 --cnn-channels 4,8";

}  // namespace

TEST_CASE("help lists every flag with the configured default") {
  const pipeline::PipelineConfig defaults;
  std::map<std::string, const pipeline::ConfigKey*> by_flag;
  for (const auto& k : pipeline::config_keys()) by_flag[k.flag] = &k;

  const std::map<std::string, std::vector<std::string>> required = {
      {"preprocess", {"--expression", "--coords", "--output", "--target-sum", "--n-hvg", "--combat"}},
      {"graph", {"--graph-method", "--graph-k", "--prune-percentile"}},
      {"train",
       {"--gat-layers", "--heads", "--hidden-dim", "--embed-dim", "--cnn-channels", "--intrinsic-dim", "--fused-dim",
        "--gamma", "--tau", "--mask-ratio", "--epochs", "--lr", "--weight-decay", "--lr-halve-every", "--max-anchors",
        "--leaky-slope", "--self-loops", "--cci-only", "--swap-budget", "--seed"}},
      {"segment", {"--n-domains", "--pca-k", "--refine", "--refine-r", "--segment-input", "--seed"}},
      {"evaluate", {"--labels", "--output"}},
      {"analyze", {"--transition-input", "--embedding-k", "--marker-max-p-adj", "--marker-top", "--gene-sets"}},
      {"integrate", {"--samples", "--graph-k"}},
      {"simulate", {"--sim-cells", "--sim-genes", "--sim-domains", "--sim-seed", "--sim-replicates"}},
      {"bench", {"--bench-repetitions", "--bench-methods", "--epochs", "--n-domains", "--seed"}},
  };
  for (const auto& [cmd, flags] : required) {
    CAPTURE(cmd);
    const auto r = run(cmd + " --help");
    CHECK(r.code == 0);
    const auto shown = help_defaults(r.output);
    CHECK(shown.count("--config") == 1);
    for (const auto& f : flags) {
      CAPTURE(f);
      CHECK(shown.count(f) == 1);
    }
    for (const auto& [flag, value] : shown) {
      if (flag == "--help" || flag == "--config") continue;
      CAPTURE(flag);
      REQUIRE(by_flag.count(flag) == 1);
      const auto expected = by_flag[flag]->get(defaults);
      if (!expected.empty()) CHECK(value == expected);
    }
  }
  CHECK(help_defaults(run("train --help").output).at("--epochs") == "400");
  CHECK(help_defaults(run("train --help").output).at("--lr") == "0.001");
  CHECK(help_defaults(run("segment --help").output).at("--n-domains") == "5");
}

TEST_CASE("usage and input errors exit with code 1") {
  TempDir dir("cellscape_test_cli_errors");
  CHECK(run("").code == 1);
  CHECK(run("bogus").code == 1);
  CHECK(run("train --no-such-flag").code == 1);
  CHECK(run("train --epochs abc").code == 1);

  io::write_text(dir.path / "expr.csv", "gene_id,c1,c2\ng1,1,2\ng2,3,0\ng3,5,5\n");
  io::write_text(dir.path / "coords.csv", "cell_id,x,y\nc1,0,0\nc2,1,0\n");
  auto r = run("preprocess --expression " + dir.str("expr.csv") + " --coords " + dir.str("nope.csv") + " --output " +
               dir.str("out"));
  CHECK(r.code == 1);
  CHECK(r.output.find(dir.str("nope.csv")) != std::string::npos);

  r = run("preprocess --expression " + dir.str("expr.csv") + " --coords " + dir.str("coords.csv") + " --output " +
          dir.str("out") + " --n-hvg 4");
  CHECK(r.code == 1);
  CHECK(r.output.find("only 3 genes") != std::string::npos);

  r = run("segment --output " + dir.str("empty"));
  CHECK(r.code == 1);
  CHECK(r.output.find(dir.str("empty") + "/coords.csv") != std::string::npos);

  io::write_text(dir.path / "bad.ini", "[model]\nepochs = many\n");
  r = run("train --config " + dir.str("bad.ini") + " --output " + dir.str("out"));
  CHECK(r.code == 1);
  CHECK(r.output.find("model.epochs") != std::string::npos);
}

TEST_CASE("preprocess on a 3x2 toy writes its outputs") {
  TempDir dir("cellscape_test_cli_toy");
  io::write_text(dir.path / "expr.csv", "gene_id,c1,c2\ng1,1,2\ng2,3,0\ng3,5,5\n");
  io::write_text(dir.path / "coords.csv", "cell_id,x,y\nc1,0,0\nc2,1,0\n");
  const auto r = run("preprocess --expression " + dir.str("expr.csv") + " --coords " + dir.str("coords.csv") +
                     " --output " + dir.str("out"));
  CHECK(r.code == 0);
  for (const char* f : {pipeline::files::hvg, pipeline::files::normalized, pipeline::files::coexpression})
    CHECK(fs::exists(dir.path / "out" / f));
}

TEST_CASE("numerical failure exits with code 2") {
  TempDir dir("cellscape_test_cli_nan");
  const auto out = dir.str();
  REQUIRE(run("simulate --output " + out + " --sim-cells 120 --sim-genes 20 --sim-domains 2").code == 0);
  REQUIRE(run("preprocess --expression " + dir.str("expression.csv") + " --coords " + dir.str("coords.csv") +
              " --output " + out)
              .code == 0);
  const auto r = run("train --output " + out + " " + kSmallModel + " --lr 1e300");
  CHECK(r.code == 2);
  CHECK(r.output.find("error:") != std::string::npos);
}

TEST_CASE("full chain, determinism and the seed override") {
  TempDir dir("cellscape_test_cli_chain");
  const auto out = dir.str();
  REQUIRE(run("simulate --output " + out + " --sim-cells 200 --sim-genes 30 --sim-domains 3").code == 0);
  REQUIRE(run("preprocess --expression " + dir.str("expression.csv") + " --coords " + dir.str("coords.csv") +
              " --output " + out)
              .code == 0);
  REQUIRE(run("graph --output " + out).code == 0);
  REQUIRE(run("train --output " + out + " " + kSmallModel).code == 0);
  const auto emb = io::read_file(dir.path / pipeline::files::embeddings);
  REQUIRE(run("train --output " + out + " " + kSmallModel).code == 0);
  CHECK(io::read_file(dir.path / pipeline::files::embeddings) == emb);

  REQUIRE(run("segment --output " + out + " --n-domains 3").code == 0);
  const auto domains = io::read_file(dir.path / pipeline::files::domains);
  REQUIRE(run("segment --output " + out + " --n-domains 3").code == 0);
  CHECK(io::read_file(dir.path / pipeline::files::domains) == domains);
  auto r = run("evaluate --output " + out);
  CHECK(r.code == 0);
  const auto metrics = nlohmann::json::parse(io::read_file(dir.path / pipeline::files::metrics));
  CHECK(metrics.contains("nmi"));
  CHECK(metrics.contains("hom"));
  CHECK(run("analyze --output " + out).code == 0);
  CHECK(fs::exists(dir.path / pipeline::files::markers));

  // Environment seed beats the flag and matches an explicit --seed run.
  REQUIRE(run("train --output " + out + " " + kSmallModel + " --seed 0", "CELLSCAPE_SEED=11").code == 0);
  const auto env_emb = io::read_file(dir.path / pipeline::files::embeddings);
  CHECK(env_emb != emb);
  REQUIRE(run("train --output " + out + " " + kSmallModel + " --seed 11").code == 0);
  CHECK(io::read_file(dir.path / pipeline::files::embeddings) == env_emb);

  // Config file values, overridden by flags.
  io::write_text(dir.path / "run.ini", "seed = 11\n[model]\nepochs = 2\nhidden_dim = 32\nembed_dim = 16\n"
                                       "intrinsic_dim = 16\nfused_dim = 16\ncnn_channels = 4,8\n");
  REQUIRE(run("train --config " + dir.str("run.ini") + " --output " + out).code == 0);
  CHECK(io::read_file(dir.path / pipeline::files::embeddings) == env_emb);
  REQUIRE(run("train --config " + dir.str("run.ini") + " --output " + out + " --seed 0").code == 0);
  CHECK(io::read_file(dir.path / pipeline::files::embeddings) == emb);

  REQUIRE(run("train --output " + out + " " + kSmallModel + " --cci-only").code == 0);
  CHECK_FALSE(fs::exists(dir.path / pipeline::files::embeddings_intrinsic));
  CHECK(fs::exists(dir.path / pipeline::files::embeddings_spatial));

  // Truth file with one row missing.
  const auto lines = io::read_lines(dir.path / pipeline::files::truth);
  std::string shorter;
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) shorter += lines[i] + "\n";
  io::write_text(dir.path / "short.csv", shorter);
  r = run("evaluate --output " + out + " --labels " + dir.str("short.csv"));
  CHECK(r.code != 0);
}

TEST_CASE("integrate command keeps samples disconnected") {
  TempDir dir("cellscape_test_cli_integrate");
  REQUIRE(run("simulate --output " + dir.str("sim") +
              " --sim-cells 150 --sim-genes 30 --sim-domains 3 --sim-replicates 2 --sim-batch-shift 3")
              .code == 0);
  REQUIRE(run("integrate --samples " + dir.str("sim/sample_0") + "," + dir.str("sim/sample_1") + " --output " +
              dir.str("int"))
              .code == 0);
  const auto edges = io::read_lines(dir.path / "int" / pipeline::files::graph);
  std::size_t n = 0;
  for (const auto& line : edges) {
    if (line.empty() || line[0] == '%') continue;
    const auto f = io::split_ws(line);
    CHECK((std::stoul(f[0]) < 150) == (std::stoul(f[1]) < 150));
    ++n;
  }
  CHECK(n > 0);
}
