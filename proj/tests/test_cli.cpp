#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "otfuse/checkpoint.hpp"
#include "support/builders.hpp"

namespace fs = std::filesystem;
using namespace otfuse;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("otfuse_cli_" + name);
  fs::remove_all(p);
  return p;
}

struct Invocation {
  int status;
  std::string out;
};

/// Runs the tool with stderr merged into the captured output.
Invocation run(const std::string& args) {
  ::unsetenv("OTFUSE_DATA_DIR");
  const std::string cmd = std::string(OTFUSE_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int st = ::pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string last_line(const std::string& s) {
  std::string t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  return t.substr(t.rfind('\n') == std::string::npos ? 0 : t.rfind('\n') + 1);
}

}  // namespace

TEST(Cli, TrainIsDeterministic) {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  const std::string args = "--train-samples 600 --seed 3 train --arch 12,8 --epochs 2 --batch 32";
  ASSERT_EQ(run("--out-dir " + a.string() + " " + args).status, 0);
  ASSERT_EQ(run("--out-dir " + b.string() + " " + args).status, 0);
  for (const char* f : {"model.otfm", "train_curve.csv", "manifest.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["config"]["arch"], nlohmann::json({12, 8}));
  EXPECT_EQ(manifest["outputs"].size(), 2u);
  EXPECT_EQ(manifest["outputs"][0]["path"], "model.otfm");
  EXPECT_EQ(manifest["outputs"][0]["bytes"], fs::file_size(a / "model.otfm"));
  EXPECT_EQ(slurp(a / "manifest.json").find(a.string()), std::string::npos);
  EXPECT_EQ(load_model((a / "model.otfm").string()).widths(), (std::vector<Index>{12, 8, 10}));
}

TEST(Cli, InvalidFlagsFailBeforeAnyOutput) {
  const fs::path d = scratch("invalid");
  const fs::path model = fs::temp_directory_path() / "otfuse_cli_valid.otfm";
  save_checkpoint(test::random_mlp(196, {6}, 10, 1), model.string());
  const std::vector<std::string> bad = {
      "train --arch 10,x",
      "train --arch 10,0",
      "train --lr -1",
      "fuse --models " + model.string() + " --align cosine",
      "fuse --models /nonexistent.otfm",
      "fuse --models " + model.string() + " --estimate 3",
      "fuse --models " + model.string() + " --weights 0.5,0.5",
      "prune --model " + model.string() + " --ratio 1.5",
      "prune --model " + model.string() + " --criterion l3",
      "eval",
      "experiment skill-transfer --sweep-wb 0.9:0.1:0.1",
      "experiment width-sweep --widths 10,5",
      "experiment prune-grid --ratios 1.2",
      "experiment prune-grid --layers 7",
      "experiment nonsense",
      "experiment skill-transfer --act-source nowhere",
      "experiment skill-transfer --special x",
      "--format xml eval --model " + model.string(),
  };
  for (const auto& args : bad) {
    const Invocation r = run("--out-dir " + d.string() + " " + args);
    EXPECT_NE(r.status, 0) << args;
    EXPECT_FALSE(fs::exists(d)) << args;
    EXPECT_NE(r.out.find("rror"), std::string::npos) << args << "\n" << r.out;
  }
  const Invocation r = run("--out-dir " + d.string() + " fuse --models /nonexistent.otfm");
  EXPECT_EQ(last_line(r.out), "error: --models: no such file '/nonexistent.otfm'");
}

TEST(Cli, SelfFusionReproducesWeights) {
  const NetworkModel m = test::random_mlp(196, {9, 7}, 10, 5);
  const fs::path model = fs::temp_directory_path() / "otfuse_cli_self.otfm";
  save_checkpoint(m, model.string());
  const NetworkModel stored = load_model(model.string());
  for (const char* align : {"wts", "acts"}) {
    const fs::path d = scratch(std::string("self_") + align);
    const Invocation r = run("--out-dir " + d.string() + " fuse --models " + model.string() + " --estimate 0 --align " + align);
    ASSERT_EQ(r.status, 0) << r.out;
    const NetworkModel fused = load_model((d / "fused.otfm").string());
    for (Index l = 0; l < m.depth(); ++l) EXPECT_EQ(fused.weight(l), stored.weight(l)) << align << " layer " << l;
    EXPECT_EQ(slurp(d / "fuse_report.csv"), "layer,distance,model_0\n0,0,0\n1,0,0\n2,0,0\n");
  }
}

TEST(Cli, PruneAndFuseDense) {
  const fs::path model = fs::temp_directory_path() / "otfuse_cli_prune.otfm";
  save_checkpoint(test::random_mlp(196, {10, 8}, 10, 6), model.string());
  const fs::path d = scratch("prune");
  ASSERT_EQ(run("--out-dir " + d.string() + " prune --model " + model.string() +
                " --layers 0 --ratio 0.5 --criterion l2 --fuse-dense on --eta 0.5")
                .status,
            0);
  EXPECT_EQ(load_model((d / "pruned.otfm").string()).widths(), (std::vector<Index>{5, 8, 10}));
  const auto manifest = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_GT(manifest["summary"]["net_sparsity"].get<double>(), 0.0);
}

TEST(Cli, EnsembleOfDuplicateEqualsSingleModel) {
  const fs::path model = fs::temp_directory_path() / "otfuse_cli_eval.otfm";
  save_checkpoint(test::random_mlp(196, {8}, 10, 7), model.string());
  const Invocation single = run("--out-dir " + scratch("eval1").string() + " eval --model " + model.string());
  const Invocation twice =
      run("--out-dir " + scratch("eval2").string() + " eval --ensemble " + model.string() + "," + model.string());
  ASSERT_EQ(single.status, 0) << single.out;
  ASSERT_EQ(twice.status, 0) << twice.out;
  EXPECT_EQ(last_line(single.out).rfind("accuracy ", 0), 0u);
  EXPECT_EQ(last_line(single.out), last_line(twice.out));
  EXPECT_EQ(slurp(scratch("x").parent_path() / "otfuse_cli_eval1" / "eval.csv"),
            slurp(scratch("x").parent_path() / "otfuse_cli_eval2" / "eval.csv"));
}

TEST(Cli, JsonLinesReport) {
  const fs::path model = fs::temp_directory_path() / "otfuse_cli_jsonl.otfm";
  save_checkpoint(test::random_mlp(196, {4}, 10, 8), model.string());
  const fs::path d = scratch("jsonl");
  ASSERT_EQ(run("--out-dir " + d.string() + " --format json-lines fuse --models " + model.string() + "," +
                model.string() + " --align wts")
                .status,
            0);
  const std::string text = slurp(d / "fuse_report.jsonl");
  EXPECT_EQ(text.substr(0, text.find('\n')), "{\"layer\":0,\"distance\":0,\"model_0\":0,\"model_1\":0}");
}

TEST(Cli, ExperimentPresetIsDeterministic) {
  const fs::path a = scratch("exp_a"), b = scratch("exp_b");
  const std::string args =
      " --train-samples 1500 experiment prune-grid --hidden 12,6 --epochs 1 --ratios 0.5 --criteria l1,random";
  ASSERT_EQ(run("--out-dir " + a.string() + args).status, 0);
  ASSERT_EQ(run("--out-dir " + b.string() + args).status, 0);
  const std::string csv = slurp(a / "prune_grid.csv");
  EXPECT_EQ(csv, slurp(b / "prune_grid.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,layer,ratio,criterion,pruned_acc,fused_acc,net_sparsity");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}
