/* Copyright 2026 The xmfuse Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <doctest.h>

#include "xmfuse/pipeline.hpp"

using namespace xmfuse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig tiny_config(std::uint64_t seed = 5, double gap = 1.0) {
  SynthConfig cfg;
  cfg.n_classes = 3;
  cfg.dim2d = 4;
  cfg.dim3d = 4;
  cfg.n_source = 300;
  cfg.n_target = 240;
  cfg.gap = gap;
  cfg.seed = seed;
  return cfg;
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(XMFUSE_CLI_PATH) + " " + args +
                    " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("run_synth writes the full scenario package") {
  TempDir dir("xmfuse_synth_a");
  auto out = run_synth(tiny_config(), dir.path);
  std::size_t tensors = 0, models = 0;
  for (const auto& entry : fs::directory_iterator(dir.path)) {
    if (entry.path().extension() == ".smt") ++tensors;
    if (entry.path().extension() == ".mdl") ++models;
  }
  CHECK(tensors == 9);
  CHECK(models == 2);
  CHECK(fs::exists(dir.path / "manifest.json"));
  CHECK(out.heads.meta.top1_2d > 0.9);

  SUBCASE("same seed, same bytes") {
    TempDir dir2("xmfuse_synth_b");
    run_synth(tiny_config(), dir2.path);
    for (const auto& entry : fs::directory_iterator(dir.path)) {
      auto name = entry.path().filename();
      CHECK(slurp(dir.path / name) == slurp(dir2.path / name));
    }
  }
}

TEST_CASE("manifest round trip and validation") {
  TempDir dir("xmfuse_manifest");
  auto out = run_synth(tiny_config(), dir.path);
  RunManifest m = load_manifest(out.manifest_path);
  CHECK(m.n_classes == 3);
  CHECK(m.files.size() == manifest_roles().size());

  SUBCASE("json round trip") {
    save_manifest(dir.path / "copy.json", m);
    RunManifest back = load_manifest(dir.path / "copy.json");
    CHECK(back.n_classes == m.n_classes);
    CHECK(back.files == m.files);
    CHECK(back.source_meta.top1_2d == m.source_meta.top1_2d);
    CHECK(back.params.tau == m.params.tau);
  }
  SUBCASE("missing referenced file") {
    fs::remove(dir.path / "target_truth.smt");
    CHECK_THROWS_AS(load_manifest(out.manifest_path), DataError);
  }
  SUBCASE("length mismatch across files") {
    save_tensor(dir.path / "target_truth.smt",
                tensor_from_labels(std::vector<std::int32_t>{0, 1}));
    CHECK_THROWS_AS(load_target_data(out.manifest_path), DataError);
  }
}

TEST_CASE("model files round trip") {
  TempDir dir("xmfuse_model_io");
  Rng rng(301);
  DualHeadModel model = DualHeadModel::random_init(6, 4, rng, 0.7);
  for (auto& v : model.xlate.bias) v = rng.normal();
  save_model(dir.path / "m.mdl", model);
  DualHeadModel back = load_model(dir.path / "m.mdl");
  CHECK(back.dim() == 6);
  CHECK(back.n_classes() == 4);
  // float32 storage: compare after pushing the original through float
  for (std::size_t i = 0; i < model.main.weights.size(); ++i)
    CHECK(back.main.weights.data()[i] ==
          static_cast<double>(static_cast<float>(model.main.weights.data()[i])));
  save_model(dir.path / "again.mdl", back);
  CHECK(slurp(dir.path / "m.mdl") == slurp(dir.path / "again.mdl"));
}

TEST_CASE("run_fuse") {
  TempDir dir("xmfuse_fuse");
  auto synth = run_synth(tiny_config(17, 0.5), dir.path);
  std::ostringstream report;

  SUBCASE("auto mode matches a standalone decision") {
    FuseOptions opt;
    auto fuse = run_fuse(synth.manifest_path, opt, report);
    TargetData data = load_target_data(synth.manifest_path);
    ProbMatrix p2 = softmax(data.logits2d);
    ProbMatrix p3 = softmax(data.logits3d);
    auto l2 = median_filter(p2, compute_medians(p2));
    auto l3 = median_filter(p3, compute_medians(p3));
    SwitchDecision expect = decide(data.manifest.source_meta, l2, l3, 0.5);
    CHECK(fuse.result.decision.ratio == expect.ratio);
    CHECK(fuse.result.decision.mode == expect.mode);
    CHECK(fuse.result.used == expect.mode);
    CHECK(fs::exists(dir.path / "labels.smt"));
    CHECK(report.str().find("Source Agreement") != std::string::npos);
  }
  SUBCASE("forced af overrides the ratio") {
    FuseOptions opt;
    opt.mode = FuseMode::kAf;
    auto fuse = run_fuse(synth.manifest_path, opt, report);
    CHECK(fuse.result.used == FusionMode::kAf);
    auto labels = labels_from_tensor(
        load_tensor(fuse.label_files.front().second));
    CHECK(labels.size() == 240);
  }
  SUBCASE("a tau sweep writes one labels file per tau") {
    FuseOptions opt;
    opt.mode = FuseMode::kEw;
    opt.taus = {0.5, 1.0, 2.0};
    auto fuse = run_fuse(synth.manifest_path, opt, report);
    CHECK(fuse.label_files.size() == 3);
    CHECK(fs::exists(dir.path / "labels_tau0.5.smt"));
    CHECK(fs::exists(dir.path / "labels_tau1.smt"));
    CHECK(fs::exists(dir.path / "labels_tau2.smt"));
  }
}

TEST_CASE("run_adapt") {
  TempDir dir("xmfuse_adapt");
  auto synth = run_synth(tiny_config(19, 1.5), dir.path);
  std::ostringstream report;
  auto fuse = run_fuse(synth.manifest_path, FuseOptions{}, report);
  const auto labels_path = fuse.label_files.front().second;

  SUBCASE("zero iterations copy the models bit for bit") {
    TrainConfig cfg;
    cfg.iterations = 0;
    auto files = run_adapt(synth.manifest_path, labels_path, cfg);
    CHECK(slurp(files.model2d_path) == slurp(dir.path / "model_2d.mdl"));
    CHECK(slurp(files.model3d_path) == slurp(dir.path / "model_3d.mdl"));
  }
  SUBCASE("training writes models and a csv trace") {
    TrainConfig cfg;
    cfg.iterations = 40;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.01;
    cfg.seed = 4;
    auto files = run_adapt(synth.manifest_path, labels_path, cfg);
    CHECK(fs::exists(files.model2d_path));
    CHECK(fs::exists(files.trace_path));
    std::string trace = slurp(files.trace_path);
    CHECK(trace.rfind("step,loss_pl,loss_xm,loss_tot", 0) == 0);
    CHECK(files.result.trace.size() == 40);
  }
  SUBCASE("bad labels length is a data error") {
    save_tensor(dir.path / "short.smt",
                tensor_from_labels(std::vector<std::int32_t>{0, 1, 2}));
    TrainConfig cfg;
    CHECK_THROWS_AS(
        run_adapt(synth.manifest_path, dir.path / "short.smt", cfg),
        DataError);
  }
}

TEST_CASE("full pipeline is deterministic end to end") {
  TempDir da("xmfuse_full_a");
  TempDir db("xmfuse_full_b");
  TrainConfig train_cfg;
  train_cfg.iterations = 60;
  train_cfg.batch_size = 32;
  train_cfg.learning_rate = 0.02;
  train_cfg.seed = 21;
  std::ostringstream sink_a, sink_b;
  auto a = run_full(tiny_config(23, 2.0), train_cfg, FuseOptions{}, da.path,
                    sink_a);
  auto b = run_full(tiny_config(23, 2.0), train_cfg, FuseOptions{}, db.path,
                    sink_b);
  CHECK(a.decision.ratio == b.decision.ratio);
  CHECK(a.used == b.used);
  CHECK(a.unadapted_ensemble.mean == b.unadapted_ensemble.mean);
  CHECK(a.adapted_ensemble.mean == b.adapted_ensemble.mean);
  CHECK(a.label_report.correct_pct == b.label_report.correct_pct);
  CHECK(slurp(da.path / "model_2d_adapted.mdl") ==
        slurp(db.path / "model_2d_adapted.mdl"));
}

TEST_CASE("command line end to end") {
  TempDir dir("xmfuse_cli");
  const auto cfg_path = dir.path / "synth.json";
  {
    nlohmann::json j = tiny_config(29, 1.0);
    std::ofstream out(cfg_path);
    out << j.dump();
  }
  const std::string manifest =
      (dir.path / "scenario" / "manifest.json").string();

  CHECK(run_cli("synth --config " + cfg_path.string() + " --out " +
                (dir.path / "scenario").string()) == 0);
  CHECK(run_cli("fuse --manifest " + manifest + " --tau 0.5,1,2") == 0);
  CHECK(run_cli("adapt --manifest " + manifest + " --labels " +
                (dir.path / "scenario" / "labels_tau1.smt").string() +
                " --seed 3") == 0);
  CHECK(run_cli("eval --manifest " + manifest) == 0);
  CHECK(run_cli("eval --manifest " + manifest + " --labels " +
                (dir.path / "scenario" / "labels_tau1.smt").string()) == 0);
  CHECK(run_cli("run --config " + cfg_path.string() + " --out " +
                (dir.path / "full").string() + " --seed 31") == 0);

  SUBCASE("config problems exit with 2") {
    std::ofstream bad(dir.path / "bad.json");
    bad << "{ not json";
    bad.close();
    CHECK(run_cli("synth --config " + (dir.path / "bad.json").string() +
                  " --out " + (dir.path / "x").string()) == 2);
    CHECK(run_cli("fuse") == 2);  // missing required flag
  }
  SUBCASE("eval without ground truth exits with 2") {
    RunManifest m = load_manifest(manifest);
    m.files.erase("target_truth");
    save_manifest(dir.path / "scenario" / "no_truth.json", m);
    CHECK(run_cli("eval --manifest " +
                  (dir.path / "scenario" / "no_truth.json").string()) == 2);
  }
  SUBCASE("corrupt tensors exit with 3") {
    std::ofstream garbage(dir.path / "scenario" / "target_truth.smt",
                          std::ios::binary);
    garbage << "not a tensor";
    garbage.close();
    CHECK(run_cli("eval --manifest " + manifest) == 3);
  }
  SUBCASE("training divergence exits with 4") {
    std::ofstream cfg(dir.path / "hot.json");
    cfg << R"({"optimizer":"sgd","learning_rate":1e308,"iterations":10,)"
        << R"("batch_size":8,"milestones":[]})";
    cfg.close();
    CHECK(run_cli("adapt --manifest " + manifest + " --labels " +
                  (dir.path / "scenario" / "labels_tau1.smt").string() +
                  " --train-config " + (dir.path / "hot.json").string()) ==
          4);
  }
}
