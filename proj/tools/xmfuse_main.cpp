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

// Command-line front end for the fusion/adaptation pipeline.
//
//   xmfuse synth --config synth.json --out DIR
//   xmfuse fuse  --manifest DIR/manifest.json [--mode auto|af|ew]
//                [--tau 0.5,1,2] [--switch-threshold 0.5]
//   xmfuse adapt --manifest M --labels L.smt [--train-config T.json]
//   xmfuse eval  --manifest M [--model-2d A --model-3d B] [--labels L.smt]
//   xmfuse run   --config synth.json --out DIR [--train-config T.json]
//
// Exit codes: 0 ok, 2 configuration problem, 3 data problem, 4 numeric
// failure during training.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xmfuse/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

template <typename T>
T load_json_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw xmfuse::ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw xmfuse::ConfigError("config parse error in " + path.string() +
                              ": " + e.what());
  }
}

struct CliOptions {
  fs::path config;
  fs::path train_config;
  fs::path manifest;
  fs::path labels;
  fs::path model2d;
  fs::path model3d;
  fs::path out;
  std::string mode = "auto";
  std::vector<double> taus;
  double switch_threshold = 0.5;
  double lambda_xm = 0.1;
  std::string weight_mode = "inverse";
  std::uint64_t seed = 0;
};

xmfuse::TrainConfig make_train_config(const CliOptions& opt,
                                      const CLI::App* cmd) {
  xmfuse::TrainConfig cfg;
  if (!opt.train_config.empty())
    cfg = load_json_config<xmfuse::TrainConfig>(opt.train_config);
  if (cmd->count("--lambda-xm")) cfg.lambda_xm = opt.lambda_xm;
  if (cmd->count("--seed")) cfg.seed = opt.seed;
  if (cmd->count("--weight-mode")) {
    if (opt.weight_mode == "inverse")
      cfg.weight_mode = xmfuse::WeightMode::kInverse;
    else if (opt.weight_mode == "uniform")
      cfg.weight_mode = xmfuse::WeightMode::kUniform;
    else
      throw xmfuse::ConfigError("unknown weight mode: " + opt.weight_mode);
  }
  return cfg;
}

xmfuse::FuseOptions make_fuse_options(const CliOptions& opt) {
  xmfuse::FuseOptions fuse;
  fuse.mode = xmfuse::parse_fuse_mode(opt.mode);
  if (!opt.taus.empty()) fuse.taus = opt.taus;
  for (double tau : fuse.taus)
    if (tau <= 0.0) throw xmfuse::ConfigError("tau must be positive");
  fuse.switch_threshold = opt.switch_threshold;
  return fuse;
}

int dispatch(const CLI::App& app, const CliOptions& opt) {
  const CLI::App* synth = app.get_subcommand("synth");
  const CLI::App* fuse = app.get_subcommand("fuse");
  const CLI::App* adapt = app.get_subcommand("adapt");
  const CLI::App* eval = app.get_subcommand("eval");
  const CLI::App* run = app.get_subcommand("run");

  if (synth->parsed()) {
    auto cfg = load_json_config<xmfuse::SynthConfig>(opt.config);
    if (synth->count("--seed")) cfg.seed = opt.seed;
    xmfuse::SynthOutcome out = xmfuse::run_synth(cfg, opt.out);
    std::cout << "scenario written to " << opt.out.string() << "\n";
    std::cout << "source top-1: 2d " << out.heads.meta.top1_2d << ", 3d "
              << out.heads.meta.top1_3d << "\n";
    return 0;
  }
  if (fuse->parsed()) {
    std::optional<fs::path> out_dir;
    if (fuse->count("--out")) out_dir = opt.out;
    xmfuse::FuseOptions fuse_opt = make_fuse_options(opt);
    if (!fuse->count("--switch-threshold")) {
      // fall back to the manifest's stored threshold
      fuse_opt.switch_threshold =
          xmfuse::load_manifest(opt.manifest).params.switch_threshold;
    }
    if (!fuse->count("--tau")) fuse_opt.taus.clear();  // manifest default
    xmfuse::run_fuse(opt.manifest, fuse_opt, std::cout, out_dir);
    return 0;
  }
  if (adapt->parsed()) {
    xmfuse::TrainConfig cfg = make_train_config(opt, adapt);
    if (!adapt->count("--lambda-xm") && !adapt->count("--train-config"))
      cfg.lambda_xm = xmfuse::load_manifest(opt.manifest).params.lambda_xm;
    std::optional<fs::path> out_dir;
    if (adapt->count("--out")) out_dir = opt.out;
    xmfuse::AdaptFiles files =
        xmfuse::run_adapt(opt.manifest, opt.labels, cfg, out_dir);
    std::cout << "adapted models: " << files.model2d_path.string() << ", "
              << files.model3d_path.string() << "\n";
    std::cout << "loss trace: " << files.trace_path.string() << "\n";
    if (!files.result.trace.empty())
      std::cout << "final loss_tot " << files.result.trace.back().loss_tot
                << "\n";
    return 0;
  }
  if (eval->parsed()) {
    std::optional<std::pair<fs::path, fs::path>> models;
    if (eval->count("--model-2d") != eval->count("--model-3d"))
      throw xmfuse::ConfigError("--model-2d and --model-3d come as a pair");
    if (eval->count("--model-2d")) {
      models = std::make_pair(opt.model2d, opt.model3d);
    } else if (!eval->count("--labels")) {
      // default: score the unadapted scenario models
      auto manifest = xmfuse::load_manifest(opt.manifest);
      auto dir = opt.manifest.parent_path();
      models = std::make_pair(dir / manifest.files.at("model_2d"),
                              dir / manifest.files.at("model_3d"));
    }
    std::optional<fs::path> labels;
    if (eval->count("--labels")) labels = opt.labels;
    xmfuse::run_eval(opt.manifest, models, labels, std::cout);
    return 0;
  }
  if (run->parsed()) {
    xmfuse::SynthConfig cfg;
    if (run->count("--config"))
      cfg = load_json_config<xmfuse::SynthConfig>(opt.config);
    if (run->count("--seed")) cfg.seed = opt.seed;
    xmfuse::TrainConfig train_cfg = make_train_config(opt, run);
    if (!run->count("--seed") && !run->count("--train-config"))
      train_cfg.seed = xmfuse::derive_seed(cfg.seed, 3);
    xmfuse::run_full(cfg, train_cfg, make_fuse_options(opt), opt.out,
                     std::cout);
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal pseudo-label fusion and source-free adaptation"};
  app.require_subcommand(1);
  CliOptions opt;

  CLI::App* synth = app.add_subcommand("synth", "generate a scenario");
  synth->add_option("--config", opt.config, "synth config JSON")->required();
  synth->add_option("--out", opt.out, "output directory")->required();
  synth->add_option("--seed", opt.seed, "override config seed");

  CLI::App* fuse = app.add_subcommand("fuse", "generate pseudo-labels");
  fuse->add_option("--manifest", opt.manifest, "scenario manifest")
      ->required();
  fuse->add_option("--mode", opt.mode, "auto|af|ew");
  fuse->add_option("--tau", opt.taus, "likelihood-ratio threshold(s)")
      ->delimiter(',');
  fuse->add_option("--switch-threshold", opt.switch_threshold,
                   "agreement-ratio threshold");
  fuse->add_option("--out", opt.out, "output directory");

  CLI::App* adapt = app.add_subcommand("adapt", "train on pseudo-labels");
  adapt->add_option("--manifest", opt.manifest, "scenario manifest")
      ->required();
  adapt->add_option("--labels", opt.labels, "pseudo-label tensor")
      ->required();
  adapt->add_option("--train-config", opt.train_config, "train config JSON");
  adapt->add_option("--lambda-xm", opt.lambda_xm, "cross-modal loss weight");
  adapt->add_option("--weight-mode", opt.weight_mode, "inverse|uniform");
  adapt->add_option("--seed", opt.seed, "training seed");
  adapt->add_option("--out", opt.out, "output directory");

  CLI::App* eval = app.add_subcommand("eval", "score models or labels");
  eval->add_option("--manifest", opt.manifest, "scenario manifest")
      ->required();
  eval->add_option("--model-2d", opt.model2d, "2d model file");
  eval->add_option("--model-3d", opt.model3d, "3d model file");
  eval->add_option("--labels", opt.labels, "pseudo-label tensor");

  CLI::App* run = app.add_subcommand("run", "full pipeline on one scenario");
  run->add_option("--config", opt.config, "synth config JSON");
  run->add_option("--train-config", opt.train_config, "train config JSON");
  run->add_option("--out", opt.out, "output directory")->required();
  run->add_option("--seed", opt.seed, "pipeline seed");
  run->add_option("--mode", opt.mode, "auto|af|ew");
  run->add_option("--tau", opt.taus, "likelihood-ratio threshold(s)")
      ->delimiter(',');
  run->add_option("--switch-threshold", opt.switch_threshold,
                  "agreement-ratio threshold");
  run->add_option("--lambda-xm", opt.lambda_xm, "cross-modal loss weight");
  run->add_option("--weight-mode", opt.weight_mode, "inverse|uniform");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return dispatch(app, opt);
  } catch (const xmfuse::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const xmfuse::DivergedError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const xmfuse::Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
