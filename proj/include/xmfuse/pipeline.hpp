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

#ifndef XMFUSE_PIPELINE_HPP_
#define XMFUSE_PIPELINE_HPP_

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "xmfuse/adapt.hpp"
#include "xmfuse/core.hpp"
#include "xmfuse/entroweight.hpp"
#include "xmfuse/filter.hpp"
#include "xmfuse/manifest.hpp"
#include "xmfuse/metrics.hpp"
#include "xmfuse/switching.hpp"
#include "xmfuse/synth.hpp"
#include "xmfuse/tensor_io.hpp"

namespace xmfuse {

enum class FuseMode { kAuto, kAf, kEw };

inline FuseMode parse_fuse_mode(const std::string& s) {
  if (s == "auto") return FuseMode::kAuto;
  if (s == "af") return FuseMode::kAf;
  if (s == "ew") return FuseMode::kEw;
  throw ConfigError("unknown fuse mode: " + s);
}

struct FuseOptions {
  FuseMode mode = FuseMode::kAuto;
  std::vector<double> taus = {1.0};
  double switch_threshold = 0.5;
};

struct FuseResult {
  SwitchDecision decision;  // computed even when the mode is forced
  FusionMode used = FusionMode::kEw;
  std::vector<std::pair<double, PseudoLabelSet>> labels_by_tau;
};

/// Full label-generation stage: per-modality median filtering, the
/// switching decision, and whichever fusion path applies. The agreement
/// path ignores tau; the entropy path reuses one fusion and refit for all
/// requested taus since only the recovery test depends on tau.
inline FuseResult fuse_labels(const LogitMatrix& logits2d,
                              const LogitMatrix& logits3d,
                              const FeatureMatrix& feats2d,
                              const FeatureMatrix& feats3d,
                              const SourceMeta& meta,
                              const FuseOptions& opt) {
  if (opt.taus.empty()) throw ConfigError("fuse: no tau values given");
  ProbMatrix p2d = softmax(logits2d);
  ProbMatrix p3d = softmax(logits3d);
  PseudoLabelSet labels2d = median_filter(p2d, compute_medians(p2d));
  PseudoLabelSet labels3d = median_filter(p3d, compute_medians(p3d));

  FuseResult result;
  result.decision = decide(meta, labels2d, labels3d, opt.switch_threshold);
  result.used = opt.mode == FuseMode::kAuto
                    ? result.decision.mode
                    : (opt.mode == FuseMode::kAf ? FusionMode::kAf
                                                 : FusionMode::kEw);

  if (result.used == FusionMode::kAf) {
    PseudoLabelSet fused = agreement_fuse(labels2d, labels3d);
    for (double tau : opt.taus) result.labels_by_tau.emplace_back(tau, fused);
    return result;
  }

  EwFusion ew = ew_fuse(logits2d, logits3d);
  const std::size_t k_classes = logits2d.classes();
  ClassStats stats2d = fit_class_stats(feats2d, ew.labels, k_classes);
  ClassStats stats3d = fit_class_stats(feats3d, ew.labels, k_classes);
  for (double tau : opt.taus) {
    HypothesisConfig cfg{tau};
    result.labels_by_tau.emplace_back(
        tau, likelihood_ratio_recover(feats2d, feats3d, stats2d, stats3d,
                                      logits2d, logits3d, ew.labels, cfg));
  }
  return result;
}

namespace detail {

inline std::string tau_tag(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", tau);
  return buf;
}

inline std::size_t count_provenance(const PseudoLabelSet& labels,
                                    Provenance p) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    n += labels.provenance(i) == p;
  return n;
}

}  // namespace detail

struct SynthOutcome {
  std::filesystem::path manifest_path;
  SynthScenario scenario;
  SourceHeads heads;
};

/// Generate a scenario, fit the source heads, and write the whole package:
/// nine tensors, two model files, and the manifest tying them together.
inline SynthOutcome run_synth(const SynthConfig& cfg,
                              const std::filesystem::path& out_dir,
                              ManifestParams params = {}) {
  std::filesystem::create_directories(out_dir);
  SynthOutcome out;
  out.scenario = generate(cfg);
  out.heads = fit_source_heads(out.scenario);
  out.scenario.meta = out.heads.meta;

  const SynthScenario& sc = out.scenario;
  Matrix logits2d = out.heads.model2d.main_logits(sc.target2d);
  Matrix logits3d = out.heads.model3d.main_logits(sc.target3d);

  save_tensor(out_dir / "source_features_2d.smt",
              tensor_from_matrix(sc.source2d.features.matrix()));
  save_tensor(out_dir / "source_labels_2d.smt",
              tensor_from_labels(sc.source2d.labels));
  save_tensor(out_dir / "source_features_3d.smt",
              tensor_from_matrix(sc.source3d.features.matrix()));
  save_tensor(out_dir / "source_labels_3d.smt",
              tensor_from_labels(sc.source3d.labels));
  save_tensor(out_dir / "target_features_2d.smt",
              tensor_from_matrix(sc.target2d.matrix()));
  save_tensor(out_dir / "target_features_3d.smt",
              tensor_from_matrix(sc.target3d.matrix()));
  save_tensor(out_dir / "target_logits_2d.smt", tensor_from_matrix(logits2d));
  save_tensor(out_dir / "target_logits_3d.smt", tensor_from_matrix(logits3d));
  save_tensor(out_dir / "target_truth.smt", tensor_from_labels(sc.truth));
  save_model(out_dir / "model_2d.mdl", out.heads.model2d);
  save_model(out_dir / "model_3d.mdl", out.heads.model3d);

  RunManifest manifest;
  manifest.n_classes = sc.n_classes;
  manifest.source_meta = sc.meta;
  manifest.params = params;
  for (const auto& role : manifest_roles())
    manifest.files[role] = role + (role.rfind("model_", 0) == 0
                                       ? std::string(".mdl")
                                       : std::string(".smt"));
  out.manifest_path = out_dir / "manifest.json";
  save_manifest(out.manifest_path, manifest);
  return out;
}

struct FuseFiles {
  FuseResult result;
  std::vector<std::pair<double, std::filesystem::path>> label_files;
};

/// File-level fuse stage: load a scenario, run the fusion, write one label
/// tensor per tau, and print the switching report.
inline FuseFiles run_fuse(const std::filesystem::path& manifest_path,
                          const FuseOptions& opt_in, std::ostream& report,
                          std::optional<std::filesystem::path> out_dir = {}) {
  TargetData data = load_target_data(manifest_path);
  FuseOptions opt = opt_in;
  if (opt.taus.empty()) opt.taus = {data.manifest.params.tau};

  FuseFiles out;
  out.result = fuse_labels(data.logits2d, data.logits3d, data.feats2d,
                           data.feats3d, data.manifest.source_meta, opt);

  const auto dir = out_dir.value_or(data.dir);
  std::filesystem::create_directories(dir);
  const bool sweep = out.result.labels_by_tau.size() > 1;
  for (const auto& [tau, labels] : out.result.labels_by_tau) {
    auto name = sweep ? "labels_tau" + detail::tau_tag(tau) + ".smt"
                      : std::string("labels.smt");
    auto path = dir / name;
    save_tensor(path, tensor_from_labels(labels.labels()));
    out.label_files.emplace_back(tau, path);
  }

  report << format_decision_text(out.result.decision);
  if (opt.mode != FuseMode::kAuto)
    report << "(mode forced to " << to_string(out.result.used) << ")\n";
  for (const auto& [tau, labels] : out.result.labels_by_tau) {
    char buf[160];
    std::snprintf(
        buf, sizeof(buf),
        "tau %g: accepted %zu/%zu (recovered 2d %zu, 3d %zu)\n", tau,
        labels.accepted_count(), labels.size(),
        detail::count_provenance(labels, Provenance::kEwRecovered2d),
        detail::count_provenance(labels, Provenance::kEwRecovered3d));
    report << buf;
  }
  return out;
}

struct AdaptFiles {
  std::filesystem::path model2d_path;
  std::filesystem::path model3d_path;
  std::filesystem::path trace_path;
  TrainResult result;
};

/// File-level adapt stage: pseudo-labels in, adapted models and a loss
/// trace out. The class distribution comes from the unadapted target
/// outputs stored with the scenario.
inline AdaptFiles run_adapt(const std::filesystem::path& manifest_path,
                            const std::filesystem::path& labels_path,
                            const TrainConfig& cfg,
                            std::optional<std::filesystem::path> out_dir = {}) {
  TargetData data = load_target_data(manifest_path);
  std::vector<std::int32_t> raw_labels =
      labels_from_tensor(load_tensor(labels_path));
  if (raw_labels.size() != data.feats2d.samples())
    throw DataError("labels length does not match target size");
  for (auto l : raw_labels)
    if (l != PseudoLabelSet::kIgnore &&
        (l < 0 || static_cast<std::size_t>(l) >= data.manifest.n_classes))
      throw DataError("labels file contains out-of-range classes");
  PseudoLabelSet labels = PseudoLabelSet::from_labels(
      std::move(raw_labels), Provenance::kMedianPass);

  DualHeadModel model2d =
      load_model(data.dir / data.manifest.files.at("model_2d"));
  DualHeadModel model3d =
      load_model(data.dir / data.manifest.files.at("model_3d"));
  if (model2d.dim() != data.feats2d.dim() ||
      model3d.dim() != data.feats3d.dim() ||
      model2d.n_classes() != data.manifest.n_classes ||
      model3d.n_classes() != data.manifest.n_classes)
    throw DataError("model shapes do not match scenario");

  ClassDistribution dist = estimate_class_distribution(
      softmax(data.logits2d), softmax(data.logits3d));

  AdaptFiles out;
  out.result = train(std::move(model2d), std::move(model3d), data.feats2d,
                     data.feats3d, labels, dist, cfg);

  const auto dir = out_dir.value_or(data.dir);
  std::filesystem::create_directories(dir);
  out.model2d_path = dir / "model_2d_adapted.mdl";
  out.model3d_path = dir / "model_3d_adapted.mdl";
  out.trace_path = dir / "trace.csv";
  save_model(out.model2d_path, out.result.model2d);
  save_model(out.model3d_path, out.result.model3d);
  std::ofstream trace(out.trace_path);
  if (!trace) throw DataError("cannot write trace: " +
                              out.trace_path.string());
  trace_to_csv(trace, out.result.trace);
  return out;
}

struct EvalOutcome {
  std::optional<IouResult> iou2d;
  std::optional<IouResult> iou3d;
  std::optional<IouResult> iou_ensemble;
  std::optional<PseudoLabelReport> report;
};

/// Score models (per-modality and ensembled mIoU) and/or a label file
/// (correct/incorrect/ignore split) against the scenario's ground truth.
inline EvalOutcome run_eval(
    const std::filesystem::path& manifest_path,
    std::optional<std::pair<std::filesystem::path, std::filesystem::path>>
        model_paths,
    std::optional<std::filesystem::path> labels_path, std::ostream& out) {
  TargetData data = load_target_data(manifest_path);
  if (data.truth.empty())
    throw ConfigError("eval needs a scenario with target_truth");

  EvalOutcome outcome;
  if (model_paths) {
    DualHeadModel model2d = load_model(model_paths->first);
    DualHeadModel model3d = load_model(model_paths->second);
    ProbMatrix p2d =
        softmax(LogitMatrix(model2d.main_logits(data.feats2d)));
    ProbMatrix p3d =
        softmax(LogitMatrix(model3d.main_logits(data.feats3d)));
    outcome.iou2d = miou(p2d, data.truth);
    outcome.iou3d = miou(p3d, data.truth);
    outcome.iou_ensemble = miou(ensemble_2d3d(p2d, p3d), data.truth);
    out << format_iou_text(*outcome.iou2d, "2D");
    out << format_iou_text(*outcome.iou3d, "3D");
    out << format_iou_text(*outcome.iou_ensemble, "2D+3D");
  }
  if (labels_path) {
    std::vector<std::int32_t> raw =
        labels_from_tensor(load_tensor(*labels_path));
    if (raw.size() != data.truth.size())
      throw DataError("labels length does not match truth");
    PseudoLabelSet labels = PseudoLabelSet::from_labels(
        std::move(raw), Provenance::kMedianPass);
    outcome.report = pseudo_label_report(labels, data.truth);
    out << format_report_text(*outcome.report, "labels");
  }
  return outcome;
}

struct FullRunOutcome {
  std::filesystem::path dir;
  SwitchDecision decision;
  FusionMode used = FusionMode::kEw;
  IouResult unadapted_ensemble;
  IouResult adapted_ensemble;
  PseudoLabelReport label_report;
};

/// The whole pipeline on one synthetic scenario: generate, fuse with
/// automatic switching, adapt, and score adapted against unadapted models.
inline FullRunOutcome run_full(const SynthConfig& synth_cfg,
                               const TrainConfig& train_cfg,
                               const FuseOptions& fuse_opt,
                               const std::filesystem::path& out_dir,
                               std::ostream& out) {
  FullRunOutcome outcome;
  outcome.dir = out_dir;
  SynthOutcome synth = run_synth(synth_cfg, out_dir);
  out << "scenario written to " << out_dir.string() << "\n";
  out << "source top-1: 2d " << synth.heads.meta.top1_2d << ", 3d "
      << synth.heads.meta.top1_3d << "\n";

  FuseFiles fuse = run_fuse(synth.manifest_path, fuse_opt, out);
  outcome.decision = fuse.result.decision;
  outcome.used = fuse.result.used;
  const auto& labels_path = fuse.label_files.front().second;

  run_adapt(synth.manifest_path, labels_path, train_cfg);

  TargetData data = load_target_data(synth.manifest_path);
  auto score = [&](const DualHeadModel& m2d, const DualHeadModel& m3d) {
    ProbMatrix p2d = softmax(LogitMatrix(m2d.main_logits(data.feats2d)));
    ProbMatrix p3d = softmax(LogitMatrix(m3d.main_logits(data.feats3d)));
    return miou(ensemble_2d3d(p2d, p3d), data.truth);
  };
  outcome.unadapted_ensemble = score(synth.heads.model2d, synth.heads.model3d);
  DualHeadModel adapted2d = load_model(out_dir / "model_2d_adapted.mdl");
  DualHeadModel adapted3d = load_model(out_dir / "model_3d_adapted.mdl");
  outcome.adapted_ensemble = score(adapted2d, adapted3d);

  const auto& labels = fuse.result.labels_by_tau.front().second;
  outcome.label_report = pseudo_label_report(labels, data.truth);

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "2D+3D mIoU unadapted %.4f -> adapted %.4f\n",
                outcome.unadapted_ensemble.mean,
                outcome.adapted_ensemble.mean);
  out << buf;
  out << format_report_text(outcome.label_report, to_string(outcome.used));
  return outcome;
}

}  // namespace xmfuse

#endif  // XMFUSE_PIPELINE_HPP_
