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

#ifndef XMFUSE_MANIFEST_HPP_
#define XMFUSE_MANIFEST_HPP_

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmfuse/adapt.hpp"
#include "xmfuse/core.hpp"
#include "xmfuse/switching.hpp"
#include "xmfuse/tensor_io.hpp"

namespace xmfuse {

/// Defaults a scenario carries for downstream stages; explicit CLI flags
/// override them.
struct ManifestParams {
  double tau = 1.0;
  double switch_threshold = 0.5;
  double lambda_xm = 0.1;
};

/// Names every tensor and model file of one scenario directory, plus the
/// source meta-data the switching decision needs.
struct RunManifest {
  std::size_t n_classes = 0;
  SourceMeta source_meta;
  ManifestParams params;
  std::map<std::string, std::string> files;  // role -> relative filename
};

inline const std::vector<std::string>& manifest_roles() {
  static const std::vector<std::string> roles = {
      "source_features_2d", "source_labels_2d", "source_features_3d",
      "source_labels_3d",   "target_features_2d", "target_features_3d",
      "target_logits_2d",   "target_logits_3d",   "target_truth",
      "model_2d",           "model_3d"};
  return roles;
}

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{
      {"n_classes", m.n_classes},
      {"source_meta",
       {{"top1_2d", m.source_meta.top1_2d},
        {"top1_3d", m.source_meta.top1_3d}}},
      {"params",
       {{"tau", m.params.tau},
        {"switch_threshold", m.params.switch_threshold},
        {"lambda_xm", m.params.lambda_xm}}},
      {"files", m.files}};
}

inline void from_json(const nlohmann::json& j, RunManifest& m) {
  m = RunManifest{};
  j.at("n_classes").get_to(m.n_classes);
  j.at("source_meta").at("top1_2d").get_to(m.source_meta.top1_2d);
  j.at("source_meta").at("top1_3d").get_to(m.source_meta.top1_3d);
  if (j.contains("params")) {
    const auto& p = j.at("params");
    if (p.contains("tau")) p.at("tau").get_to(m.params.tau);
    if (p.contains("switch_threshold"))
      p.at("switch_threshold").get_to(m.params.switch_threshold);
    if (p.contains("lambda_xm")) p.at("lambda_xm").get_to(m.params.lambda_xm);
  }
  j.at("files").get_to(m.files);
}

inline void save_manifest(const std::filesystem::path& path,
                          const RunManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  nlohmann::json j = m;
  out << j.dump(2) << "\n";
}

/// Load and check a manifest: every referenced file must exist next to it.
inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest parse error: " + std::string(e.what()));
  }
  RunManifest m;
  try {
    m = j.get<RunManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest schema error: " + std::string(e.what()));
  }
  const auto dir = path.parent_path();
  for (const auto& [role, file] : m.files)
    if (!std::filesystem::exists(dir / file))
      throw DataError("manifest references missing file: " + file +
                      " (role " + role + ")");
  return m;
}

// A dual-head model file is four consecutive tensor records:
// main weights (K x D), main bias (K), translation weights, translation
// bias. Reading reverses writing exactly, so an untouched model round-trips
// byte for byte.

inline void save_model(const std::filesystem::path& path,
                       const DualHeadModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  write_tensor(out, tensor_from_matrix(model.main.weights));
  write_tensor(out, tensor_from_vector(model.main.bias));
  write_tensor(out, tensor_from_matrix(model.xlate.weights));
  write_tensor(out, tensor_from_vector(model.xlate.bias));
}

inline DualHeadModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model: " + path.string());
  Matrix main_w = matrix_from_tensor(read_tensor(in));
  std::vector<double> main_b = vector_from_tensor(read_tensor(in));
  Matrix xlate_w = matrix_from_tensor(read_tensor(in));
  std::vector<double> xlate_b = vector_from_tensor(read_tensor(in));
  if (main_b.size() != main_w.rows() || xlate_w.rows() != main_w.rows() ||
      xlate_w.cols() != main_w.cols() || xlate_b.size() != main_b.size())
    throw DataError("model file with inconsistent head shapes: " +
                    path.string());
  DualHeadModel model(main_w.cols(), main_w.rows());
  model.main.weights = std::move(main_w);
  model.main.bias = std::move(main_b);
  model.xlate.weights = std::move(xlate_w);
  model.xlate.bias = std::move(xlate_b);
  if (!model.all_finite())
    throw DataError("model file contains non-finite parameters: " +
                    path.string());
  return model;
}

/// Everything the fuse and adapt stages read from a scenario directory,
/// shape-checked on load.
struct TargetData {
  std::filesystem::path dir;
  RunManifest manifest;
  LogitMatrix logits2d;
  LogitMatrix logits3d;
  FeatureMatrix feats2d;
  FeatureMatrix feats3d;
  std::vector<std::int32_t> truth;
};

inline TargetData load_target_data(const std::filesystem::path& manifest_path) {
  TargetData data;
  data.manifest = load_manifest(manifest_path);
  data.dir = manifest_path.parent_path();
  const auto& files = data.manifest.files;
  auto file = [&](const std::string& role) -> std::filesystem::path {
    auto it = files.find(role);
    if (it == files.end())
      throw DataError("manifest missing role: " + role);
    return data.dir / it->second;
  };
  try {
    data.logits2d = LogitMatrix(matrix_from_tensor(
        load_tensor(file("target_logits_2d"))));
    data.logits3d = LogitMatrix(matrix_from_tensor(
        load_tensor(file("target_logits_3d"))));
    data.feats2d = FeatureMatrix(matrix_from_tensor(
        load_tensor(file("target_features_2d"))));
    data.feats3d = FeatureMatrix(matrix_from_tensor(
        load_tensor(file("target_features_3d"))));
    if (files.count("target_truth"))  // ground truth is optional
      data.truth = labels_from_tensor(load_tensor(file("target_truth")));
  } catch (const InvalidInput& e) {
    throw DataError(std::string("scenario data invalid: ") + e.what());
  }

  const std::size_t n = data.logits2d.samples();
  if (data.logits3d.samples() != n || data.feats2d.samples() != n ||
      data.feats3d.samples() != n ||
      (files.count("target_truth") && data.truth.size() != n))
    throw DataError("scenario files disagree on sample count");
  if (data.logits2d.classes() != data.manifest.n_classes ||
      data.logits3d.classes() != data.manifest.n_classes)
    throw DataError("scenario logits disagree on class count");
  for (auto t : data.truth)
    if (t < 0 || static_cast<std::size_t>(t) >= data.manifest.n_classes)
      throw DataError("target truth labels out of range");
  return data;
}

}  // namespace xmfuse

#endif  // XMFUSE_MANIFEST_HPP_
