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

#ifndef XMFUSE_SYNTH_HPP_
#define XMFUSE_SYNTH_HPP_

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "xmfuse/adapt.hpp"
#include "xmfuse/core.hpp"
#include "xmfuse/rng.hpp"
#include "xmfuse/switching.hpp"

namespace xmfuse {

/// Paired two-modality classification problem with a tunable shift between
/// the source and target distributions.
struct SynthConfig {
  std::size_t n_classes = 5;
  std::size_t dim2d = 8;
  std::size_t dim3d = 8;
  std::size_t n_source = 2000;
  std::size_t n_target = 2000;
  double gap = 1.0;          // target cluster translation, in noise sigmas
  double class_skew = 0.0;   // 0 = uniform target labels; >0 = Dirichlet
  std::uint64_t seed = 1;

  void validate() const {
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (dim2d < 1 || dim3d < 1) throw ConfigError("dims must be >= 1");
    if (n_source < 2 * n_classes || n_target < 2 * n_classes)
      throw ConfigError("sample counts must be >= 2 * n_classes");
    if (gap < 0.0) throw ConfigError("gap must be >= 0");
    if (class_skew < 0.0) throw ConfigError("class_skew must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_classes", c.n_classes}, {"dim_2d", c.dim2d},
                     {"dim_3d", c.dim3d},        {"n_source", c.n_source},
                     {"n_target", c.n_target},   {"gap", c.gap},
                     {"class_skew", c.class_skew}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c = SynthConfig{};
  if (j.contains("n_classes")) j.at("n_classes").get_to(c.n_classes);
  if (j.contains("dim_2d")) j.at("dim_2d").get_to(c.dim2d);
  if (j.contains("dim_3d")) j.at("dim_3d").get_to(c.dim3d);
  if (j.contains("n_source")) j.at("n_source").get_to(c.n_source);
  if (j.contains("n_target")) j.at("n_target").get_to(c.n_target);
  if (j.contains("gap")) j.at("gap").get_to(c.gap);
  if (j.contains("class_skew")) j.at("class_skew").get_to(c.class_skew);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

struct ModalityData {
  FeatureMatrix features;
  std::vector<std::int32_t> labels;
};

struct SynthScenario {
  std::size_t n_classes = 0;
  std::uint64_t seed = 0;  // generating seed, reused to derive fit seeds
  ModalityData source2d;
  ModalityData source3d;
  FeatureMatrix target2d;
  FeatureMatrix target3d;
  std::vector<std::int32_t> truth;  // target ground truth, paired
  SourceMeta meta;                  // filled in by fit_source_heads
};

namespace detail {

// Cluster layout: class centers sit on a line through the origin along a
// random unit direction, kSeparation noise-sigmas apart, so any two classes
// stay well separated regardless of how dim compares with n_classes.
inline constexpr double kSeparation = 6.0;

// The target shift is mostly along the cluster line (which pushes samples
// across decision boundaries) with a small orthogonal remainder. For most
// classes the two modalities drift in opposite directions along the line,
// so their mistakes land on different neighbors and cross-modal agreement
// decays cleanly as the gap grows; a fixed quarter of the classes (seeded
// choice of which) share their drift, which keeps some errors correlated
// the way real sensor shifts do. The shared count is deterministic per K
// so no seed can accidentally correlate almost every class.
inline constexpr double kShiftAlong = 0.9;
inline constexpr double kShiftOrtho = 0.43588989435406736;  // unit norm

struct ModalityGeometry {
  std::vector<double> axis;                  // unit cluster line
  std::vector<std::vector<double>> shift;    // per-class target translation
};

inline ModalityGeometry make_geometry(std::size_t dim,
                                      std::span<const double> class_signs,
                                      double gap, Rng& rng) {
  ModalityGeometry geom;
  geom.axis = rng.unit_vector(dim);
  geom.shift.resize(class_signs.size());
  for (std::size_t k = 0; k < class_signs.size(); ++k) {
    const double along = class_signs[k];
    std::vector<double> ortho = rng.unit_vector(dim);
    double dot = 0.0;
    for (std::size_t d = 0; d < dim; ++d) dot += ortho[d] * geom.axis[d];
    double norm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      ortho[d] -= dot * geom.axis[d];
      norm += ortho[d] * ortho[d];
    }
    norm = std::sqrt(norm);
    auto& shift = geom.shift[k];
    shift.assign(dim, 0.0);
    if (norm < 1e-9) {
      // No orthogonal direction exists (dim == 1); shift along the line.
      for (std::size_t d = 0; d < dim; ++d)
        shift[d] = gap * along * geom.axis[d];
    } else {
      for (std::size_t d = 0; d < dim; ++d)
        shift[d] = gap * (kShiftAlong * along * geom.axis[d] +
                          kShiftOrtho * ortho[d] / norm);
    }
  }
  return geom;
}

inline FeatureMatrix draw_features(const ModalityGeometry& geom,
                                   std::span<const std::int32_t> labels,
                                   std::size_t dim, bool shifted, Rng& rng) {
  Matrix out(labels.size(), dim);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    auto row = out.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      double center = kSeparation * static_cast<double>(k) * geom.axis[d];
      if (shifted) center += geom.shift[k][d];
      row[d] = center + rng.normal();
    }
  }
  return FeatureMatrix(std::move(out));
}

inline std::int32_t sample_from(std::span<const double> probs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return static_cast<std::int32_t>(k);
  }
  return static_cast<std::int32_t>(probs.size() - 1);
}

}  // namespace detail

/// Draw a full scenario: shared per-sample classes across modalities,
/// Gaussian clusters per class in each feature space, and target clusters
/// translated by `gap` with label frequencies reweighted by `class_skew`.
inline SynthScenario generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0));

  SynthScenario sc;
  sc.n_classes = cfg.n_classes;
  sc.seed = cfg.seed;

  std::vector<double> signs2d(cfg.n_classes), signs3d(cfg.n_classes);
  std::vector<std::size_t> order(cfg.n_classes);
  for (std::size_t k = 0; k < cfg.n_classes; ++k) order[k] = k;
  rng.shuffle(order);
  const std::size_t n_shared = cfg.n_classes / 4;
  for (std::size_t pos = 0; pos < cfg.n_classes; ++pos) {
    const std::size_t k = order[pos];
    signs2d[k] = rng.uniform() < 0.5 ? -1.0 : 1.0;
    signs3d[k] = pos < n_shared ? signs2d[k] : -signs2d[k];
  }
  detail::ModalityGeometry geom2d =
      detail::make_geometry(cfg.dim2d, signs2d, cfg.gap, rng);
  detail::ModalityGeometry geom3d =
      detail::make_geometry(cfg.dim3d, signs3d, cfg.gap, rng);

  std::vector<double> target_dist(cfg.n_classes,
                                  1.0 / static_cast<double>(cfg.n_classes));
  if (cfg.class_skew > 0.0)
    target_dist = rng.dirichlet(cfg.n_classes, cfg.class_skew);

  std::vector<std::int32_t> source_labels(cfg.n_source);
  for (auto& l : source_labels)
    l = static_cast<std::int32_t>(rng.below(cfg.n_classes));
  sc.source2d.labels = source_labels;
  sc.source3d.labels = std::move(source_labels);

  sc.source2d.features =
      detail::draw_features(geom2d, sc.source2d.labels, cfg.dim2d,
                            /*shifted=*/false, rng);
  sc.source3d.features =
      detail::draw_features(geom3d, sc.source3d.labels, cfg.dim3d,
                            /*shifted=*/false, rng);

  sc.truth.resize(cfg.n_target);
  for (auto& l : sc.truth) l = detail::sample_from(target_dist, rng);
  sc.target2d = detail::draw_features(geom2d, sc.truth, cfg.dim2d,
                                      /*shifted=*/true, rng);
  sc.target3d = detail::draw_features(geom3d, sc.truth, cfg.dim3d,
                                      /*shifted=*/true, rng);
  return sc;
}

struct SourceHeads {
  DualHeadModel model2d;
  DualHeadModel model3d;
  SourceMeta meta;
};

namespace detail {

inline double top1_accuracy(const DualHeadModel& model,
                            const FeatureMatrix& features,
                            std::span<const std::int32_t> truth) {
  Matrix logits = model.main_logits(features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i)
    hits += static_cast<std::int32_t>(argmax_row(logits.row(i))) == truth[i];
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

inline FeatureMatrix slice(const FeatureMatrix& src, std::size_t begin,
                           std::size_t end) {
  Matrix out(end - begin, src.dim());
  for (std::size_t i = begin; i < end; ++i) {
    auto from = src.row(i);
    std::copy(from.begin(), from.end(), out.row(i - begin).begin());
  }
  return FeatureMatrix(std::move(out));
}

}  // namespace detail

/// Train one linear head per modality on its own source split (no cross-
/// modal term) and measure each head's Top-1 accuracy on a held-out 20%
/// slice. The held-out accuracies become the scenario's source meta-data;
/// the target set is never touched here.
inline SourceHeads fit_source_heads(const SynthScenario& sc) {
  const std::size_t n = sc.source2d.labels.size();
  const std::size_t n_train = (n * 4) / 5;
  if (n_train == 0 || n_train == n)
    throw ConfigError("fit_source_heads: source set too small to split");

  Rng init_rng(derive_seed(sc.seed, 1));
  SourceHeads heads{
      DualHeadModel::random_init(sc.source2d.features.dim(), sc.n_classes,
                                 init_rng),
      DualHeadModel::random_init(sc.source3d.features.dim(), sc.n_classes,
                                 init_rng),
      SourceMeta{}};

  FeatureMatrix train2d = detail::slice(sc.source2d.features, 0, n_train);
  FeatureMatrix train3d = detail::slice(sc.source3d.features, 0, n_train);
  std::vector<std::int32_t> train_labels(sc.source2d.labels.begin(),
                                         sc.source2d.labels.begin() +
                                             static_cast<long>(n_train));
  PseudoLabelSet labels = PseudoLabelSet::from_labels(
      std::move(train_labels), Provenance::kMedianPass);

  TrainConfig cfg;
  cfg.lambda_xm = 0.0;  // heads are trained independently
  cfg.learning_rate = 0.05;
  cfg.iterations = 600;
  cfg.batch_size = 64;
  cfg.seed = derive_seed(sc.seed, 2);
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.weight_mode = WeightMode::kUniform;

  ClassDistribution uniform;
  uniform.probs.assign(sc.n_classes,
                       1.0 / static_cast<double>(sc.n_classes));
  TrainResult fitted = train(heads.model2d, heads.model3d, train2d, train3d,
                             labels, uniform, cfg);
  heads.model2d = std::move(fitted.model2d);
  heads.model3d = std::move(fitted.model3d);

  FeatureMatrix held2d = detail::slice(sc.source2d.features, n_train, n);
  FeatureMatrix held3d = detail::slice(sc.source3d.features, n_train, n);
  std::span<const std::int32_t> held_truth(
      sc.source2d.labels.data() + n_train, n - n_train);
  heads.meta.top1_2d = detail::top1_accuracy(heads.model2d, held2d,
                                             held_truth);
  heads.meta.top1_3d = detail::top1_accuracy(heads.model3d, held3d,
                                             held_truth);
  return heads;
}

}  // namespace xmfuse

#endif  // XMFUSE_SYNTH_HPP_
