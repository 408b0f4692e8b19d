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

#ifndef XMFUSE_ENTROWEIGHT_HPP_
#define XMFUSE_ENTROWEIGHT_HPP_

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "xmfuse/core.hpp"
#include "xmfuse/filter.hpp"

namespace xmfuse {

/// Per-class, per-dimension Gaussian statistics of one modality's feature
/// space. A class is testable once it has at least two accepted samples;
/// likelihood queries against the rest yield no decision.
class ClassStats {
 public:
  static constexpr double kSigmaFloor = 1e-6;

  ClassStats() = default;
  ClassStats(std::size_t n_classes, std::size_t dim)
      : mean_(n_classes, dim), std_(n_classes, dim, kSigmaFloor),
        counts_(n_classes, 0) {}

  std::size_t n_classes() const { return counts_.size(); }
  std::size_t dim() const { return mean_.cols(); }
  std::size_t count(std::size_t k) const { return counts_[k]; }
  bool testable(std::size_t k) const { return counts_[k] >= 2; }

  std::span<const double> mean(std::size_t k) const { return mean_.row(k); }
  std::span<const double> stddev(std::size_t k) const { return std_.row(k); }

  std::span<double> mutable_mean(std::size_t k) { return mean_.row(k); }
  std::span<double> mutable_stddev(std::size_t k) { return std_.row(k); }
  void set_count(std::size_t k, std::size_t n) { counts_[k] = n; }

 private:
  Matrix mean_;
  Matrix std_;
  std::vector<std::size_t> counts_;
};

/// Likelihood-ratio threshold for the recovery test.
struct HypothesisConfig {
  double tau = 1.0;
};

struct EntropyWeights {
  std::vector<double> w2d;
  std::vector<double> w3d;
};

/// Per-sample fusion weights from exponentiated negative entropy of each
/// modality's softmax output. Low entropy (a confident model) gets the
/// larger share; the pair always sums to 1.
inline EntropyWeights entropy_weights(const LogitMatrix& logits2d,
                                      const LogitMatrix& logits3d) {
  if (logits2d.samples() != logits3d.samples() ||
      logits2d.classes() != logits3d.classes())
    throw ShapeError("entropy_weights: shape mismatch");
  ProbMatrix p2d = softmax(logits2d);
  ProbMatrix p3d = softmax(logits3d);
  EntropyWeights out;
  out.w2d.resize(logits2d.samples());
  out.w3d.resize(logits2d.samples());
  for (std::size_t i = 0; i < logits2d.samples(); ++i) {
    double e2d = std::exp(-entropy(p2d.row(i)));
    double e3d = std::exp(-entropy(p3d.row(i)));
    out.w2d[i] = e2d / (e2d + e3d);
    out.w3d[i] = 1.0 - out.w2d[i];
  }
  return out;
}

struct EwFusion {
  ProbMatrix fused;
  PseudoLabelSet labels;
};

/// Entropy-weighted convex fusion of the two softmax outputs, then the
/// median filter applied to the fused probabilities.
inline EwFusion ew_fuse(const LogitMatrix& logits2d,
                        const LogitMatrix& logits3d) {
  EntropyWeights w = entropy_weights(logits2d, logits3d);
  ProbMatrix p2d = softmax(logits2d);
  ProbMatrix p3d = softmax(logits3d);
  Matrix fused(logits2d.samples(), logits2d.classes());
  for (std::size_t i = 0; i < logits2d.samples(); ++i) {
    auto a = p2d.row(i);
    auto b = p3d.row(i);
    auto dst = fused.row(i);
    for (std::size_t k = 0; k < dst.size(); ++k)
      dst[k] = w.w2d[i] * a[k] + w.w3d[i] * b[k];
  }
  EwFusion out{ProbMatrix(std::move(fused)), PseudoLabelSet()};
  out.labels = median_filter(out.fused, compute_medians(out.fused),
                             Provenance::kEwFused);
  return out;
}

/// Class-conditional mean and standard deviation over accepted samples
/// only. Population (1/N) standard deviation, floored at kSigmaFloor.
inline ClassStats fit_class_stats(const FeatureMatrix& features,
                                  const PseudoLabelSet& labels,
                                  std::size_t n_classes) {
  if (features.samples() != labels.size())
    throw ShapeError("fit_class_stats: feature/label length mismatch");
  ClassStats stats(n_classes, features.dim());
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.is_ignored(i)) continue;
    auto k = static_cast<std::size_t>(labels.label(i));
    if (k >= n_classes)
      throw InvalidInput("fit_class_stats: label out of range");
    counts[k]++;
    auto x = features.row(i);
    auto mu = stats.mutable_mean(k);
    for (std::size_t d = 0; d < x.size(); ++d) mu[d] += x[d];
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    stats.set_count(k, counts[k]);
    if (counts[k] == 0) continue;
    auto mu = stats.mutable_mean(k);
    for (auto& m : mu) m /= static_cast<double>(counts[k]);
  }
  Matrix sq_acc(n_classes, features.dim());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.is_ignored(i)) continue;
    auto k = static_cast<std::size_t>(labels.label(i));
    auto x = features.row(i);
    auto mu = stats.mean(k);
    auto acc = sq_acc.row(k);
    for (std::size_t d = 0; d < x.size(); ++d) {
      double diff = x[d] - mu[d];
      acc[d] += diff * diff;
    }
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (counts[k] == 0) continue;
    auto sd = stats.mutable_stddev(k);
    auto acc = sq_acc.row(k);
    for (std::size_t d = 0; d < sd.size(); ++d)
      sd[d] = std::max(std::sqrt(acc[d] / static_cast<double>(counts[k])),
                       ClassStats::kSigmaFloor);
  }
  return stats;
}

/// Diagonal-covariance Gaussian log density of `feature` under class k.
/// Empty optional when the class is untestable.
inline std::optional<double> log_likelihood(std::span<const double> feature,
                                            const ClassStats& stats,
                                            std::size_t class_k) {
  if (class_k >= stats.n_classes() || !stats.testable(class_k))
    return std::nullopt;
  if (feature.size() != stats.dim())
    throw ShapeError("log_likelihood: feature dimension mismatch");
  auto mu = stats.mean(class_k);
  auto sd = stats.stddev(class_k);
  double ll = 0.0;
  for (std::size_t d = 0; d < feature.size(); ++d) {
    double z = (feature[d] - mu[d]) / sd[d];
    ll += -std::log(sd[d] * std::sqrt(2.0 * std::numbers::pi)) - 0.5 * z * z;
  }
  return ll;
}

/// Second chance for samples the fused median filter dropped. When the two
/// modalities' raw argmaxes disagree, each feature space runs a likelihood
/// ratio test of its own hypothesis against the other's; the label is
/// recovered only when both tests back the same class. Ratios are compared
/// in the log domain, so high-dimensional densities cannot underflow.
inline PseudoLabelSet likelihood_ratio_recover(
    const FeatureMatrix& features2d, const FeatureMatrix& features3d,
    const ClassStats& stats2d, const ClassStats& stats3d,
    const LogitMatrix& logits2d, const LogitMatrix& logits3d,
    const PseudoLabelSet& rejected, const HypothesisConfig& cfg) {
  if (cfg.tau <= 0.0)
    throw InvalidInput("likelihood_ratio_recover: tau must be positive");
  const std::size_t n = rejected.size();
  if (features2d.samples() != n || features3d.samples() != n ||
      logits2d.samples() != n || logits3d.samples() != n)
    throw ShapeError("likelihood_ratio_recover: length mismatch");

  const double log_tau = std::log(cfg.tau);
  PseudoLabelSet out = rejected;
  for (std::size_t i = 0; i < n; ++i) {
    if (!rejected.is_ignored(i)) continue;
    std::size_t k2d = argmax_row(logits2d.row(i));
    std::size_t k3d = argmax_row(logits3d.row(i));
    if (k2d == k3d) continue;  // no alternative hypothesis to weigh

    auto ll2d_null = log_likelihood(features2d.row(i), stats2d, k2d);
    auto ll2d_alt = log_likelihood(features2d.row(i), stats2d, k3d);
    auto ll3d_null = log_likelihood(features3d.row(i), stats3d, k3d);
    auto ll3d_alt = log_likelihood(features3d.row(i), stats3d, k2d);
    if (!ll2d_null || !ll2d_alt || !ll3d_null || !ll3d_alt) continue;

    double log_r2d = *ll2d_null - *ll2d_alt;
    double log_r3d = *ll3d_null - *ll3d_alt;
    if (log_r2d <= log_tau && log_r3d > log_tau)
      out.set(i, static_cast<std::int32_t>(k3d), Provenance::kEwRecovered3d);
    else if (log_r2d > log_tau && log_r3d <= log_tau)
      out.set(i, static_cast<std::int32_t>(k2d), Provenance::kEwRecovered2d);
  }
  return out;
}

}  // namespace xmfuse

#endif  // XMFUSE_ENTROWEIGHT_HPP_
