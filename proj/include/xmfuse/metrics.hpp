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

#ifndef XMFUSE_METRICS_HPP_
#define XMFUSE_METRICS_HPP_

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "xmfuse/core.hpp"

namespace xmfuse {

/// K x K contingency counts, rows = ground truth, cols = prediction.
/// Ignored predictions land in a side tally so they still count as false
/// negatives for their true class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes)
      : n_classes_(n_classes), counts_(n_classes * n_classes, 0),
        ignored_(n_classes, 0) {}

  void add(std::int32_t truth, std::int32_t pred) {
    auto t = static_cast<std::size_t>(truth);
    if (t >= n_classes_) throw InvalidInput("confusion: truth out of range");
    if (pred == PseudoLabelSet::kIgnore) {
      ignored_[t]++;
      return;
    }
    auto p = static_cast<std::size_t>(pred);
    if (p >= n_classes_) throw InvalidInput("confusion: pred out of range");
    counts_[t * n_classes_ + p]++;
  }

  std::int64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * n_classes_ + pred];
  }
  std::int64_t ignored(std::size_t truth) const { return ignored_[truth]; }
  std::size_t n_classes() const { return n_classes_; }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    for (auto c : ignored_) t += c;
    return t;
  }

 private:
  std::size_t n_classes_;
  std::vector<std::int64_t> counts_;
  std::vector<std::int64_t> ignored_;
};

struct IouResult {
  std::vector<double> per_class;  // NaN for classes absent on both sides
  double mean = 0.0;
};

namespace detail {

inline IouResult iou_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t k_classes = cm.n_classes();
  IouResult out;
  out.per_class.assign(k_classes,
                       std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < k_classes; ++k) {
    std::int64_t tp = cm.at(k, k);
    std::int64_t fn = cm.ignored(k) - tp;
    std::int64_t fp = -tp;
    for (std::size_t j = 0; j < k_classes; ++j) {
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    const std::int64_t uni = tp + fp + fn;
    if (uni == 0) continue;  // absent from truth and prediction alike
    out.per_class[k] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += out.per_class[k];
    ++counted;
  }
  out.mean = counted > 0 ? sum / static_cast<double>(counted) : 0.0;
  return out;
}

}  // namespace detail

/// Per-class intersection-over-union and its mean over the classes present
/// on either side.
inline IouResult miou(const PseudoLabelSet& preds,
                      std::span<const std::int32_t> truth,
                      std::size_t n_classes) {
  if (preds.size() != truth.size()) throw ShapeError("miou: length mismatch");
  if (truth.empty()) throw EmptyInput("miou: no samples");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i)
    cm.add(truth[i], preds.label(i));
  return detail::iou_from_confusion(cm);
}

inline IouResult miou(const ProbMatrix& probs,
                      std::span<const std::int32_t> truth) {
  if (probs.samples() != truth.size())
    throw ShapeError("miou: length mismatch");
  if (truth.empty()) throw EmptyInput("miou: no samples");
  ConfusionMatrix cm(probs.classes());
  for (std::size_t i = 0; i < truth.size(); ++i)
    cm.add(truth[i], static_cast<std::int32_t>(argmax_row(probs.row(i))));
  return detail::iou_from_confusion(cm);
}

/// Elementwise mean of the two modalities' probabilities.
inline ProbMatrix ensemble_2d3d(const ProbMatrix& probs2d,
                                const ProbMatrix& probs3d) {
  if (probs2d.samples() != probs3d.samples() ||
      probs2d.classes() != probs3d.classes())
    throw ShapeError("ensemble_2d3d: shape mismatch");
  Matrix out(probs2d.samples(), probs2d.classes());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto a = probs2d.row(i);
    auto b = probs3d.row(i);
    auto dst = out.row(i);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = 0.5 * (a[k] + b[k]);
  }
  return ProbMatrix(std::move(out));
}

struct PseudoLabelReport {
  double correct_pct = 0.0;
  double incorrect_pct = 0.0;
  double ignore_pct = 0.0;
};

/// Accepted-label quality against ground truth, as percentages of all
/// samples. The three fields always total 100.
inline PseudoLabelReport pseudo_label_report(
    const PseudoLabelSet& labels, std::span<const std::int32_t> truth) {
  if (labels.size() != truth.size())
    throw ShapeError("pseudo_label_report: length mismatch");
  if (truth.empty()) throw EmptyInput("pseudo_label_report: no samples");
  std::size_t correct = 0, incorrect = 0, ignored = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (labels.is_ignored(i))
      ++ignored;
    else if (labels.label(i) == truth[i])
      ++correct;
    else
      ++incorrect;
  }
  const double n = static_cast<double>(truth.size());
  return PseudoLabelReport{100.0 * static_cast<double>(correct) / n,
                           100.0 * static_cast<double>(incorrect) / n,
                           100.0 * static_cast<double>(ignored) / n};
}

inline std::string format_report_text(const PseudoLabelReport& r,
                                      const std::string& method) {
  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "Method  Correct  Incorrect  Ignore\n"
                "%-6s  %7.2f  %9.2f  %6.2f\n",
                method.c_str(), r.correct_pct, r.incorrect_pct, r.ignore_pct);
  return buf;
}

inline std::string format_report_csv(const PseudoLabelReport& r,
                                     const std::string& method) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "method,correct,incorrect,ignore\n%s,%.2f,%.2f,%.2f\n",
                method.c_str(), r.correct_pct, r.incorrect_pct, r.ignore_pct);
  return buf;
}

inline std::string format_iou_text(const IouResult& iou,
                                   const std::string& name) {
  std::string out = name + " per-class IoU:";
  char buf[64];
  for (double v : iou.per_class) {
    if (std::isnan(v)) {
      out += "    n/a";
    } else {
      std::snprintf(buf, sizeof(buf), "  %.4f", v);
      out += buf;
    }
  }
  std::snprintf(buf, sizeof(buf), "\n%s mIoU: %.4f\n", name.c_str(),
                iou.mean);
  out += buf;
  return out;
}

}  // namespace xmfuse

#endif  // XMFUSE_METRICS_HPP_
