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

#ifndef XMFUSE_FILTER_HPP_
#define XMFUSE_FILTER_HPP_

#include <algorithm>
#include <vector>

#include "xmfuse/core.hpp"

namespace xmfuse {

/// Per-class confidence thresholds used by the median filter.
struct MedianThresholds {
  std::vector<double> per_class;
};

/// Median of each class column, taken over all samples (not just those
/// predicted as that class). Even counts average the two central order
/// statistics.
inline MedianThresholds compute_medians(const ProbMatrix& probs) {
  if (probs.samples() == 0) throw EmptyInput("compute_medians: no samples");
  MedianThresholds out;
  out.per_class.resize(probs.classes());
  std::vector<double> column(probs.samples());
  for (std::size_t k = 0; k < probs.classes(); ++k) {
    for (std::size_t i = 0; i < probs.samples(); ++i)
      column[i] = probs.row(i)[k];
    std::sort(column.begin(), column.end());
    const std::size_t n = column.size();
    out.per_class[k] = (n % 2 == 1)
                           ? column[n / 2]
                           : 0.5 * (column[n / 2 - 1] + column[n / 2]);
  }
  return out;
}

/// Keep each row's argmax label when its confidence reaches that class's
/// median (>=, so a constant matrix keeps everything); ignore otherwise.
inline PseudoLabelSet median_filter(
    const ProbMatrix& probs, const MedianThresholds& thresholds,
    Provenance accepted_tag = Provenance::kMedianPass) {
  if (thresholds.per_class.size() != probs.classes())
    throw ShapeError("median_filter: threshold count != class count");
  PseudoLabelSet labels(probs.samples());
  for (std::size_t i = 0; i < probs.samples(); ++i) {
    auto row = probs.row(i);
    std::size_t k = argmax_row(row);
    if (row[k] >= thresholds.per_class[k])
      labels.set(i, static_cast<std::int32_t>(k), accepted_tag);
  }
  return labels;
}

/// Cross-modal agreement: keep a label only when both modalities accepted
/// the same class. A pair of ignores does not agree.
inline PseudoLabelSet agreement_fuse(const PseudoLabelSet& labels2d,
                                     const PseudoLabelSet& labels3d) {
  if (labels2d.size() != labels3d.size())
    throw ShapeError("agreement_fuse: length mismatch");
  PseudoLabelSet fused(labels2d.size());
  for (std::size_t i = 0; i < labels2d.size(); ++i) {
    if (!labels2d.is_ignored(i) && labels2d.label(i) == labels3d.label(i))
      fused.set(i, labels2d.label(i), Provenance::kAgreement);
  }
  return fused;
}

/// Fraction of samples the agreement fuse accepts.
inline double target_agreement_rate(const PseudoLabelSet& labels2d,
                                    const PseudoLabelSet& labels3d) {
  if (labels2d.size() != labels3d.size())
    throw ShapeError("target_agreement_rate: length mismatch");
  if (labels2d.size() == 0)
    throw EmptyInput("target_agreement_rate: no samples");
  std::size_t agreed = 0;
  for (std::size_t i = 0; i < labels2d.size(); ++i)
    agreed += (!labels2d.is_ignored(i) &&
               labels2d.label(i) == labels3d.label(i));
  return static_cast<double>(agreed) / static_cast<double>(labels2d.size());
}

}  // namespace xmfuse

#endif  // XMFUSE_FILTER_HPP_
