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

#ifndef XMFUSE_SWITCHING_HPP_
#define XMFUSE_SWITCHING_HPP_

#include <cstdio>
#include <limits>
#include <string>

#include "xmfuse/core.hpp"
#include "xmfuse/filter.hpp"

namespace xmfuse {

/// Top-1 accuracies of the two source models, the only source-side
/// information the pipeline ever sees.
struct SourceMeta {
  double top1_2d = 0.0;
  double top1_3d = 0.0;
};

enum class FusionMode { kAf, kEw };

inline const char* to_string(FusionMode mode) {
  return mode == FusionMode::kAf ? "AF" : "EW";
}

struct SwitchDecision {
  double source_agreement = 0.0;
  double target_agreement = 0.0;
  double ratio = 0.0;
  double threshold = 0.5;
  FusionMode mode = FusionMode::kEw;
  bool degenerate_source = false;
};

/// Expected agreement of two independent correct-or-not predictors: the
/// product of their Top-1 accuracies.
inline double source_agreement(const SourceMeta& meta) {
  if (meta.top1_2d < 0.0 || meta.top1_2d > 1.0 || meta.top1_3d < 0.0 ||
      meta.top1_3d > 1.0)
    throw InvalidInput("source_agreement: Top-1 accuracies must be in [0,1]");
  return meta.top1_2d * meta.top1_3d;
}

/// Pick the fusion method from how far the observed target agreement falls
/// below the agreement the source models would show on their own turf.
/// A ratio at or below the threshold means a wide domain gap: agreement
/// filtering. Otherwise entropy weighting.
inline SwitchDecision decide(double source_agr, double target_agr,
                             double threshold = 0.5) {
  SwitchDecision d;
  d.source_agreement = source_agr;
  d.target_agreement = target_agr;
  d.threshold = threshold;
  if (source_agr <= 0.0) {
    // Nothing to compare against; fall back to the conservative method.
    d.ratio = std::numeric_limits<double>::infinity();
    d.mode = FusionMode::kAf;
    d.degenerate_source = true;
    return d;
  }
  d.ratio = target_agr / source_agr;
  d.mode = (d.ratio <= threshold) ? FusionMode::kAf : FusionMode::kEw;
  return d;
}

inline SwitchDecision decide(const SourceMeta& meta,
                             const PseudoLabelSet& labels2d,
                             const PseudoLabelSet& labels3d,
                             double threshold = 0.5) {
  return decide(source_agreement(meta),
                target_agreement_rate(labels2d, labels3d), threshold);
}

inline std::string format_decision_text(const SwitchDecision& d) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "Source Agreement  %6.2f\n"
                "Target Agreement  %6.2f\n"
                "Ratio             %6.2f\n"
                "Mode              %6s%s\n",
                100.0 * d.source_agreement, 100.0 * d.target_agreement,
                d.ratio, to_string(d.mode),
                d.degenerate_source ? " (degenerate source)" : "");
  return buf;
}

inline std::string format_decision_csv(const SwitchDecision& d) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "source_agreement,target_agreement,ratio,mode\n"
                "%.2f,%.2f,%.2f,%s\n",
                100.0 * d.source_agreement, 100.0 * d.target_agreement,
                d.ratio, to_string(d.mode));
  return buf;
}

}  // namespace xmfuse

#endif  // XMFUSE_SWITCHING_HPP_
