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

#ifndef XMFUSE_CORE_HPP_
#define XMFUSE_CORE_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmfuse {

// Everything downstream computes in double even when files store float32;
// medians and likelihood ratios are too fragile in single precision.
inline constexpr double kLogFloor = 1e-12;  // floor applied inside log()

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// File contents or manifest inconsistent with what the pipeline expects.
class DataError : public Error {
 public:
  using Error::Error;
};

class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Dense row-major matrix of doubles. Plain storage; the typed wrappers
/// below add the semantic checks.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double value = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, value) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Matrix();
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_)
        throw ShapeError("from_rows: ragged row lengths");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return std::span<double>(data_.data() + r * cols_, cols_);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_.data() + r * cols_, cols_);
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// N x K matrix of class probabilities; every row is a distribution.
class ProbMatrix {
 public:
  static constexpr double kRowSumTol = 1e-6;

  ProbMatrix() = default;
  explicit ProbMatrix(Matrix values) : values_(std::move(values)) {
    for (std::size_t r = 0; r < values_.rows(); ++r) {
      double sum = 0.0;
      for (double v : values_.row(r)) {
        if (!(v >= 0.0 && v <= 1.0))
          throw InvalidInput("probability outside [0,1] in row " +
                             std::to_string(r));
        sum += v;
      }
      if (std::abs(sum - 1.0) > kRowSumTol)
        throw InvalidInput("row " + std::to_string(r) +
                           " does not sum to 1 (sum=" + std::to_string(sum) +
                           ")");
    }
  }

  std::size_t samples() const { return values_.rows(); }
  std::size_t classes() const { return values_.cols(); }
  std::span<const double> row(std::size_t r) const { return values_.row(r); }
  const Matrix& matrix() const { return values_; }

 private:
  Matrix values_;
};

/// N x K matrix of raw (pre-softmax) scores.
class LogitMatrix {
 public:
  LogitMatrix() = default;
  explicit LogitMatrix(Matrix values) : values_(std::move(values)) {
    if (!values_.all_finite())
      throw InvalidInput("logit matrix contains NaN or Inf");
  }

  std::size_t samples() const { return values_.rows(); }
  std::size_t classes() const { return values_.cols(); }
  std::span<const double> row(std::size_t r) const { return values_.row(r); }
  const Matrix& matrix() const { return values_; }

 private:
  Matrix values_;
};

/// N x D matrix of encoder features.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  explicit FeatureMatrix(Matrix values) : values_(std::move(values)) {
    if (!values_.all_finite())
      throw InvalidInput("feature matrix contains NaN or Inf");
  }

  std::size_t samples() const { return values_.rows(); }
  std::size_t dim() const { return values_.cols(); }
  std::span<const double> row(std::size_t r) const { return values_.row(r); }
  const Matrix& matrix() const { return values_; }

 private:
  Matrix values_;
};

/// Which path produced each accepted pseudo-label.
enum class Provenance : std::uint8_t {
  kMedianPass,
  kAgreement,
  kEwFused,
  kEwRecovered2d,
  kEwRecovered3d,
  kIgnored,
};

/// Per-sample labels in {0..K-1} plus an ignore sentinel, with provenance.
/// The two vectors move together: a sample is Ignored exactly when its
/// label is kIgnore.
class PseudoLabelSet {
 public:
  static constexpr std::int32_t kIgnore = -1;

  PseudoLabelSet() = default;
  explicit PseudoLabelSet(std::size_t n)
      : labels_(n, kIgnore), provenance_(n, Provenance::kIgnored) {}

  static PseudoLabelSet from_labels(std::vector<std::int32_t> labels,
                                    Provenance accepted_tag) {
    PseudoLabelSet set(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnore)
        set.set_ignored(i);
      else
        set.set(i, labels[i], accepted_tag);
    }
    return set;
  }

  void set(std::size_t i, std::int32_t label, Provenance p) {
    if (label == kIgnore || p == Provenance::kIgnored)
      throw InvalidInput("accepted label must pair a class with a non-ignore "
                         "provenance");
    labels_[i] = label;
    provenance_[i] = p;
  }

  void set_ignored(std::size_t i) {
    labels_[i] = kIgnore;
    provenance_[i] = Provenance::kIgnored;
  }

  std::size_t size() const { return labels_.size(); }
  std::int32_t label(std::size_t i) const { return labels_[i]; }
  Provenance provenance(std::size_t i) const { return provenance_[i]; }
  bool is_ignored(std::size_t i) const { return labels_[i] == kIgnore; }

  std::size_t accepted_count() const {
    std::size_t n = 0;
    for (auto l : labels_) n += (l != kIgnore);
    return n;
  }

  const std::vector<std::int32_t>& labels() const { return labels_; }
  const std::vector<Provenance>& provenances() const { return provenance_; }

 private:
  std::vector<std::int32_t> labels_;
  std::vector<Provenance> provenance_;
};

/// Index of the largest entry; ties break toward the lowest index so the
/// result never depends on evaluation order.
inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

/// Row-wise softmax with max subtraction, so huge logits cannot overflow.
inline ProbMatrix softmax(const LogitMatrix& logits) {
  Matrix out(logits.samples(), logits.classes());
  for (std::size_t r = 0; r < logits.samples(); ++r) {
    auto in = logits.row(r);
    auto dst = out.row(r);
    double hi = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      dst[k] = std::exp(in[k] - hi);
      sum += dst[k];
    }
    for (std::size_t k = 0; k < in.size(); ++k) dst[k] /= sum;
  }
  return ProbMatrix(std::move(out));
}

/// Shannon entropy of one probability row, natural log. 0*log(0) counts
/// as 0, so one-hot rows give exactly 0.
inline double entropy(std::span<const double> row) {
  double h = 0.0;
  for (double p : row) {
    if (p < 0.0) throw InvalidInput("entropy: negative probability");
    h -= p * std::log(std::max(p, kLogFloor));
  }
  return h;
}

/// KL(p || q) in nats. Both arguments are floored inside the log; identical
/// inputs give exactly 0.
inline double kl_divergence(std::span<const double> p,
                            std::span<const double> q) {
  if (p.size() != q.size())
    throw ShapeError("kl_divergence: length mismatch");
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= 0.0) continue;
    d += p[k] * (std::log(std::max(p[k], kLogFloor)) -
                 std::log(std::max(q[k], kLogFloor)));
  }
  return d;
}

struct ArgmaxResult {
  std::vector<std::int32_t> labels;
  std::vector<double> confidence;
};

/// Per-row argmax class and the probability at that class.
inline ArgmaxResult argmax_with_confidence(const ProbMatrix& probs) {
  ArgmaxResult out;
  out.labels.reserve(probs.samples());
  out.confidence.reserve(probs.samples());
  for (std::size_t r = 0; r < probs.samples(); ++r) {
    auto row = probs.row(r);
    std::size_t k = argmax_row(row);
    out.labels.push_back(static_cast<std::int32_t>(k));
    out.confidence.push_back(row[k]);
  }
  return out;
}

}  // namespace xmfuse

#endif  // XMFUSE_CORE_HPP_
