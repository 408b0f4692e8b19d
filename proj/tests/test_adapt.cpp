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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "oracle.hpp"
#include "test_util.hpp"
#include "xmfuse/adapt.hpp"
#include "xmfuse/rng.hpp"

using namespace xmfuse;

namespace {

PseudoLabelSet labels_of(std::vector<std::int32_t> v) {
  return PseudoLabelSet::from_labels(std::move(v), Provenance::kAgreement);
}

// All parameters of both heads, in the order the optimizer walks them.
std::vector<double*> parameter_view(DualHeadModel& m) {
  std::vector<double*> out;
  for (auto& v : m.main.weights.data()) out.push_back(&v);
  for (auto& v : m.main.bias) out.push_back(&v);
  for (auto& v : m.xlate.weights.data()) out.push_back(&v);
  for (auto& v : m.xlate.bias) out.push_back(&v);
  return out;
}

std::vector<double> gradient_view(const ModelGrads& g) {
  std::vector<double> out;
  for (auto v : g.main.weights.data()) out.push_back(v);
  for (auto v : g.main.bias) out.push_back(v);
  for (auto v : g.xlate.weights.data()) out.push_back(v);
  for (auto v : g.xlate.bias) out.push_back(v);
  return out;
}

}  // namespace

TEST_CASE("estimate_class_distribution") {
  SUBCASE("uniform stays uniform") {
    ProbMatrix u(Matrix::from_rows({{0.25, 0.25, 0.25, 0.25},
                                    {0.25, 0.25, 0.25, 0.25}}));
    auto dist = estimate_class_distribution(u, u);
    for (double p : dist.probs) CHECK(p == doctest::Approx(0.25));
  }
  SUBCASE("opposed one-hots average out") {
    ProbMatrix a(Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}}));
    ProbMatrix b(Matrix::from_rows({{0.0, 1.0}, {0.0, 1.0}}));
    auto dist = estimate_class_distribution(a, b);
    CHECK(dist.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(dist.probs[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("matches the double-loop average") {
    Rng rng(41);
    auto a = testutil::random_prob_rows(rng, 100, 5);
    auto b = testutil::random_prob_rows(rng, 100, 5);
    auto dist = estimate_class_distribution(
        ProbMatrix(testutil::to_matrix(a)), ProbMatrix(testutil::to_matrix(b)));
    for (std::size_t k = 0; k < 5; ++k) {
      double mean_a = 0.0, mean_b = 0.0;
      for (std::size_t i = 0; i < 100; ++i) {
        mean_a += a[i][k] / 100.0;
        mean_b += b[i][k] / 100.0;
      }
      CHECK(dist.probs[k] ==
            doctest::Approx(0.5 * (mean_a + mean_b)).epsilon(1e-12));
    }
  }
  SUBCASE("class count mismatch") {
    ProbMatrix a(Matrix::from_rows({{1.0, 0.0}}));
    ProbMatrix b(Matrix::from_rows({{0.5, 0.25, 0.25}}));
    CHECK_THROWS_AS(estimate_class_distribution(a, b), ShapeError);
  }
}

TEST_CASE("class_weights") {
  SUBCASE("uniform distribution gives unit weights") {
    ClassDistribution dist{{0.25, 0.25, 0.25, 0.25}};
    for (double w : class_weights(dist))
      CHECK(w == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("nine-to-one imbalance") {
    ClassDistribution dist{{0.9, 0.1}};
    auto w = class_weights(dist);
    CHECK(w[0] == doctest::Approx(0.5556).epsilon(1e-3));
    CHECK(w[1] == doctest::Approx(5.0).epsilon(1e-3));
  }
  SUBCASE("expected weight is one under the distribution") {
    Rng rng(43);
    for (int rep = 0; rep < 100; ++rep) {
      ClassDistribution dist{testutil::random_prob_row(rng, 2 + rng.below(6))};
      auto w = class_weights(dist);
      double expect = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k)
        expect += w[k] * dist.probs[k];
      CHECK(expect == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("permuting the distribution permutes the weights") {
    ClassDistribution dist{{0.5, 0.3, 0.2}};
    ClassDistribution rotated{{0.2, 0.5, 0.3}};
    auto w = class_weights(dist);
    auto wr = class_weights(rotated);
    CHECK(wr[0] == doctest::Approx(w[2]).epsilon(1e-12));
    CHECK(wr[1] == doctest::Approx(w[0]).epsilon(1e-12));
    CHECK(wr[2] == doctest::Approx(w[1]).epsilon(1e-12));
  }
}

TEST_CASE("loss_pl") {
  SUBCASE("perfect predictions cost nothing") {
    ProbMatrix p(Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
    std::vector<double> w = {1.0, 1.0};
    CHECK(loss_pl(p, p, labels_of({0, 1}), w) == 0.0);
  }
  SUBCASE("single coin-flip sample") {
    ProbMatrix p(Matrix::from_rows({{0.5, 0.5}}));
    std::vector<double> w = {1.0, 1.0};
    // both modalities contribute ln 2
    CHECK(loss_pl(p, p, labels_of({0}), w) ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("all-ignored batch is zero, not an error") {
    ProbMatrix p(Matrix::from_rows({{0.5, 0.5}}));
    std::vector<double> w = {1.0, 1.0};
    CHECK(loss_pl(p, p, labels_of({-1}), w) == 0.0);
  }
  SUBCASE("matches a scalar loop") {
    Rng rng(47);
    auto a = testutil::random_prob_rows(rng, 40, 4);
    auto b = testutil::random_prob_rows(rng, 40, 4);
    std::vector<std::int32_t> raw(40);
    for (auto& v : raw)
      v = rng.uniform() < 0.25 ? -1 : static_cast<std::int32_t>(rng.below(4));
    std::vector<double> w = {0.5, 1.5, 2.0, 0.25};
    double num_a = 0.0, num_b = 0.0, denom = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] < 0) continue;
      auto y = static_cast<std::size_t>(raw[i]);
      num_a += w[y] * -std::log(a[i][y]);
      num_b += w[y] * -std::log(b[i][y]);
      denom += w[y];
    }
    double expect = num_a / denom + num_b / denom;
    double got = loss_pl(ProbMatrix(testutil::to_matrix(a)),
                         ProbMatrix(testutil::to_matrix(b)),
                         labels_of(std::move(raw)), w);
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
  }
  SUBCASE("invariant to rescaling the weight vector") {
    Rng rng(53);
    auto a = testutil::random_prob_rows(rng, 20, 3);
    std::vector<std::int32_t> raw(20);
    for (auto& v : raw) v = static_cast<std::int32_t>(rng.below(3));
    std::vector<double> w = {0.7, 1.1, 2.3};
    std::vector<double> w10 = {7.0, 11.0, 23.0};
    ProbMatrix p(testutil::to_matrix(a));
    auto labels = labels_of(std::move(raw));
    CHECK(loss_pl(p, p, labels, w) ==
          doctest::Approx(loss_pl(p, p, labels, w10)).epsilon(1e-12));
  }
  SUBCASE("permuting classes, labels and weights together changes nothing") {
    Rng rng(59);
    auto a = testutil::random_prob_rows(rng, 30, 4);
    auto b = testutil::random_prob_rows(rng, 30, 4);
    std::vector<std::int32_t> raw(30);
    for (auto& v : raw) v = static_cast<std::int32_t>(rng.below(4));
    std::vector<double> w = {0.4, 1.0, 1.8, 3.1};
    std::vector<std::size_t> perm = {2, 0, 3, 1};  // k -> perm[k]
    oracle::Rows pa(30, std::vector<double>(4)), pb = pa;
    std::vector<std::int32_t> praw(30);
    std::vector<double> pw(4);
    for (std::size_t k = 0; k < 4; ++k) pw[perm[k]] = w[k];
    for (std::size_t i = 0; i < 30; ++i) {
      praw[i] = static_cast<std::int32_t>(perm[raw[i]]);
      for (std::size_t k = 0; k < 4; ++k) {
        pa[i][perm[k]] = a[i][k];
        pb[i][perm[k]] = b[i][k];
      }
    }
    double base = loss_pl(ProbMatrix(testutil::to_matrix(a)),
                          ProbMatrix(testutil::to_matrix(b)),
                          labels_of(std::move(raw)), w);
    double permuted = loss_pl(ProbMatrix(testutil::to_matrix(pa)),
                              ProbMatrix(testutil::to_matrix(pb)),
                              labels_of(std::move(praw)), pw);
    CHECK(base == doctest::Approx(permuted).epsilon(1e-12));
  }
}

TEST_CASE("loss_xm") {
  SUBCASE("translation equal to main is exactly zero") {
    ProbMatrix p(Matrix::from_rows({{0.3, 0.7}, {0.9, 0.1}}));
    CHECK(loss_xm(p, p, p, p) == 0.0);
  }
  SUBCASE("one-hot against the coin flip") {
    ProbMatrix p2(Matrix::from_rows({{1.0, 0.0}}));
    ProbMatrix x3(Matrix::from_rows({{0.5, 0.5}}));
    ProbMatrix p3(Matrix::from_rows({{0.4, 0.6}}));
    CHECK(loss_xm(p2, x3, p3, p3) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("shape mismatch") {
    ProbMatrix a(Matrix::from_rows({{1.0, 0.0}}));
    ProbMatrix b(Matrix::from_rows({{0.5, 0.25, 0.25}}));
    CHECK_THROWS_AS(loss_xm(a, b, a, a), ShapeError);
  }
  SUBCASE("matches a per-row summation") {
    Rng rng(61);
    auto p2 = testutil::random_prob_rows(rng, 25, 3);
    auto x3 = testutil::random_prob_rows(rng, 25, 3);
    auto p3 = testutil::random_prob_rows(rng, 25, 3);
    auto x2 = testutil::random_prob_rows(rng, 25, 3);
    double expect = 0.0;
    for (std::size_t i = 0; i < 25; ++i)
      expect += (oracle::kl_of(p2[i], x3[i]) + oracle::kl_of(p3[i], x2[i])) /
                25.0;
    double got = loss_xm(ProbMatrix(testutil::to_matrix(p2)),
                         ProbMatrix(testutil::to_matrix(x3)),
                         ProbMatrix(testutil::to_matrix(p3)),
                         ProbMatrix(testutil::to_matrix(x2)));
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("analytic gradients match finite differences") {
  Rng rng(67);
  const std::size_t n = 8, k = 4, d = 6;
  for (double lambda : {0.0, 0.1}) {
    DualHeadModel m2 = DualHeadModel::random_init(d, k, rng, 0.5);
    DualHeadModel m3 = DualHeadModel::random_init(d, k, rng, 0.5);
    // desync the translation heads so the mimicry term is active
    for (auto& v : m2.xlate.weights.data()) v += 0.3 * rng.normal();
    for (auto& v : m3.xlate.weights.data()) v += 0.3 * rng.normal();
    Matrix f2(n, d), f3(n, d);
    for (auto& v : f2.data()) v = rng.normal();
    for (auto& v : f3.data()) v = rng.normal();
    std::vector<std::int32_t> raw(n);
    for (std::size_t i = 0; i < n; ++i)
      raw[i] = i == 0 ? -1 : static_cast<std::int32_t>(rng.below(k));
    auto labels = labels_of(std::move(raw));
    std::vector<double> weights = {0.6, 1.2, 1.0, 2.2};
    FeatureMatrix feats2(std::move(f2)), feats3(std::move(f3));

    BatchEval eval = evaluate_batch(m2, m3, feats2, feats3, labels, weights,
                                    lambda);
    auto analytic2 = gradient_view(eval.grads2d);
    auto analytic3 = gradient_view(eval.grads3d);

    // The mimicry targets are constants of the objective, so the finite
    // differences probe a loss with the targets pinned at the base point.
    ProbMatrix target2 = softmax(LogitMatrix(m2.main_logits(feats2)));
    ProbMatrix target3 = softmax(LogitMatrix(m3.main_logits(feats3)));
    auto detached_loss = [&]() {
      ProbMatrix p2 = softmax(LogitMatrix(m2.main_logits(feats2)));
      ProbMatrix p3 = softmax(LogitMatrix(m3.main_logits(feats3)));
      ProbMatrix x23 = softmax(LogitMatrix(m2.xlate_logits(feats2)));
      ProbMatrix x32 = softmax(LogitMatrix(m3.xlate_logits(feats3)));
      return loss_pl(p2, p3, labels, weights) +
             lambda * loss_xm(target2, x32, target3, x23);
    };
    CHECK(detached_loss() == doctest::Approx(eval.loss_tot).epsilon(1e-12));

    const double h = 1e-5;
    auto check_model = [&](DualHeadModel& model,
                           const std::vector<double>& analytic) {
      auto params = parameter_view(model);
      REQUIRE(params.size() == analytic.size());
      for (std::size_t j = 0; j < params.size(); ++j) {
        double saved = *params[j];
        *params[j] = saved + h;
        double up = detached_loss();
        *params[j] = saved - h;
        double down = detached_loss();
        *params[j] = saved;
        double fd = (up - down) / (2.0 * h);
        double rel = std::abs(analytic[j] - fd) /
                     std::max({std::abs(analytic[j]), std::abs(fd), 1e-6});
        CHECK(rel < 1e-4);
      }
    };
    check_model(m2, analytic2);
    check_model(m3, analytic3);
  }
}

TEST_CASE("train") {
  SUBCASE("a single labeled point becomes separable") {
    Rng rng(71);
    DualHeadModel m2 = DualHeadModel::random_init(1, 2, rng);
    DualHeadModel m3 = DualHeadModel::random_init(1, 2, rng);
    FeatureMatrix f(Matrix::from_rows({{1.0}}));
    ClassDistribution dist{{0.5, 0.5}};
    TrainConfig cfg;
    cfg.lambda_xm = 0.0;
    cfg.optimizer = OptimizerKind::kSgd;
    cfg.learning_rate = 0.5;
    cfg.iterations = 300;
    cfg.batch_size = 1;
    cfg.milestones = {};
    auto result = train(m2, m3, f, f, labels_of({1}), dist, cfg);
    Matrix logits = result.model2d.main_logits(f);
    CHECK(argmax_row(logits.row(0)) == 1);
    CHECK(result.trace.size() == 300);
    CHECK(result.trace.back().loss_tot < result.trace.front().loss_tot);
  }
  SUBCASE("zero iterations return the models untouched") {
    Rng rng(73);
    DualHeadModel m2 = DualHeadModel::random_init(3, 2, rng);
    DualHeadModel m3 = DualHeadModel::random_init(3, 2, rng);
    FeatureMatrix f(Matrix::from_rows({{1.0, 0.0, 0.0}}));
    ClassDistribution dist{{0.5, 0.5}};
    TrainConfig cfg;
    cfg.iterations = 0;
    auto result = train(m2, m3, f, f, labels_of({0}), dist, cfg);
    CHECK(result.model2d.main.weights == m2.main.weights);
    CHECK(result.model2d.xlate.weights == m2.xlate.weights);
    CHECK(result.model3d.main.bias == m3.main.bias);
    CHECK(result.trace.empty());
  }
  SUBCASE("full-batch descent never increases the pseudo-label loss") {
    Rng rng(79);
    const std::size_t n = 24, k = 3, d = 4;
    DualHeadModel m2 = DualHeadModel::random_init(d, k, rng, 0.2);
    DualHeadModel m3 = DualHeadModel::random_init(d, k, rng, 0.2);
    Matrix f2(n, d), f3(n, d);
    for (auto& v : f2.data()) v = rng.normal();
    for (auto& v : f3.data()) v = rng.normal();
    std::vector<std::int32_t> raw(n);
    for (auto& v : raw) v = static_cast<std::int32_t>(rng.below(k));
    ClassDistribution dist{{1.0 / 3, 1.0 / 3, 1.0 / 3}};
    TrainConfig cfg;
    cfg.lambda_xm = 0.0;
    cfg.optimizer = OptimizerKind::kSgd;
    cfg.learning_rate = 1e-3;
    cfg.iterations = 200;
    cfg.batch_size = n;  // full batch
    cfg.milestones = {};
    auto result = train(m2, m3, FeatureMatrix(std::move(f2)),
                        FeatureMatrix(std::move(f3)),
                        labels_of(std::move(raw)), dist, cfg);
    for (std::size_t s = 1; s < result.trace.size(); ++s)
      CHECK(result.trace[s].loss_pl - result.trace[s - 1].loss_pl <= 1e-9);
  }
  SUBCASE("identical configs give bitwise identical traces") {
    Rng rng(83);
    const std::size_t n = 30, k = 3, d = 5;
    DualHeadModel m2 = DualHeadModel::random_init(d, k, rng, 0.3);
    DualHeadModel m3 = DualHeadModel::random_init(d, k, rng, 0.3);
    Matrix f2(n, d), f3(n, d);
    for (auto& v : f2.data()) v = rng.normal();
    for (auto& v : f3.data()) v = rng.normal();
    std::vector<std::int32_t> raw(n);
    for (auto& v : raw) v = static_cast<std::int32_t>(rng.below(k));
    ClassDistribution dist{{0.2, 0.3, 0.5}};
    TrainConfig cfg;
    cfg.iterations = 50;
    cfg.batch_size = 7;
    cfg.seed = 12345;
    FeatureMatrix feats2(std::move(f2)), feats3(std::move(f3));
    auto labels = labels_of(std::move(raw));
    auto a = train(m2, m3, feats2, feats3, labels, dist, cfg);
    auto b = train(m2, m3, feats2, feats3, labels, dist, cfg);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t s = 0; s < a.trace.size(); ++s) {
      CHECK(a.trace[s].loss_pl == b.trace[s].loss_pl);
      CHECK(a.trace[s].loss_xm == b.trace[s].loss_xm);
      CHECK(a.trace[s].loss_tot == b.trace[s].loss_tot);
    }
    CHECK(a.model2d.main.weights == b.model2d.main.weights);
    CHECK(a.model3d.xlate.weights == b.model3d.xlate.weights);
  }
  SUBCASE("feature dims must match the models") {
    Rng rng(87);
    DualHeadModel m2 = DualHeadModel::random_init(3, 2, rng);
    DualHeadModel m3 = DualHeadModel::random_init(3, 2, rng);
    CHECK(m2.xlate.weights == m2.main.weights);  // starts as a copy
    FeatureMatrix f(Matrix::from_rows({{1.0, 2.0}}));
    ClassDistribution dist{{0.5, 0.5}};
    TrainConfig cfg;
    CHECK_THROWS_AS(train(m2, m3, f, f, labels_of({0}), dist, cfg),
                    ShapeError);
  }
  SUBCASE("an absurd learning rate reports the diverging step") {
    Rng rng(89);
    DualHeadModel m2 = DualHeadModel::random_init(2, 2, rng);
    DualHeadModel m3 = DualHeadModel::random_init(2, 2, rng);
    FeatureMatrix f(Matrix::from_rows({{1.0, 2.0}, {3.0, -1.0}}));
    ClassDistribution dist{{0.5, 0.5}};
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::kSgd;
    cfg.learning_rate = 1e308;
    cfg.iterations = 10;
    cfg.batch_size = 2;
    cfg.milestones = {};
    CHECK_THROWS_AS(train(m2, m3, f, f, labels_of({0, 1}), dist, cfg),
                    DivergedError);
  }
}

TEST_CASE("train config json round trip") {
  TrainConfig cfg;
  cfg.lambda_xm = 0.01;
  cfg.learning_rate = 1e-3;
  cfg.iterations = 1000;
  cfg.batch_size = 8;
  cfg.seed = 99;
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.milestones = {0.5};
  cfg.weight_mode = WeightMode::kUniform;
  nlohmann::json j = cfg;
  auto back = j.get<TrainConfig>();
  CHECK(back.lambda_xm == cfg.lambda_xm);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.iterations == cfg.iterations);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.seed == cfg.seed);
  CHECK(back.optimizer == cfg.optimizer);
  CHECK(back.milestones == cfg.milestones);
  CHECK(back.weight_mode == cfg.weight_mode);
  nlohmann::json bad = {{"optimizer", "sgdm"}};
  CHECK_THROWS_AS(bad.get<TrainConfig>(), ConfigError);
}
