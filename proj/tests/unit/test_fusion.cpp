#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "prunefuse/error.hpp"
#include "prunefuse/fusion.hpp"

using namespace prunefuse;

namespace {

// Solves the normal equations of [1 X] b = y by Gaussian elimination.
std::vector<double> ols_predictions(const Matrix& x, const std::vector<double>& y) {
  const std::size_t p = x.cols + 1;
  std::vector<std::vector<long double>> a(p, std::vector<long double>(p + 1, 0.0L));
  for (std::size_t r = 0; r < x.rows; ++r) {
    std::vector<long double> z{1.0L};
    for (std::size_t c = 0; c < x.cols; ++c) z.push_back(x(r, c));
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) a[i][j] += z[i] * z[j];
      a[i][p] += z[i] * y[r];
    }
  }
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r)
      if (std::fabs(a[r][c]) > std::fabs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const long double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= p; ++k) a[r][k] -= f * a[c][k];
    }
  }
  std::vector<double> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    long double s = a[0][p] / a[0][0];
    for (std::size_t c = 0; c < x.cols; ++c) s += a[c + 1][p] / a[c + 1][c + 1] * x(r, c);
    out[r] = static_cast<double>(s);
  }
  return out;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (double& v : m.data) v = nd(rng);
  return m;
}

std::vector<double> predict_all(const LinearModel& lm, const Matrix& x) {
  std::vector<double> out;
  for (std::size_t r = 0; r < x.rows; ++r) out.push_back(lm.predict(x.row(r)));
  return out;
}

std::vector<double> predict_all(const ForestModel& fm, const Matrix& x) {
  std::vector<double> out;
  for (std::size_t r = 0; r < x.rows; ++r) out.push_back(fm.predict(x.row(r)));
  return out;
}

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.seed = 21;
  return c;
}

std::vector<TokenBatch> eval_batches() {
  DatasetSpec spec;
  spec.n_train = 32;
  spec.n_val = 96;
  spec.n_test = 32;
  return make_batches(generate_corpus(spec).val, 32);
}

double accuracy_of(const Model& m, const std::vector<TokenBatch>& eval) {
  std::size_t ok = 0, n = 0;
  for (const TokenBatch& b : eval) {
    const Tensor logits = forward(m, b).logits;
    const std::size_t C = logits.shape[1];
    for (std::size_t i = 0; i < b.batch_size; ++i) {
      const double* row = logits.data.data() + i * C;
      ok += static_cast<int>(std::max_element(row, row + C) - row) == b.labels[i];
      ++n;
    }
  }
  return static_cast<double>(ok) / static_cast<double>(n);
}

}  // namespace

TEST(MeasureImpacts, MatchesIndependentAblation) {
  Model m(small_config());
  m.prune(2);
  const auto eval = eval_batches();
  const ImpactVector iv = measure_impacts(m, eval);
  EXPECT_EQ(iv.layers, (std::vector<std::size_t>{0, 1, 3}));
  const double base = accuracy_of(m, eval);
  EXPECT_DOUBLE_EQ(iv.base_accuracy, base);
  for (std::size_t i = 0; i < iv.layers.size(); ++i) {
    Model ablated = m;
    ablated.prune(iv.layers[i]);
    EXPECT_NEAR(iv.delta[i], base - accuracy_of(ablated, eval), 1e-12) << iv.layers[i];
    EXPECT_GE(iv.delta[i], -1.0);
    EXPECT_LE(iv.delta[i], 1.0);
  }
  EXPECT_EQ(m.prune_mask(), (std::vector<bool>{false, false, true, false}));
  const ImpactVector again = measure_impacts(m, eval);
  EXPECT_EQ(again.delta, iv.delta);
}

TEST(MeasureImpacts, ZeroEffectLayerHasZeroImpact) {
  ModelConfig c = small_config();
  c.layer_norm_eps = 0.0;
  Model m(c);
  m.embedding_ln_gamma.value.fill(0.0);
  for (std::size_t i = 0; i < c.d_model; ++i) m.embedding_ln_beta.value[i] = (i % 2 == 0) ? 1.0 : -1.0;
  for (Parameter* p : m.layer(0).parameters()) p->value.fill(0.0);
  m.layer(0).ln1_gamma.value.fill(1.0);
  m.layer(0).ln2_gamma.value.fill(1.0);
  const ImpactVector iv = measure_impacts(m, eval_batches());
  EXPECT_EQ(iv.delta[0], 0.0);
}

TEST(MeasureImpacts, EmptyEvalIsError) {
  Model m(small_config());
  EXPECT_THROW(measure_impacts(m, std::vector<TokenBatch>{}), Error);
}

TEST(FitLinear, ExactRecoveryMatchesNormalEquations) {
  std::mt19937_64 rng(12);
  const Matrix x = random_matrix(20, 12, rng);
  std::vector<double> w(12);
  for (std::size_t j = 0; j < 12; ++j) w[j] = 0.3 * static_cast<double>(j) - 1.7;
  std::vector<double> y;
  for (std::size_t r = 0; r < x.rows; ++r) {
    double s = 0.42;
    for (std::size_t j = 0; j < 12; ++j) s += w[j] * x(r, j);
    y.push_back(s);
  }
  const auto oracle = ols_predictions(x, y);
  const auto exact = predict_all(fit_linear(x, y, 0.0), x);
  for (std::size_t r = 0; r < x.rows; ++r) {
    EXPECT_NEAR(oracle[r], y[r], 1e-10);
    EXPECT_NEAR(exact[r], y[r], 1e-8);
  }
  // The default ridge penalty stays close to the exact fit.
  const auto ridge = predict_all(fit_linear(x, y), x);
  for (std::size_t r = 0; r < x.rows; ++r) EXPECT_NEAR(ridge[r], y[r], 1e-5);
}

TEST(FitLinear, ConstantTarget) {
  std::mt19937_64 rng(13);
  const Matrix x = random_matrix(9, 12, rng);
  const std::vector<double> y(9, 0.25);
  const LinearModel lm = fit_linear(x, y);
  double norm = 0.0;
  for (double v : lm.weights) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-6);
  EXPECT_DOUBLE_EQ(lm.bias, 0.25);
  for (double p : predict_all(lm, x)) EXPECT_NEAR(p, 0.25, 1e-12);
}

TEST(FitLinear, DuplicatedRowsGiveSameModel) {
  std::mt19937_64 rng(14);
  const Matrix x = random_matrix(6, 12, rng);
  std::vector<double> y{0.1, -0.2, 0.05, 0.3, 0.0, 0.12};
  Matrix x2(12, 12);
  std::vector<double> y2;
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t c = 0; c < 12; ++c) x2(r, c) = x(r % 6, c);
    y2.push_back(y[r % 6]);
  }
  const LinearModel a = fit_linear(x, y, 0.0), b = fit_linear(x2, y2, 0.0);
  std::mt19937_64 q(15);
  const Matrix probe = random_matrix(5, 12, q);
  const auto pa = predict_all(a, probe), pb = predict_all(b, probe);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(pa[r], pb[r], 1e-8);
}

TEST(FitLinear, AffineColumnRescaleInvariance) {
  std::mt19937_64 rng(16);
  Matrix x = random_matrix(15, 12, rng);
  std::vector<double> y;
  std::normal_distribution<double> nd;
  for (std::size_t r = 0; r < 15; ++r) y.push_back(nd(rng));
  const auto before = predict_all(fit_linear(x, y), x);
  for (std::size_t r = 0; r < 15; ++r) {
    x(r, 3) = 250.0 * x(r, 3) - 7.0;
    x(r, 8) = -0.01 * x(r, 8) + 3.0;
  }
  const auto after = predict_all(fit_linear(x, y), x);
  for (std::size_t r = 0; r < 15; ++r) EXPECT_NEAR(before[r], after[r], 1e-8);
}

TEST(FitLinear, TooFewRowsIsError) {
  Matrix x(1, 12);
  EXPECT_THROW(fit_linear(x, std::vector<double>{1.0}), Error);
}

TEST(FitForest, ConstantTarget) {
  std::mt19937_64 rng(17);
  const Matrix x = random_matrix(10, 12, rng);
  const ForestModel fm = fit_forest(x, std::vector<double>(10, -0.3), {.n_trees = 10});
  std::mt19937_64 q(18);
  for (double p : predict_all(fm, random_matrix(20, 12, q))) EXPECT_EQ(p, -0.3);
}

TEST(FitForest, StepFunctionSingleTree) {
  // Points x = -3..3 without 0; the only zero-error split (with 2 per leaf) is at 0.
  Matrix x(6, 1);
  const double xs[] = {-3, -2, -1, 1, 2, 3};
  std::vector<double> y;
  for (std::size_t i = 0; i < 6; ++i) {
    x(i, 0) = xs[i];
    y.push_back(xs[i] > 0 ? 1.0 : 0.0);
  }
  const ForestModel fm = fit_forest(x, y, {.n_trees = 1, .min_leaf = 2, .feature_frac = 1.0, .bootstrap = false});
  ASSERT_EQ(fm.trees[0].nodes.size(), 3u);
  EXPECT_EQ(fm.trees[0].nodes[0].threshold, 0.0);
  EXPECT_EQ(predict_all(fm, x), y);
  EXPECT_EQ(fm.importances, (std::vector<double>{1.0}));
}

TEST(FitForest, PredictionsStayInTargetRange) {
  std::mt19937_64 rng(19);
  const Matrix x = random_matrix(11, 12, rng);
  std::vector<double> y;
  std::uniform_real_distribution<double> u(-0.2, 0.6);
  for (int i = 0; i < 11; ++i) y.push_back(u(rng));
  const ForestModel fm = fit_forest(x, y, {.seed = 4});
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  std::mt19937_64 q(20);
  Matrix probe = random_matrix(200, 12, q);
  for (double& v : probe.data) v *= 50.0;  // far outside the training range
  for (double p : predict_all(fm, probe)) {
    EXPECT_GE(p, *lo);
    EXPECT_LE(p, *hi);
  }
  for (const Tree& t : fm.trees)
    for (const TreeNode& n : t.nodes) {
      EXPECT_GE(n.value, *lo);
      EXPECT_LE(n.value, *hi);
    }
  double total = 0.0;
  for (double v : fm.importances) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(FitForest, MonotoneFeatureTransformKeepsStructure) {
  std::mt19937_64 rng(22);
  Matrix x = random_matrix(12, 4, rng);
  std::vector<double> y;
  for (std::size_t r = 0; r < 12; ++r) y.push_back(std::sin(3.0 * x(r, 0)) + x(r, 2));
  const ForestParams p{.n_trees = 1, .min_leaf = 2, .feature_frac = 0.5, .bootstrap = false, .seed = 9};
  const ForestModel a = fit_forest(x, y, p);
  Matrix t = x;
  for (std::size_t r = 0; r < 12; ++r) {
    t(r, 0) = std::exp(x(r, 0));
    t(r, 2) = std::pow(x(r, 2), 3.0) - 5.0;
  }
  const ForestModel b = fit_forest(t, y, p);
  ASSERT_EQ(a.trees[0].nodes.size(), b.trees[0].nodes.size());
  for (std::size_t i = 0; i < a.trees[0].nodes.size(); ++i) EXPECT_EQ(a.trees[0].nodes[i].feature, b.trees[0].nodes[i].feature);
  EXPECT_EQ(predict_all(a, x), predict_all(b, t));
}

TEST(FitForest, SeededFitsAreIdentical) {
  std::mt19937_64 rng(23);
  const Matrix x = random_matrix(12, 12, rng);
  std::vector<double> y(x.data.begin(), x.data.begin() + 12);
  const ForestModel a = fit_forest(x, y, {.seed = 5}), b = fit_forest(x, y, {.seed = 5});
  EXPECT_EQ(predict_all(a, x), predict_all(b, x));
  EXPECT_EQ(a.importances, b.importances);
}

TEST(SelectLayer, Examples) {
  EXPECT_EQ(select_layer(std::vector<double>{0.3, 0.1, 0.2}, std::vector<std::size_t>{2, 5, 7}), 5u);
  EXPECT_EQ(select_layer(std::vector<double>{0.2, 0.2, 0.2}, std::vector<std::size_t>{3, 4, 9}), 3u);
  EXPECT_EQ(select_layer(std::vector<double>{0.9}, std::vector<std::size_t>{6}), 6u);
  EXPECT_THROW(select_layer(std::vector<double>{}, std::vector<std::size_t>{}), Error);
}

TEST(SelectLayer, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(7);
    for (double& v : p) v = std::round(u(rng) * 4.0) / 4.0;  // coarse, so ties occur
    const std::vector<std::size_t> layers{0, 2, 3, 5, 8, 10, 11};
    std::vector<double> q;
    for (double v : p) q.push_back(std::exp(3.0 * v) + 1.0);
    // Brute force: first index attaining the minimum.
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (p[i] < p[best]) best = i;
    EXPECT_EQ(select_layer(p, layers), layers[best]);
    EXPECT_EQ(select_layer(q, layers), layers[best]);
  }
}

TEST(Importance, LinearRescaledByMaxMagnitude) {
  std::vector<double> raw(12, 0.0);
  raw[0] = 2.0;
  raw[1] = -4.0;
  const Importance imp = rescale_importance(raw);
  EXPECT_EQ(imp.normalized[0], 0.5);
  EXPECT_EQ(imp.normalized[1], -1.0);
  for (std::size_t i = 2; i < 12; ++i) EXPECT_EQ(imp.normalized[i], 0.0);
  EXPECT_EQ(rescale_importance(imp.normalized).normalized, imp.normalized);
  const Importance zero = rescale_importance(std::vector<double>(12, 0.0));
  EXPECT_TRUE(zero.degenerate);
  EXPECT_EQ(zero.normalized, std::vector<double>(12, 0.0));
}

TEST(Importance, ExtractFromModels) {
  LinearModel lm;
  lm.weights = {1.0, -3.0, 0.5};
  const Importance li = extract_importance(lm);
  EXPECT_EQ(li.raw, lm.weights);
  EXPECT_DOUBLE_EQ(li.normalized[1], -1.0);
  EXPECT_DOUBLE_EQ(li.normalized[0], 1.0 / 3.0);

  // Only column 1 varies, so it is the only splitting feature.
  Matrix x(8, 3);
  std::vector<double> y;
  for (std::size_t r = 0; r < 8; ++r) {
    x(r, 0) = 1.0;
    x(r, 1) = static_cast<double>(r);
    x(r, 2) = -2.0;
    y.push_back(r < 4 ? 0.0 : 1.0);
  }
  const Importance fi = extract_importance(fit_forest(x, y, {.n_trees = 5, .seed = 1}));
  EXPECT_EQ(fi.normalized, (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(Importance, DumpsAreJson) {
  std::mt19937_64 rng(25);
  const Matrix x = random_matrix(6, 3, rng);
  const std::vector<double> y{1, 2, 3, 4, 5, 6};
  std::ostringstream a, b;
  dump_model(a, fit_linear(x, y));
  dump_model(b, fit_forest(x, y, {.n_trees = 2}));
  EXPECT_EQ(a.str().front(), '{');
  EXPECT_NE(b.str().find("\"threshold\""), std::string::npos);
}
