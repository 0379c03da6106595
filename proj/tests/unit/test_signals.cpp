#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

#include "prunefuse/error.hpp"
#include "prunefuse/signals.hpp"

using namespace prunefuse;

namespace {

// Joint-histogram MI over discrete summary values, computed by enumeration.
double brute_mi(const std::vector<double>& a, const std::vector<int>& y) {
  std::map<std::pair<double, int>, double> joint;
  std::map<double, double> pa;
  std::map<int, double> py;
  const double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], y[i]}] += 1.0 / n;
    pa[a[i]] += 1.0 / n;
    py[y[i]] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (pa[k.first] * py[k.second]));
  return mi;
}

double variance(const std::vector<double>& x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  double v = 0.0;
  for (double t : x) v += (t - m) * (t - m);
  return v / x.size();
}

Tensor attention_tensor(std::size_t B, std::size_t H, std::size_t T, const std::vector<double>& v) {
  return Tensor({B, H, T, T}, v);
}

}  // namespace

TEST(ActivationSignals, Examples) {
  const std::vector<double> zeros(6, 0.0);
  auto z = activation_signals(zeros);
  EXPECT_EQ(z.inhibition, 0.0);
  EXPECT_EQ(z.intensity, 0.0);
  EXPECT_EQ(z.energy, 0.0);

  const std::vector<double> sym{1, -1, 1, -1};
  auto s = activation_signals(sym);
  EXPECT_EQ(s.inhibition, 0.0);
  EXPECT_EQ(s.intensity, 1.0);
  EXPECT_EQ(s.energy, 1.0);

  const std::vector<double> a{3, -4};
  auto r = activation_signals(a);
  EXPECT_DOUBLE_EQ(r.inhibition, (3.0 - 4.0) / 2);
  EXPECT_DOUBLE_EQ(r.intensity, (3.0 + 4.0) / 2);
  EXPECT_DOUBLE_EQ(r.energy, (9.0 + 16.0) / 2);
}

TEST(ActivationSignals, EmptyOrNonFiniteIsError) {
  EXPECT_THROW(activation_signals(std::vector<double>{}), Error);
  EXPECT_THROW(activation_signals(std::vector<double>{1.0, NAN}), Error);
}

TEST(ActivationSignals, PropertySuiteOfRandomMatrices) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 24);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> shift(-3.0, 3.0), scale(0.01, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = dim(rng), d = dim(rng);
    const double mu = shift(rng), sd = scale(rng);
    std::vector<double> a(n * d);
    for (double& x : a) x = mu + sd * nd(rng);
    const auto s = activation_signals(a);
    ASSERT_GE(s.intensity, 0.0);
    ASSERT_GE(s.energy, 0.0);
    ASSERT_LE(std::abs(s.inhibition), s.intensity * (1 + 1e-12)) << trial;
    ASSERT_LE(s.intensity * s.intensity, s.energy * (1 + 1e-12)) << trial;
  }
}

TEST(SampleSummaries, RowBlockMeans) {
  const Tensor a({5, 2}, {1, 3, 5, 7, 0, 0, 2, 2, 4, 4});
  const std::vector<std::size_t> rows{2, 3};
  const auto s = sample_summaries(a, rows);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0], 4.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0);
}

TEST(TaskMi, ShuffledLabelsNearZero) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  int below = 0;
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> s(512);
    std::vector<int> y(512);
    for (std::size_t i = 0; i < 512; ++i) {
      y[i] = static_cast<int>(i % 4);
      s[i] = nd(rng) + y[i];
    }
    std::shuffle(y.begin(), y.end(), rng);
    const auto mi = task_relevance_mi(s, y);
    EXPECT_GE(mi.value, 0.0);
    below += mi.value < 0.05;
  }
  EXPECT_GE(below, 38);  // 95% of trials
}

TEST(TaskMi, PerfectBinaryDependence) {
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 64; ++i) {
    y.push_back(i % 2);
    s.push_back(i % 2);
  }
  EXPECT_NEAR(task_relevance_mi(s, y).value, std::log(2.0), 1e-12);
}

TEST(TaskMi, SmallJointTableMatchesEnumeration) {
  // A 4-sample joint table repeated to meet the 16-sample minimum; the
  // empirical distribution, and so the MI, is unchanged by repetition.
  const std::vector<double> a4{0, 0, 1, 1};
  const std::vector<int> y4{0, 1, 1, 1};
  std::vector<double> a;
  std::vector<int> y;
  for (int r = 0; r < 4; ++r) {
    a.insert(a.end(), a4.begin(), a4.end());
    y.insert(y.end(), y4.begin(), y4.end());
  }
  const double oracle = brute_mi(a4, y4);
  EXPECT_NEAR(oracle, 0.75 * std::log(4.0 / 3.0) + 0.25 * std::log(4.0) - 0.5 * std::log(2.0), 1e-15);
  EXPECT_NEAR(task_relevance_mi(a, y).value, oracle, 1e-12);
}

TEST(TaskMi, ConstantSummaryIsDegenerate) {
  std::vector<double> s(32, 1.5);
  std::vector<int> y(32);
  for (int i = 0; i < 32; ++i) y[i] = i % 2;
  const auto mi = task_relevance_mi(s, y);
  EXPECT_EQ(mi.value, 0.0);
  EXPECT_TRUE(mi.degenerate);
}

TEST(TaskMi, PreconditionsEnforced) {
  std::vector<double> s(8, 0.0);
  std::vector<int> y{0, 1, 0, 1, 0, 1, 0, 1};
  EXPECT_THROW(task_relevance_mi(s, y), Error);
  std::vector<double> s16(16);
  std::iota(s16.begin(), s16.end(), 0.0);
  EXPECT_THROW(task_relevance_mi(s16, std::vector<int>(16, 2)), Error);
}

TEST(FlowMi, Examples) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  std::vector<double> s(512), t(512);
  for (auto& x : s) x = nd(rng);
  for (auto& x : t) x = nd(rng);
  EXPECT_NEAR(flow_relevance_mi(s, s), variance(s), 1e-12);
  const double indep = flow_relevance_mi(s, t);
  EXPECT_GE(indep, 0.0);
  EXPECT_LT(indep, 0.05 * variance(s));
  const std::vector<double> c(512, 2.0);
  EXPECT_EQ(flow_relevance_mi(c, t), 0.0);
  EXPECT_THROW(flow_relevance_mi(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
}

TEST(FlowMi, AffineSuccessorIsPerfectPredictor) {
  const std::vector<double> s{1, 4, 2, 8, 5, 7};
  std::vector<double> t;
  for (double x : s) t.push_back(-3.0 * x + 1.0);
  EXPECT_NEAR(flow_relevance_mi(s, t), variance(s), 1e-12);
}

TEST(GradientSignals, Examples) {
  const std::vector<Tensor> pm{Tensor({2, 2}, {2, -2, 2, -2}), Tensor({3}, {-2, 2, 2})};
  auto g = gradient_signals(std::span<const std::vector<Tensor>>(&pm, 1));
  EXPECT_DOUBLE_EQ(g.magnitude, 2.0);
  EXPECT_DOUBLE_EQ(g.fisher, 4.0);

  const std::vector<Tensor> zero{Tensor({4}, 0.0)};
  g = gradient_signals(std::span<const std::vector<Tensor>>(&zero, 1));
  EXPECT_EQ(g.magnitude, 0.0);
  EXPECT_EQ(g.fisher, 0.0);

  const std::vector<std::vector<Tensor>> two{{Tensor({1}, {1.0})}, {Tensor({1}, {3.0})}};
  g = gradient_signals(two);
  EXPECT_DOUBLE_EQ(g.magnitude, (1.0 + 3.0) / 2);
  EXPECT_DOUBLE_EQ(g.fisher, (1.0 + 9.0) / 2);

  EXPECT_THROW(gradient_signals(std::span<const std::vector<Tensor>>{}), Error);
}

TEST(WeightSignals, Examples) {
  auto w = weight_signals(std::vector<double>{3, 4, 0, 0});
  EXPECT_DOUBLE_EQ(w.norm, 5.0);
  EXPECT_DOUBLE_EQ(w.sparsity, 0.5);
  EXPECT_FALSE(w.degenerate);

  w = weight_signals(std::vector<double>{0.5, -0.5, 0.5, -0.5});
  EXPECT_NEAR(w.entropy, std::log(4.0), 1e-10);

  w = weight_signals(std::vector<double>{0, 0, 7, 0});
  EXPECT_NEAR(w.entropy, 0.0, 1e-10);
  // only the epsilon term is left
  EXPECT_NEAR(w.entropy, -1e-12, 1e-15);

  w = weight_signals(std::vector<double>{0, 0, 0});
  EXPECT_EQ(w.norm, 0.0);
  EXPECT_EQ(w.sparsity, 1.0);
  EXPECT_EQ(w.entropy, 0.0);
  EXPECT_TRUE(w.degenerate);
}

TEST(WeightSignals, MatricesAreConcatenated) {
  const Tensor a({1, 2}, {3, 0}), b({2, 1}, {4, 0});
  const std::vector<const Tensor*> mats{&a, &b};
  const auto w = weight_signals(std::span<const Tensor* const>(mats));
  EXPECT_DOUBLE_EQ(w.norm, 5.0);
  EXPECT_DOUBLE_EQ(w.sparsity, 0.5);
}

TEST(WeightSignals, SparsityMonotoneUnderZeroing) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> w(50);
  for (auto& x : w) x = nd(rng);
  std::vector<std::size_t> order(50);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  double prev = weight_signals(w).sparsity;
  for (std::size_t i : order) {
    w[i] = 0.0;
    const double cur = weight_signals(w).sparsity;
    EXPECT_GE(cur, prev);
    prev = cur;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(AttentionSignals, UniformTwoTokens) {
  const Tensor a = attention_tensor(1, 1, 2, {0.5, 0.5, 0.5, 0.5});
  const auto s = attention_signals(a, std::vector<int>{1, 1});
  EXPECT_NEAR(s.entropy, 2.0 * std::log(2.0), 1e-10);
  EXPECT_EQ(s.weight, 0.5);
}

TEST(AttentionSignals, OneHotRowsHaveZeroEntropy) {
  const Tensor a = attention_tensor(1, 2, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0});
  const auto s = attention_signals(a, std::vector<int>{1, 1, 1});
  EXPECT_NEAR(s.entropy, 0.0, 1e-10);
}

TEST(AttentionSignals, WeightIsOneOverNWithoutPadding) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (std::size_t T : {2u, 5u, 7u, 32u}) {
    const std::size_t B = 3, H = 4;
    std::vector<double> v(B * H * T * T);
    for (std::size_t r = 0; r < B * H * T; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < T; ++j) sum += v[r * T + j] = u(rng);
      for (std::size_t j = 0; j < T; ++j) v[r * T + j] /= sum;
    }
    const auto s = attention_signals(attention_tensor(B, H, T, v), std::vector<int>(B * T, 1));
    EXPECT_NEAR(s.weight, 1.0 / T, 1e-12) << T;
  }
}

TEST(AttentionSignals, PaddingUsesUnmaskedCounts) {
  // Sample 0: 2 valid tokens of 3; sample 1: all 3 valid. Uniform over valid keys.
  std::vector<double> v(2 * 1 * 3 * 3, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) v[i * 3 + j] = 0.5;
  for (std::size_t i = 0; i < 9; ++i) v[9 + i] = 1.0 / 3.0;
  const auto s = attention_signals(attention_tensor(2, 1, 3, v), std::vector<int>{1, 1, 0, 1, 1, 1});
  // 1/2 over 4 valid pairs and 1/3 over 9 pairs, then averaged over samples.
  const double e0 = -2.0 * 2.0 * 0.5 * std::log(0.5), e1 = -3.0 * 3.0 * (1.0 / 3.0) * std::log(1.0 / 3.0);
  EXPECT_NEAR(s.entropy, (e0 + e1) / 2.0, 1e-9);
  EXPECT_NEAR(s.weight, (0.5 + 1.0 / 3.0) / 2.0, 1e-12);
}

TEST(AttentionSignals, NonStochasticRowIsError) {
  const Tensor a = attention_tensor(1, 1, 2, {0.5, 0.5, 0.5, 0.6});
  EXPECT_THROW(attention_signals(a, std::vector<int>{1, 1}), Error);
}

namespace {

std::vector<TokenBatch> probe_batches(int copies) {
  DatasetSpec spec;
  spec.n_train = 64;
  spec.n_val = 32;
  spec.n_test = 32;
  const Corpus c = generate_corpus(spec);
  std::vector<TokenBatch> out;
  const TokenBatch b = tokenize_batch(c.val);
  for (int i = 0; i < copies; ++i) out.push_back(b);
  return out;
}

}  // namespace

TEST(SignalMatrix, ShapeAndPrunedRows) {
  ModelConfig mc;
  mc.seed = 5;
  Model m(mc);
  const auto probes = probe_batches(1);
  const SignalMatrix sm = build_signal_matrix(m, probes);
  ASSERT_EQ(sm.size(), 12u);
  for (std::size_t l = 0; l < 12; ++l) EXPECT_EQ(sm.layers[l], l);
  for (const auto& r : sm.rows)
    for (double x : r.values) EXPECT_TRUE(std::isfinite(x));

  m.prune(3);
  m.prune(11);
  const SignalMatrix pruned = build_signal_matrix(m, probes);
  ASSERT_EQ(pruned.size(), 10u);
  EXPECT_EQ(std::count(pruned.layers.begin(), pruned.layers.end(), 3u), 0);
  EXPECT_EQ(std::count(pruned.layers.begin(), pruned.layers.end(), 11u), 0);
}

TEST(SignalMatrix, DuplicateBatchesAndDeterminism) {
  ModelConfig mc;
  mc.seed = 6;
  mc.n_layers = 4;
  Model m(mc);
  const SignalMatrix one = build_signal_matrix(m, probe_batches(1));
  const SignalMatrix two = build_signal_matrix(m, probe_batches(2));
  const SignalMatrix again = build_signal_matrix(m, probe_batches(1));
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one.rows[i].values, again.rows[i].values);
    for (std::size_t s = 0; s < kNumSignals; ++s) EXPECT_NEAR(one.rows[i].values[s], two.rows[i].values[s], 1e-15 * (1 + std::abs(one.rows[i].values[s])));
  }
}

TEST(SignalMatrix, RowsMatchCapturedActivations) {
  ModelConfig mc;
  mc.seed = 7;
  mc.n_layers = 3;
  Model m(mc);
  const auto probes = probe_batches(1);
  const SignalMatrix sm = build_signal_matrix(m, probes);
  const ForwardResult fr = forward(m, probes[0], true);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor& a = fr.caches->layers[i].activations;
    double mean = 0.0, amean = 0.0, sq = 0.0;
    for (double x : a.data) {
      mean += x;
      amean += std::abs(x);
      sq += x * x;
    }
    const double n = static_cast<double>(a.size());
    EXPECT_NEAR(sm.rows[i][Signal::kInhibition], mean / n, 1e-12);
    EXPECT_NEAR(sm.rows[i][Signal::kIntensity], amean / n, 1e-12);
    EXPECT_NEAR(sm.rows[i][Signal::kEnergy], sq / n, 1e-12);
    std::vector<double> flat;
    for (const Parameter* p : std::as_const(m).layer(i).weight_matrices()) flat.insert(flat.end(), p->value.data.begin(), p->value.data.end());
    double ss = 0.0;
    for (double w : flat) ss += w * w;
    EXPECT_NEAR(sm.rows[i][Signal::kWeightNorm], std::sqrt(ss), 1e-12);
  }
}

TEST(SignalMatrix, CsvHeaderAndRows) {
  SignalMatrix sm;
  sm.layers = {0, 4};
  sm.rows.resize(2);
  sm.rows[1][Signal::kEnergy] = 2.5;
  std::ostringstream o;
  write_signal_csv(o, sm);
  std::istringstream in(o.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "layer,inhibition,intensity,energy,task_mi,flow_mi,grad_magnitude,grad_fisher,weight_norm,weight_sparsity,"
                  "weight_entropy,attention_weight,attention_entropy");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 2), "0,");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 8), "4,0,0,2.");
}

TEST(SignalNames, RoundTrip) {
  for (std::size_t i = 0; i < kNumSignals; ++i) {
    const auto s = signal_from_name(signal_names()[i]);
    ASSERT_TRUE(s.has_value());
    EXPECT_EQ(static_cast<std::size_t>(*s), i);
  }
  EXPECT_FALSE(signal_from_name("entropy").has_value());
}
