#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "prunefuse/distill.hpp"
#include "prunefuse/error.hpp"

using namespace prunefuse;

namespace {

// KL(softmax(t / T) || softmax(s / T)) for one row, by the definition.
double kl_row(const std::vector<double>& t, const std::vector<double>& s, double T) {
  auto soft = [T](const std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> p;
    double sum = 0.0;
    for (double v : z) sum += std::exp((v - mx) / T);
    for (double v : z) p.push_back(std::exp((v - mx) / T) / sum);
    return p;
  };
  const auto p = soft(t), q = soft(s);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

std::vector<std::vector<double>> values_of(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const Parameter* p : m.all_parameters()) out.push_back(p->value.to_vector());
  return out;
}

struct Pair {
  Corpus corpus;
  Model teacher;
  Model student;

  Pair() : corpus(corpus_()), teacher(config_()), student(teacher) {
    student.prune(1);
    student.prune(2);
  }
  static Corpus corpus_() {
    DatasetSpec spec;
    spec.n_train = 64;
    spec.n_val = 32;
    spec.n_test = 32;
    return generate_corpus(spec);
  }
  static ModelConfig config_() {
    ModelConfig c;
    c.n_layers = 4;
    c.seed = 12;
    return c;
  }
};

}  // namespace

TEST(KdLoss, IdenticalLogitsGiveZero) {
  const Tensor z({2, 3}, {0.3, -1.2, 2.0, 5.0, 5.0, -4.0});
  EXPECT_EQ(kd_loss(z, z, 2.0), 0.0);
  EXPECT_EQ(kd_loss(z, z, 0.5), 0.0);
}

TEST(KdLoss, HandComputedExample) {
  // softmax(z_t / 2) = [0.75, 0.25] and a uniform student.
  const Tensor zt({1, 2}, {2.0 * std::log(3.0), 0.0});
  const Tensor zs({1, 2}, {0.0, 0.0});
  const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  EXPECT_NEAR(expected, 0.1308, 5e-5);
  EXPECT_NEAR(kd_loss(zt, zs, 2.0), expected, 1e-6);
}

TEST(KdLoss, LargeTemperatureFlattens) {
  const Tensor zt({1, 3}, {4.0, -2.0, 1.0});
  const Tensor zs({1, 3}, {-3.0, 0.5, 2.0});
  EXPECT_LT(kd_loss(zt, zs, 1e6), 1e-9);
}

TEST(KdLoss, MatchesDefinitionAndIsNonNegative) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 1 + trial % 5, C = 2 + trial % 4;
    std::vector<double> t(B * C), s(B * C);
    for (auto& v : t) v = nd(rng);
    for (auto& v : s) v = nd(rng);
    const double T = 0.5 + (trial % 7) * 0.5;
    double oracle = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      oracle += kl_row({t.begin() + b * C, t.begin() + (b + 1) * C}, {s.begin() + b * C, s.begin() + (b + 1) * C}, T);
    oracle /= static_cast<double>(B);
    const double kd = kd_loss(Tensor({B, C}, t), Tensor({B, C}, s), T);
    EXPECT_GE(kd, 0.0);
    EXPECT_NEAR(kd, oracle, 1e-10);
  }
}

TEST(KdLoss, ShapeMismatchIsError) {
  EXPECT_THROW(kd_loss(Tensor({2, 3}), Tensor({3, 2}), 2.0), Error);
}

TEST(CombinedLoss, Examples) {
  EXPECT_EQ(combined_loss(0.4, 0.2, 1.0), 0.4);
  EXPECT_EQ(combined_loss(0.4, 0.2, 0.0), 0.2);
  EXPECT_DOUBLE_EQ(combined_loss(0.4, 0.2, 0.5), 0.3);
  EXPECT_THROW(combined_loss(0.4, 0.2, 1.5), Error);
  EXPECT_THROW(combined_loss(0.4, 0.2, -0.1), Error);
  EXPECT_THROW(combined_loss(NAN, 0.2, 0.5), Error);
  for (double a : {0.0, 0.3, 1.0}) {
    EXPECT_LE(combined_loss(0.1, 0.2, a), combined_loss(0.2, 0.2, a));
    EXPECT_LE(combined_loss(0.1, 0.2, a), combined_loss(0.1, 0.3, a));
  }
}

TEST(CombinedLoss, GraphFormMatchesScalar) {
  for (double a : {0.0, 0.25, 1.0}) {
    Graph g;
    const Var ce = g.constant(Tensor::scalar(0.7)), kd = g.constant(Tensor::scalar(0.1));
    const Var l = combined_loss(g, ce, kd, a);
    g.forward();
    EXPECT_DOUBLE_EQ(g.value(l)[0], combined_loss(0.7, 0.1, a));
  }
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  EXPECT_EQ(c.temperature, 2.0);
  EXPECT_EQ(c.alpha, 0.5);
  EXPECT_NO_THROW(c.validate());
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = DistillConfig{};
  c.alpha = 1.01;
  EXPECT_THROW(c.validate(), Error);
}

TEST(DistillTrain, TeacherIsUntouched) {
  Pair s;
  const auto before = values_of(s.teacher);
  DistillConfig cfg;
  cfg.train.epochs = 1;
  distill_train(s.teacher, s.student, s.corpus.train, cfg);
  EXPECT_EQ(values_of(s.teacher), before);
  EXPECT_NE(values_of(s.student), values_of(Pair().student));
}

TEST(DistillTrain, AlphaOneIsPlainFineTune) {
  Pair a, b;
  DistillConfig cfg;
  cfg.alpha = 1.0;
  cfg.train = {.epochs = 2, .batch_size = 16, .lr = 1e-3, .seed = 8};
  const TrainResult rd = distill_train(a.teacher, a.student, a.corpus.train, cfg);
  const TrainResult rf = fine_tune(b.student, b.corpus.train, cfg.train);
  EXPECT_EQ(rd.batch_losses, rf.batch_losses);
  EXPECT_EQ(values_of(a.student), values_of(b.student));
}

TEST(DistillTrain, ExactCopyWithPureKdIsStationary) {
  Pair s;
  Model copy = s.teacher;
  DistillConfig cfg;
  cfg.alpha = 0.0;
  cfg.train = {.epochs = 1, .batch_size = 32, .lr = 0.0, .seed = 3};
  const auto before = values_of(copy);
  const TrainResult r = distill_train(s.teacher, copy, s.corpus.train, cfg);
  EXPECT_EQ(r.batch_losses.front(), 0.0);
  EXPECT_EQ(values_of(copy), before);
}

TEST(DistillTrain, SameSeedSameStudent) {
  Pair a, b;
  DistillConfig cfg;
  cfg.train.epochs = 1;
  cfg.train.seed = 77;
  distill_train(a.teacher, a.student, a.corpus.train, cfg);
  distill_train(b.teacher, b.student, b.corpus.train, cfg);
  EXPECT_EQ(values_of(a.student), values_of(b.student));
}
