#pragma once
// Impact measurement (accuracy drop from one-shot layer ablation), the two
// fusion regressors, argmin layer selection and importance extraction.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "prunefuse/data.hpp"
#include "prunefuse/model.hpp"

namespace prunefuse {

struct ImpactVector {
  double base_accuracy = 0.0;
  std::vector<std::size_t> layers;  // live layers, ascending
  std::vector<double> delta;        // base accuracy minus accuracy with the layer ablated
};

// No fine-tuning; the model is left untouched.
ImpactVector measure_impacts(const Model& model, std::span<const TokenBatch> eval);

// Row-major design matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

inline constexpr double kDefaultRidge = 1e-6;

// Ridge regression on z-scored columns with an unpenalized intercept.
struct LinearModel {
  std::vector<double> weights;  // standardized space
  double bias = 0.0;            // standardized space (equals mean of y)
  std::vector<double> mean;
  std::vector<double> scale;    // 1 for constant columns
  double lambda = kDefaultRidge;

  double predict(std::span<const double> x) const;
};

LinearModel fit_linear(const Matrix& x, std::span<const double> y, double lambda = kDefaultRidge);

struct ForestParams {
  std::size_t n_trees = 100;
  std::size_t min_leaf = 2;
  double feature_frac = 1.0 / 3.0;
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

struct TreeNode {
  int feature = -1;  // -1 for a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf mean
};

struct Tree {
  std::vector<TreeNode> nodes;
  double predict(std::span<const double> x) const;
};

struct ForestModel {
  std::vector<Tree> trees;
  std::vector<double> importances;  // sums to 1 when any split exists
  double y_min = 0.0, y_max = 0.0;  // training target range
  double predict(std::span<const double> x) const;
};

// Tree t draws its bootstrap and feature subsets from seed + t.
ForestModel fit_forest(const Matrix& x, std::span<const double> y, const ForestParams& params = {});

// Layer with the smallest predicted impact; ties go to the lowest layer index.
std::size_t select_layer(std::span<const double> predicted, std::span<const std::size_t> layers);

struct Importance {
  std::vector<double> raw;
  std::vector<double> normalized;  // divided by max |raw|
  bool degenerate = false;         // every raw value is zero
};

Importance rescale_importance(std::span<const double> raw);
Importance extract_importance(const LinearModel& m);
Importance extract_importance(const ForestModel& m);

// Audit dumps as JSON.
void dump_model(std::ostream& out, const LinearModel& m);
void dump_model(std::ostream& out, const ForestModel& m);

}  // namespace prunefuse
