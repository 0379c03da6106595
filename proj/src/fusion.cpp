#include "prunefuse/fusion.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "prunefuse/error.hpp"

namespace prunefuse {

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t r, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (logits[r * c + j] > logits[r * c + best]) best = j;
  return best;
}

}  // namespace

ImpactVector measure_impacts(const Model& model, std::span<const TokenBatch> eval) {
  const std::vector<std::size_t> live = model.live_layers();
  require(!live.empty(), ErrorKind::kState, "measure_impacts: no live layers");
  std::size_t total = 0;
  for (const TokenBatch& b : eval) total += b.batch_size;
  require(total > 0, ErrorKind::kInvalidArgument, "measure_impacts: empty evaluation set");

  const std::size_t C = model.config().n_classes;
  std::size_t base_correct = 0;
  std::vector<std::size_t> correct(live.size(), 0);
  for (const TokenBatch& b : eval) {
    // Ablating layer l equals resuming the forward pass at l + 1 from the
    // hidden state that entered l.
    const auto inputs = layer_inputs(model, b);
    const Tensor base = forward(model, b).logits;
    for (std::size_t r = 0; r < b.batch_size; ++r) base_correct += static_cast<int>(argmax_row(base, r, C)) == b.labels[r];
    for (std::size_t i = 0; i < live.size(); ++i) {
      const Tensor logits = logits_from(model, b, inputs[i].first + 1, inputs[i].second);
      for (std::size_t r = 0; r < b.batch_size; ++r) correct[i] += static_cast<int>(argmax_row(logits, r, C)) == b.labels[r];
    }
  }
  ImpactVector out;
  out.layers = live;
  out.base_accuracy = static_cast<double>(base_correct) / static_cast<double>(total);
  for (std::size_t c : correct) out.delta.push_back(out.base_accuracy - static_cast<double>(c) / static_cast<double>(total));
  return out;
}

// ---------------------------------------------------------------------------
// Linear fusion

double LinearModel::predict(std::span<const double> x) const {
  require(x.size() == weights.size(), ErrorKind::kShape,
          "LinearModel::predict: " + std::to_string(x.size()) + " features, model has " + std::to_string(weights.size()));
  double s = bias;
  for (std::size_t j = 0; j < x.size(); ++j) s += weights[j] * (x[j] - mean[j]) / scale[j];
  return s;
}

LinearModel fit_linear(const Matrix& x, std::span<const double> y, double lambda) {
  require(x.rows == y.size(), ErrorKind::kShape,
          "fit_linear: " + std::to_string(x.rows) + " rows but " + std::to_string(y.size()) + " targets");
  require(x.rows >= 2, ErrorKind::kInvalidArgument, "fit_linear: needs at least 2 rows");
  require(lambda >= 0.0, ErrorKind::kInvalidArgument, "fit_linear: negative ridge penalty");
  const std::size_t n = x.rows, m = x.cols;
  LinearModel out;
  out.lambda = lambda;
  out.mean.assign(m, 0.0);
  out.scale.assign(m, 1.0);
  for (std::size_t j = 0; j < m; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(n);
    out.mean[j] = mu;
    if (var > 0.0) out.scale[j] = std::sqrt(var);
  }
  const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);

  Eigen::MatrixXd z(n, m);
  Eigen::VectorXd yc(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) z(i, j) = (x(i, j) - out.mean[j]) / out.scale[j];
    yc(i) = y[i] - ybar;
  }
  Eigen::MatrixXd gram = z.transpose() * z;
  gram.diagonal().array() += lambda;
  const Eigen::VectorXd rhs = z.transpose() * yc;
  // Centered columns make the intercept exactly the target mean.
  Eigen::VectorXd w;
  if (lambda > 0.0) {
    w = gram.ldlt().solve(rhs);
  } else {
    w = gram.completeOrthogonalDecomposition().solve(rhs);
  }
  out.weights.assign(w.data(), w.data() + m);
  out.bias = ybar;
  for (double v : out.weights) require(std::isfinite(v), ErrorKind::kNonFinite, "fit_linear: non-finite coefficient");
  return out;
}

// ---------------------------------------------------------------------------
// Forest fusion

double Tree::predict(std::span<const double> x) const {
  require(!nodes.empty(), ErrorKind::kState, "Tree::predict: empty tree");
  int i = 0;
  while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

double ForestModel::predict(std::span<const double> x) const {
  require(!trees.empty(), ErrorKind::kState, "ForestModel::predict: no trees");
  double s = 0.0;
  for (const Tree& t : trees) s += t.predict(x);
  return std::clamp(s / static_cast<double>(trees.size()), y_min, y_max);
}

namespace {

struct TreeBuilder {
  const Matrix& x;
  std::span<const double> y;
  const ForestParams& params;
  std::size_t features_per_split;
  std::mt19937_64& rng;
  std::vector<double>& gain_by_feature;
  Tree tree;

  int grow(std::vector<std::size_t> idx) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double sum = 0.0, sq = 0.0;
    for (std::size_t i : idx) {
      sum += y[i];
      sq += y[i] * y[i];
    }
    const double n = static_cast<double>(idx.size());
    const auto [lo, hi] = std::minmax_element(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
    // Rounding in sum / n must not leave the leaf's target range.
    tree.nodes[id].value = std::clamp(sum / n, y[*lo], y[*hi]);
    if (idx.size() < 2 * params.min_leaf || y[*lo] == y[*hi]) return id;
    const double parent_sse = sq - sum * sum / n;

    std::vector<std::size_t> feats(x.cols);
    std::iota(feats.begin(), feats.end(), std::size_t{0});
    for (std::size_t k = 0; k < features_per_split; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, feats.size() - 1);
      std::swap(feats[k], feats[pick(rng)]);
    }

    int best_feature = -1;
    double best_gain = 0.0, best_threshold = 0.0;
    std::vector<std::size_t> order = idx;
    for (std::size_t k = 0; k < features_per_split; ++k) {
      const std::size_t f = feats[k];
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x(a, f) < x(b, f); });
      double ls = 0.0, lq = 0.0;
      for (std::size_t p = 0; p + 1 < order.size(); ++p) {
        ls += y[order[p]];
        lq += y[order[p]] * y[order[p]];
        const std::size_t nl = p + 1, nr = order.size() - nl;
        if (nl < params.min_leaf || nr < params.min_leaf) continue;
        const double xa = x(order[p], f), xb = x(order[p + 1], f);
        if (!(xa < xb)) continue;
        const double rs = sum - ls, rq = sq - lq;
        const double sse = (lq - ls * ls / static_cast<double>(nl)) + (rq - rs * rs / static_cast<double>(nr));
        const double gain = parent_sse - sse;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (xa + xb);
          if (!(best_threshold < xb)) best_threshold = xa;
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) (x(i, best_feature) <= best_threshold ? left : right).push_back(i);
    gain_by_feature[best_feature] += best_gain;
    tree.nodes[id].feature = best_feature;
    tree.nodes[id].threshold = best_threshold;
    const int l = grow(std::move(left));
    const int r = grow(std::move(right));
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

}  // namespace

ForestModel fit_forest(const Matrix& x, std::span<const double> y, const ForestParams& params) {
  require(x.rows == y.size(), ErrorKind::kShape,
          "fit_forest: " + std::to_string(x.rows) + " rows but " + std::to_string(y.size()) + " targets");
  require(x.rows >= 2, ErrorKind::kInvalidArgument, "fit_forest: needs at least 2 rows");
  require(x.cols >= 1, ErrorKind::kInvalidArgument, "fit_forest: needs at least one feature");
  require(params.n_trees >= 1 && params.min_leaf >= 1, ErrorKind::kInvalidArgument, "fit_forest: n_trees and min_leaf must be >= 1");
  require(params.feature_frac > 0.0 && params.feature_frac <= 1.0, ErrorKind::kInvalidArgument,
          "fit_forest: feature_frac must be in (0, 1]");
  // The epsilon keeps 12 * (1/3) from flooring to 3.
  const std::size_t per_split = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::floor(static_cast<double>(x.cols) * params.feature_frac + 1e-9)), 1, x.cols);

  ForestModel forest;
  forest.y_min = *std::min_element(y.begin(), y.end());
  forest.y_max = *std::max_element(y.begin(), y.end());
  std::vector<double> gains(x.cols, 0.0);
  for (std::size_t t = 0; t < params.n_trees; ++t) {
    std::mt19937_64 rng(params.seed + t);
    std::vector<std::size_t> idx(x.rows);
    if (params.bootstrap) {
      std::uniform_int_distribution<std::size_t> pick(0, x.rows - 1);
      for (std::size_t& i : idx) i = pick(rng);
      std::sort(idx.begin(), idx.end());
    } else {
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    TreeBuilder b{x, y, params, per_split, rng, gains, {}};
    b.grow(std::move(idx));
    forest.trees.push_back(std::move(b.tree));
  }
  const double total = std::accumulate(gains.begin(), gains.end(), 0.0);
  forest.importances.assign(x.cols, 0.0);
  if (total > 0.0)
    for (std::size_t j = 0; j < x.cols; ++j) forest.importances[j] = gains[j] / total;
  return forest;
}

std::size_t select_layer(std::span<const double> predicted, std::span<const std::size_t> layers) {
  require(!predicted.empty(), ErrorKind::kInvalidArgument, "select_layer: no candidate layers");
  require(predicted.size() == layers.size(), ErrorKind::kShape,
          "select_layer: " + std::to_string(predicted.size()) + " predictions for " + std::to_string(layers.size()) + " layers");
  std::size_t best = 0;
  for (std::size_t i = 1; i < predicted.size(); ++i)
    if (predicted[i] < predicted[best] || (predicted[i] == predicted[best] && layers[i] < layers[best])) best = i;
  return layers[best];
}

Importance rescale_importance(std::span<const double> raw) {
  Importance out;
  out.raw.assign(raw.begin(), raw.end());
  double mx = 0.0;
  for (double v : raw) mx = std::max(mx, std::fabs(v));
  out.normalized.assign(raw.size(), 0.0);
  if (mx == 0.0) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) out.normalized[i] = raw[i] / mx;
  return out;
}

Importance extract_importance(const LinearModel& m) { return rescale_importance(m.weights); }
Importance extract_importance(const ForestModel& m) { return rescale_importance(m.importances); }

void dump_model(std::ostream& out, const LinearModel& m) {
  nlohmann::json j;
  j["kind"] = "linear";
  j["weights"] = m.weights;
  j["bias"] = m.bias;
  j["mean"] = m.mean;
  j["scale"] = m.scale;
  j["lambda"] = m.lambda;
  out << j.dump(2) << '\n';
}

void dump_model(std::ostream& out, const ForestModel& m) {
  nlohmann::json j;
  j["kind"] = "forest";
  j["importances"] = m.importances;
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : m.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : t.nodes)
      nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}, {"value", n.value}});
    trees.push_back(std::move(nodes));
  }
  j["trees"] = std::move(trees);
  out << j.dump(2) << '\n';
}

}  // namespace prunefuse
