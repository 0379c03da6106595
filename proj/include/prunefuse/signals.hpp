#pragma once
// The twelve per-layer pruning signals and the signal matrix built from a
// model's captured activations, attention, weights and gradients.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "prunefuse/data.hpp"
#include "prunefuse/model.hpp"
#include "prunefuse/tensor.hpp"

namespace prunefuse {

inline constexpr std::size_t kNumSignals = 12;

// Canonical column order.
enum class Signal : std::size_t {
  kInhibition,
  kIntensity,
  kEnergy,
  kTaskMi,
  kFlowMi,
  kGradMagnitude,
  kGradFisher,
  kWeightNorm,
  kWeightSparsity,
  kWeightEntropy,
  kAttentionWeight,
  kAttentionEntropy,
};

const std::array<std::string_view, kNumSignals>& signal_names();
std::string_view to_string(Signal s);
std::optional<Signal> signal_from_name(std::string_view name);

struct SignalVector {
  std::array<double, kNumSignals> values{};

  double& operator[](Signal s) { return values[static_cast<std::size_t>(s)]; }
  double operator[](Signal s) const { return values[static_cast<std::size_t>(s)]; }
};

struct SignalMatrix {
  std::vector<std::size_t> layers;  // live layers, ascending
  std::vector<SignalVector> rows;   // rows[i] belongs to layers[i]

  std::size_t size() const { return rows.size(); }
  std::vector<double> column(Signal s) const;
};

struct ActivationSignals {
  double inhibition = 0.0;
  double intensity = 0.0;
  double energy = 0.0;
};

// A is any n x d block (row-major, flattened).
ActivationSignals activation_signals(std::span<const double> a);

// Per-sample mean of each row block of A (rows_per_sample[i] rows each).
std::vector<double> sample_summaries(const Tensor& a, std::span<const std::size_t> rows_per_sample);

struct MiEstimate {
  double value = 0.0;
  bool degenerate = false;  // every summary fell into one bin
};

// Plug-in MI (nats) between quantile-binned summaries and labels.
MiEstimate task_relevance_mi(std::span<const double> summaries, std::span<const int> labels, std::size_t bins = 8);

// Var(s) minus the residual variance of the least-squares regression of s on
// s_next, clamped at 0.
double flow_relevance_mi(std::span<const double> s, std::span<const double> s_next);

struct GradientSignals {
  double magnitude = 0.0;
  double fisher = 0.0;
};

// batches[b] holds the layer's gradient tensors for probe batch b.
GradientSignals gradient_signals(std::span<const std::vector<Tensor>> batches);

struct WeightSignals {
  double norm = 0.0;
  double sparsity = 0.0;
  double entropy = 0.0;
  bool degenerate = false;  // all weights zero
};

inline constexpr double kSparsityTau = 1e-8;
inline constexpr double kLogEps = 1e-12;

// Concatenation of the given matrices.
WeightSignals weight_signals(std::span<const Tensor* const> matrices);
WeightSignals weight_signals(std::span<const double> w);

struct AttentionSignals {
  double weight = 0.0;
  double entropy = 0.0;
};

// attention: [B, H, T, T]; key_mask: [B * T], nonzero = real token.
AttentionSignals attention_signals(const Tensor& attention, std::span<const int> key_mask);

// One row per live layer, each signal averaged over the probe batches.
// Gradients are recomputed here, so parameter grads are overwritten.
SignalMatrix build_signal_matrix(Model& model, std::span<const TokenBatch> probes);

// Header "layer,<signal names>", one row per layer.
void write_signal_csv(std::ostream& out, const SignalMatrix& m);

}  // namespace prunefuse
