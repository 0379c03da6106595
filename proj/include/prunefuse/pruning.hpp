#pragma once
// Strategy registry, the shared training loop, and the sequential
// prune / fine-tune / evaluate engine.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunefuse/data.hpp"
#include "prunefuse/fusion.hpp"
#include "prunefuse/graph.hpp"
#include "prunefuse/model.hpp"
#include "prunefuse/signals.hpp"

namespace prunefuse {

// ---------------------------------------------------------------------------
// Registry

enum class StrategyKind { kSignal, kLinearFusion, kForestFusion, kRandom, kRandom12, kRandom10 };
enum class Direction { kMinFirst, kMaxFirst };

struct StrategySpec {
  std::string name;
  StrategyKind kind = StrategyKind::kSignal;
  Signal signal = Signal::kInhibition;  // kSignal only
  Direction direction = Direction::kMinFirst;
};

Direction registry_direction(Signal s);
// Throws kConfig for a name outside the registry.
StrategySpec make_strategy(std::string_view name);
// The twelve signals, linear_fusion, forest_fusion and random.
const std::vector<std::string>& standard_strategies();
bool is_known_strategy(std::string_view name);

// Registry-direction extremum of the strategy's column; ties -> lowest layer.
std::size_t next_layer_single_signal(const StrategySpec& spec, const SignalMatrix& m);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // lr ramps linearly from lr / warmup_steps up to lr over this many updates
  std::size_t warmup_steps = 0;
};

struct TrainResult {
  std::vector<double> batch_losses;
  double final_loss = 0.0;  // mean over the last epoch
};

// Builds the per-batch loss on top of the model's logits.
using LossBuilder = std::function<Var(Graph& g, Var logits, const TokenBatch& batch)>;

// Shuffles per epoch from cfg.seed, one fresh Adam state per call. Only the
// parameters of live layers (plus embeddings and heads) are updated.
TrainResult train_loop(Model& model, std::span<const Sample> train, const TrainConfig& cfg, const LossBuilder& loss);

// Mean cross-entropy.
TrainResult fine_tune(Model& model, std::span<const Sample> train, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Sequential pruning

// Everything a run reads; shared unchanged by every strategy of a seed.
struct RunData {
  std::vector<Sample> finetune;
  std::vector<TokenBatch> probes;
  std::vector<TokenBatch> val;
  std::vector<TokenBatch> test;
};

// finetune: the first finetune_size training samples (0 = all). probes: the
// first probe_batches * probe_batch_size validation samples. val: the first
// impact_size validation samples (0 = all), used for impact measurement.
RunData make_run_data(const Corpus& corpus, std::size_t finetune_size, std::size_t probe_batches = 4,
                      std::size_t probe_batch_size = 32, std::size_t eval_batch_size = 32, std::size_t impact_size = 0);

struct RunOptions {
  std::size_t steps = 11;
  TrainConfig finetune;  // seed is replaced per step
  ForestParams forest;   // seed is replaced per step
  double ridge_lambda = kDefaultRidge;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;  // JSON lines, one per step
  bool keep_best_model = false;
};

struct TraceStep {
  std::size_t step = 0;
  int pruned_layer = -1;  // -1 for the unpruned baseline
  double test_accuracy = 0.0;
  std::size_t param_count = 0;
  double size_gb = 0.0;
  double train_loss = 0.0;
};

struct PruningTrace {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t n_layers = 0;
  std::vector<TraceStep> steps;  // steps[0] is the baseline
  std::vector<std::size_t> prune_order;
  // Fusion kinds: importance of each signal at every step.
  std::vector<std::vector<double>> raw_importance;
  std::vector<std::vector<double>> normalized_importance;
};

struct RunResult {
  PruningTrace trace;
  // Model at the highest-accuracy pruned step (keep_best_model only).
  std::optional<Model> best_model;
};

RunResult run_strategy(const StrategySpec& spec, const Model& model0, const RunData& data, const RunOptions& opts);

// Steps a run of this strategy actually performs (random10 stops at n - 2).
std::size_t effective_steps(const StrategySpec& spec, std::size_t n_layers, std::size_t steps);

struct RandomizationResult {
  std::string kind;
  std::vector<PruningTrace> repeats;
  std::vector<double> max_accuracies;
  double mean_max_accuracy = 0.0;
};

// Seed of repeat r of a randomization test.
std::uint64_t randomization_repeat_seed(std::string_view kind, std::uint64_t master_seed, std::size_t r);

// Each repeat is a full run with a seed derived from opts.seed and the repeat index.
RandomizationResult randomization_test(std::string_view kind, std::size_t repeats, const Model& model0, const RunData& data,
                                       const RunOptions& opts);

// Highest test accuracy over pruned steps (or every step when include_baseline).
struct MaxAccuracy {
  double value = 0.0;
  std::size_t step = 0;
};
MaxAccuracy max_accuracy(const PruningTrace& trace, bool include_baseline = false);

}  // namespace prunefuse
