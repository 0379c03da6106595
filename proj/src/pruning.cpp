#include "prunefuse/pruning.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "prunefuse/adam.hpp"
#include "prunefuse/error.hpp"
#include "prunefuse/seed.hpp"

namespace prunefuse {

namespace {

constexpr std::uint64_t kFineTuneStream = 0x66696e65;  // "fine"
constexpr std::uint64_t kForestStream = 0x66727374;    // "frst"
constexpr std::uint64_t kRandomStream = 0x72616e64;    // "rand"
constexpr std::uint64_t kRepeatStream = 0x72657074;    // "rept"

}  // namespace

// ---------------------------------------------------------------------------
// Registry

Direction registry_direction(Signal s) {
  switch (s) {
    case Signal::kWeightSparsity:
    case Signal::kAttentionEntropy:
      return Direction::kMaxFirst;
    default:
      return Direction::kMinFirst;
  }
}

StrategySpec make_strategy(std::string_view name) {
  StrategySpec spec;
  spec.name = std::string(name);
  if (const auto s = signal_from_name(name)) {
    spec.kind = StrategyKind::kSignal;
    spec.signal = *s;
    spec.direction = registry_direction(*s);
  } else if (name == "linear_fusion") {
    spec.kind = StrategyKind::kLinearFusion;
  } else if (name == "forest_fusion") {
    spec.kind = StrategyKind::kForestFusion;
  } else if (name == "random") {
    spec.kind = StrategyKind::kRandom;
  } else if (name == "random12") {
    spec.kind = StrategyKind::kRandom12;
  } else if (name == "random10") {
    spec.kind = StrategyKind::kRandom10;
  } else {
    fail(ErrorKind::kConfig, "unknown strategy '" + std::string(name) + "'");
  }
  return spec;
}

const std::vector<std::string>& standard_strategies() {
  static const std::vector<std::string> kAll = [] {
    std::vector<std::string> v;
    for (std::string_view n : signal_names()) v.emplace_back(n);
    v.insert(v.end(), {"linear_fusion", "forest_fusion", "random"});
    return v;
  }();
  return kAll;
}

bool is_known_strategy(std::string_view name) {
  return signal_from_name(name).has_value() || name == "linear_fusion" || name == "forest_fusion" || name == "random" ||
         name == "random12" || name == "random10";
}

std::size_t next_layer_single_signal(const StrategySpec& spec, const SignalMatrix& m) {
  require(spec.kind == StrategyKind::kSignal, ErrorKind::kInvalidArgument,
          "next_layer_single_signal: '" + spec.name + "' is not a single-signal strategy");
  require(!m.rows.empty(), ErrorKind::kInvalidArgument, "next_layer_single_signal: empty signal matrix");
  const std::vector<double> col = m.column(spec.signal);
  std::size_t best = 0;
  for (std::size_t i = 1; i < col.size(); ++i) {
    const bool better = spec.direction == Direction::kMinFirst ? col[i] < col[best] : col[i] > col[best];
    if (better || (col[i] == col[best] && m.layers[i] < m.layers[best])) best = i;
  }
  return m.layers[best];
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_loop(Model& model, std::span<const Sample> train, const TrainConfig& cfg, const LossBuilder& loss) {
  require(!train.empty(), ErrorKind::kInvalidArgument, "training set is empty");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::kInvalidArgument, "epochs and batch_size must be >= 1");
  require(cfg.lr >= 0.0, ErrorKind::kInvalidArgument, "learning rate must be >= 0");
  std::mt19937_64 rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.lr;
  AdamState adam(ac);
  const std::vector<Parameter*> params = model.parameters();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainResult out;
  double epoch_sum = 0.0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<TokenBatch> batches = make_batches(train, order, cfg.batch_size, model.config().max_seq_len);
    epoch_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        Graph g;
        const Var logits = build_logits(g, model, batches[b], true);
        const Var l = loss(g, logits, batches[b]);
        g.forward();
        for (Parameter* p : params) p->zero_grad();
        g.backward(l);
        if (adam.steps() < static_cast<std::int64_t>(cfg.warmup_steps))
          adam.set_lr(cfg.lr * static_cast<double>(adam.steps() + 1) / static_cast<double>(cfg.warmup_steps));
        else if (cfg.warmup_steps > 0)
          adam.set_lr(cfg.lr);
        adam.step(params);
        out.batch_losses.push_back(g.value(l)[0]);
        epoch_sum += out.batch_losses.back();
      } catch (const Error& err) {
        throw Error(err.kind(), "training epoch " + std::to_string(e) + " batch " + std::to_string(b) + ": " + err.detail());
      }
    }
    out.final_loss = epoch_sum / static_cast<double>(batches.size());
  }
  return out;
}

TrainResult fine_tune(Model& model, std::span<const Sample> train, const TrainConfig& cfg) {
  return train_loop(model, train, cfg, [](Graph& g, Var logits, const TokenBatch& batch) {
    Tensor labels({batch.batch_size});
    for (std::size_t i = 0; i < batch.batch_size; ++i) labels[i] = batch.labels[i];
    return g.cross_entropy(logits, g.constant(std::move(labels)));
  });
}

// ---------------------------------------------------------------------------
// Sequential pruning

RunData make_run_data(const Corpus& corpus, std::size_t finetune_size, std::size_t probe_batches, std::size_t probe_batch_size,
                      std::size_t eval_batch_size, std::size_t impact_size) {
  require(probe_batches >= 1 && probe_batch_size >= 1, ErrorKind::kInvalidArgument, "at least one probe batch is required");
  require(probe_batches * probe_batch_size <= corpus.val.size(), ErrorKind::kInvalidArgument,
          "probe set (" + std::to_string(probe_batches * probe_batch_size) + " samples) exceeds the validation split (" +
              std::to_string(corpus.val.size()) + ")");
  RunData d;
  const std::size_t n_ft = finetune_size == 0 ? corpus.train.size() : std::min(finetune_size, corpus.train.size());
  d.finetune.assign(corpus.train.begin(), corpus.train.begin() + static_cast<std::ptrdiff_t>(n_ft));
  d.probes = make_batches(std::span<const Sample>(corpus.val).first(probe_batches * probe_batch_size), probe_batch_size);
  const std::size_t n_val = impact_size == 0 ? corpus.val.size() : std::min(impact_size, corpus.val.size());
  d.val = make_batches(std::span<const Sample>(corpus.val).first(n_val), eval_batch_size);
  d.test = make_batches(corpus.test, eval_batch_size);
  return d;
}

std::size_t effective_steps(const StrategySpec& spec, std::size_t n_layers, std::size_t steps) {
  if (spec.kind == StrategyKind::kRandom10) {
    require(n_layers >= 3, ErrorKind::kInvalidArgument, "random10 needs at least 3 layers");
    return std::min(steps, n_layers - 2);
  }
  return steps;
}

namespace {

nlohmann::json matrix_json(const SignalMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const SignalVector& r : m.rows) rows.push_back(r.values);
  return rows;
}

}  // namespace

RunResult run_strategy(const StrategySpec& spec, const Model& model0, const RunData& data, const RunOptions& opts) {
  const std::size_t n_layers = model0.config().n_layers;
  require(opts.steps <= n_layers, ErrorKind::kInvalidArgument,
          "steps (" + std::to_string(opts.steps) + ") exceed the layer count (" + std::to_string(n_layers) + ")");
  require(model0.live_layers().size() == n_layers, ErrorKind::kInvalidArgument, "run_strategy expects an unpruned model");
  const std::size_t steps = effective_steps(spec, n_layers, opts.steps);

  Model model = model0;
  RunResult result;
  PruningTrace& trace = result.trace;
  trace.strategy = spec.name;
  trace.seed = opts.seed;
  trace.n_layers = n_layers;

  auto record = [&](std::size_t step, int layer, double acc, double loss, nlohmann::json rec) {
    TraceStep ts;
    ts.step = step;
    ts.pruned_layer = layer;
    ts.test_accuracy = acc;
    ts.param_count = param_count(model.config(), model.prune_mask());
    ts.size_gb = size_gb(ts.param_count);
    ts.train_loss = loss;
    trace.steps.push_back(ts);
    if (opts.log) {
      rec["strategy"] = spec.name;
      rec["seed"] = opts.seed;
      rec["step"] = step;
      rec["chosen"] = layer;
      rec["test_accuracy"] = acc;
      rec["param_count"] = ts.param_count;
      rec["train_loss"] = loss;
      *opts.log << rec.dump() << '\n';
    }
  };

  record(0, -1, accuracy(model, data.test), 0.0, nlohmann::json::object());
  double best_acc = -1.0;
  std::mt19937_64 random_rng(derive_seed(opts.seed, kRandomStream + static_cast<std::uint64_t>(spec.kind)));

  for (std::size_t s = 1; s <= steps; ++s) {
    const std::vector<std::size_t> live = model.live_layers();
    nlohmann::json rec;
    rec["live_layers"] = live;
    std::size_t chosen = 0;
    switch (spec.kind) {
      case StrategyKind::kSignal: {
        const SignalMatrix m = build_signal_matrix(model, data.probes);
        rec["signals"] = matrix_json(m);
        chosen = next_layer_single_signal(spec, m);
        break;
      }
      case StrategyKind::kLinearFusion:
      case StrategyKind::kForestFusion: {
        const SignalMatrix m = build_signal_matrix(model, data.probes);
        const ImpactVector imp = measure_impacts(model, data.val);
        Matrix x(m.size(), kNumSignals);
        for (std::size_t i = 0; i < m.size(); ++i)
          for (std::size_t j = 0; j < kNumSignals; ++j) x(i, j) = m.rows[i].values[j];
        std::vector<double> pred(m.size());
        Importance importance;
        if (spec.kind == StrategyKind::kLinearFusion) {
          const LinearModel lm = fit_linear(x, imp.delta, opts.ridge_lambda);
          for (std::size_t i = 0; i < m.size(); ++i) pred[i] = lm.predict(x.row(i));
          importance = extract_importance(lm);
        } else {
          ForestParams fp = opts.forest;
          fp.seed = derive_seed(opts.seed, kForestStream, s);
          const ForestModel fm = fit_forest(x, imp.delta, fp);
          for (std::size_t i = 0; i < m.size(); ++i) pred[i] = fm.predict(x.row(i));
          importance = extract_importance(fm);
        }
        chosen = select_layer(pred, m.layers);
        trace.raw_importance.push_back(importance.raw);
        trace.normalized_importance.push_back(importance.normalized);
        rec["signals"] = matrix_json(m);
        rec["base_accuracy"] = imp.base_accuracy;
        rec["impacts"] = imp.delta;
        rec["predictions"] = pred;
        rec["importance"] = importance.raw;
        break;
      }
      case StrategyKind::kRandom:
      case StrategyKind::kRandom12:
      case StrategyKind::kRandom10: {
        std::vector<std::size_t> eligible;
        for (std::size_t l : live)
          if (spec.kind != StrategyKind::kRandom10 || (l != 0 && l + 1 != n_layers)) eligible.push_back(l);
        require(!eligible.empty(), ErrorKind::kState, spec.name + ": no eligible layer left at step " + std::to_string(s));
        std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
        chosen = eligible[pick(random_rng)];
        break;
      }
    }

    model.prune(chosen);
    trace.prune_order.push_back(chosen);
    TrainConfig tc = opts.finetune;
    tc.seed = derive_seed(opts.seed, kFineTuneStream, s);
    const TrainResult tr = fine_tune(model, data.finetune, tc);
    const double acc = accuracy(model, data.test);
    record(s, static_cast<int>(chosen), acc, tr.final_loss, std::move(rec));
    if (opts.keep_best_model && acc > best_acc) {
      best_acc = acc;
      result.best_model = model;
    }
  }
  return result;
}

std::uint64_t randomization_repeat_seed(std::string_view kind, std::uint64_t master_seed, std::size_t r) {
  return derive_seed(master_seed, kRepeatStream + (kind == "random10" ? 10 : 12), r);
}

RandomizationResult randomization_test(std::string_view kind, std::size_t repeats, const Model& model0, const RunData& data,
                                       const RunOptions& opts) {
  require(kind == "random12" || kind == "random10", ErrorKind::kInvalidArgument,
          "randomization test kind must be random12 or random10, got '" + std::string(kind) + "'");
  require(repeats >= 1, ErrorKind::kInvalidArgument, "randomization test needs at least one repeat");
  const StrategySpec spec = make_strategy(kind);
  RandomizationResult out;
  out.kind = std::string(kind);
  double sum = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    RunOptions o = opts;
    o.keep_best_model = false;
    o.seed = randomization_repeat_seed(kind, opts.seed, r);
    PruningTrace t = run_strategy(spec, model0, data, o).trace;
    out.max_accuracies.push_back(max_accuracy(t).value);
    sum += out.max_accuracies.back();
    out.repeats.push_back(std::move(t));
  }
  out.mean_max_accuracy = sum / static_cast<double>(repeats);
  return out;
}

MaxAccuracy max_accuracy(const PruningTrace& trace, bool include_baseline) {
  MaxAccuracy best{-1.0, 0};
  for (const TraceStep& s : trace.steps) {
    if (s.step == 0 && !include_baseline) continue;
    if (s.test_accuracy > best.value) best = {s.test_accuracy, s.step};
  }
  require(best.value >= 0.0, ErrorKind::kInvalidArgument, "max_accuracy: trace has no eligible steps");
  return best;
}

}  // namespace prunefuse
