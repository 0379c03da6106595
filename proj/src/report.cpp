#include "prunefuse/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>

#include "prunefuse/error.hpp"
#include "prunefuse/format.hpp"
#include "prunefuse/model.hpp"
#include "prunefuse/signals.hpp"

namespace prunefuse {

// ---------------------------------------------------------------------------
// Analysis operations

std::vector<StrategyRank> rank_strategies(std::span<const std::pair<std::string, double>> max_accuracies) {
  const std::size_t s = max_accuracies.size();
  std::vector<std::size_t> idx(s);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (max_accuracies[a].second != max_accuracies[b].second) return max_accuracies[a].second > max_accuracies[b].second;
    return max_accuracies[a].first < max_accuracies[b].first;
  });
  std::vector<StrategyRank> out(s);
  for (std::size_t i = 0; i < s; ++i) out[i] = {max_accuracies[i].first, max_accuracies[i].second, 0};
  for (std::size_t pos = 0; pos < s; ++pos) out[idx[pos]].rank = static_cast<int>(s - pos);
  return out;
}

double accuracy_change_vs_baseline(double max_accuracy, double baseline) {
  require(baseline > 0.0, ErrorKind::kInvalidArgument, "accuracy change: baseline accuracy must be > 0");
  return 100.0 * (max_accuracy - baseline) / baseline;
}

double accuracy_to_size_improvement(double acc_c, std::size_t params_c, double acc_b, std::size_t params_b,
                                    double bytes_per_param) {
  require(params_c > 0 && params_b > 0 && bytes_per_param > 0.0, ErrorKind::kInvalidArgument,
          "accuracy-to-size: model sizes must be > 0");
  require(acc_b > 0.0, ErrorKind::kInvalidArgument, "accuracy-to-size: base accuracy must be > 0");
  const double ratio_c = acc_c / size_gb(params_c, bytes_per_param);
  const double ratio_b = acc_b / size_gb(params_b, bytes_per_param);
  return 100.0 * (ratio_c / ratio_b - 1.0);
}

Heatmap prune_order_heatmap(std::span<const PruningTrace> traces) {
  Heatmap h;
  if (traces.empty()) return h;
  h.n_layers = traces.front().n_layers;
  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<double>> sums;
  for (const PruningTrace& t : traces) {
    require(t.n_layers == h.n_layers, ErrorKind::kInvalidArgument,
            "prune_order_heatmap: traces disagree on layer count (" + std::to_string(h.n_layers) + " vs " +
                std::to_string(t.n_layers) + ")");
    auto [it, inserted] = slot.emplace(t.strategy, h.strategies.size());
    if (inserted) {
      h.strategies.push_back(t.strategy);
      sums.emplace_back(h.n_layers, 0.0);
      h.n_traces.push_back(0);
    }
    std::vector<double> rank(h.n_layers, static_cast<double>(t.prune_order.size() + 1));
    for (std::size_t k = 0; k < t.prune_order.size(); ++k) {
      require(t.prune_order[k] < h.n_layers, ErrorKind::kInvalidArgument, "prune_order_heatmap: layer index out of range");
      rank[t.prune_order[k]] = static_cast<double>(k + 1);
    }
    for (std::size_t l = 0; l < h.n_layers; ++l) sums[it->second][l] += rank[l];
    ++h.n_traces[it->second];
  }
  for (std::size_t s = 0; s < sums.size(); ++s) {
    for (double& v : sums[s]) v /= static_cast<double>(h.n_traces[s]);
    h.mean_rank.push_back(std::move(sums[s]));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string join_order(const std::vector<std::size_t>& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(order[i]);
  }
  return s;
}

Cell i64(std::size_t v) { return static_cast<std::int64_t>(v); }

std::string seed_cell(std::uint64_t s) { return std::to_string(s); }

// Distinct values in first-appearance order.
template <class T, class F>
std::vector<std::string> distinct(const std::vector<T>& xs, F key) {
  std::vector<std::string> out;
  for (const T& x : xs) {
    const std::string k = key(x);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  return out;
}

bool is_fusion(const std::string& strategy) { return strategy == "linear_fusion" || strategy == "forest_fusion"; }

std::size_t bert_params_with(std::size_t layers_pruned) {
  const ModelConfig bert = bert_base_reference();
  return param_count(bert) - layers_pruned * per_layer_param_count(bert);
}

}  // namespace

std::vector<Table> build_tables(const ExperimentReport& report) {
  const bool inc = report.include_baseline;
  Table max_acc{"max_accuracy",
                {"dataset", "strategy", "seed", "baseline_accuracy", "max_accuracy", "argmax_step", "param_count_at_max",
                 "size_gb_at_max", "prune_order"},
                {}};
  Table change{"acc_change", {"dataset", "strategy", "seed", "baseline_accuracy", "max_accuracy", "change_pct"}, {}};
  Table size{"acc_size_improvement",
             {"dataset", "strategy", "seed", "baseline_accuracy", "baseline_params", "max_accuracy", "params_at_max",
              "improvement_pct", "bert_params_at_max", "bert_improvement_pct"},
             {}};
  for (const RunRecord& r : report.runs) {
    const PruningTrace& t = r.trace;
    require(!t.steps.empty(), ErrorKind::kInvalidArgument, "report: trace without a baseline entry");
    const TraceStep& base = t.steps.front();
    const bool any_pruned = t.steps.size() > 1;
    // A zero-step run has no pruned step; its max falls back to the baseline.
    const MaxAccuracy m = max_accuracy(t, inc || !any_pruned);
    const TraceStep& at = t.steps[m.step];
    max_acc.rows.push_back({r.dataset, t.strategy, seed_cell(r.seed), base.test_accuracy, m.value, i64(m.step),
                            i64(at.param_count), at.size_gb, join_order(t.prune_order)});
    change.rows.push_back(
        {r.dataset, t.strategy, seed_cell(r.seed), base.test_accuracy, m.value, accuracy_change_vs_baseline(m.value, base.test_accuracy)});
    const std::size_t pruned = m.step;
    Cell bert_params = std::string(), bert_impr = std::string();
    if (t.n_layers == bert_base_reference().n_layers) {
      const std::size_t bp = bert_params_with(pruned);
      bert_params = i64(bp);
      bert_impr = accuracy_to_size_improvement(m.value, bp, base.test_accuracy, bert_params_with(0));
    }
    size.rows.push_back({r.dataset, t.strategy, seed_cell(r.seed), base.test_accuracy, i64(base.param_count), m.value,
                         i64(at.param_count),
                         accuracy_to_size_improvement(m.value, at.param_count, base.test_accuracy, base.param_count),
                         bert_params, bert_impr});
  }

  const std::vector<std::string> datasets = distinct(report.runs, [](const RunRecord& r) { return r.dataset; });

  Table ranks{"ranks", {"dataset", "strategy", "n_seeds", "mean_max_accuracy", "std_max_accuracy", "rank"}, {}};
  Table imp{"importances", {"dataset", "strategy", "signal", "n_fits", "mean_raw", "mean_normalized"}, {}};
  Table heat{"prune_order_heatmap", {"dataset", "strategy", "layer", "mean_rank", "n_traces"}, {}};
  // Cross-dataset importance means, keyed by fusion strategy.
  std::vector<std::string> fusion_order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> across;
  std::map<std::string, std::size_t> across_n;

  for (const std::string& ds : datasets) {
    std::vector<const RunRecord*> runs;
    for (const RunRecord& r : report.runs)
      if (r.dataset == ds) runs.push_back(&r);
    const std::vector<std::string> strategies = distinct(runs, [](const RunRecord* r) { return r->trace.strategy; });

    std::vector<std::pair<std::string, double>> means;
    std::vector<std::pair<std::size_t, double>> spread;
    for (const std::string& s : strategies) {
      std::vector<double> v;
      for (const RunRecord* r : runs)
        if (r->trace.strategy == s) v.push_back(max_accuracy(r->trace, inc || r->trace.steps.size() == 1).value);
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      means.emplace_back(s, mean);
      spread.emplace_back(v.size(), sd);
    }
    const std::vector<StrategyRank> rk = rank_strategies(means);
    for (std::size_t i = 0; i < rk.size(); ++i)
      ranks.rows.push_back({ds, rk[i].strategy, i64(spread[i].first), rk[i].max_accuracy, spread[i].second,
                            static_cast<std::int64_t>(rk[i].rank)});

    for (const std::string& s : strategies) {
      if (!is_fusion(s)) continue;
      std::vector<double> raw(kNumSignals, 0.0), norm(kNumSignals, 0.0);
      std::size_t n = 0;
      for (const RunRecord* r : runs) {
        if (r->trace.strategy != s) continue;
        for (std::size_t k = 0; k < r->trace.raw_importance.size(); ++k) {
          for (std::size_t j = 0; j < kNumSignals; ++j) {
            raw[j] += r->trace.raw_importance[k][j];
            norm[j] += r->trace.normalized_importance[k][j];
          }
          ++n;
        }
      }
      if (n == 0) continue;
      for (std::size_t j = 0; j < kNumSignals; ++j) {
        raw[j] /= static_cast<double>(n);
        norm[j] /= static_cast<double>(n);
        imp.rows.push_back({ds, s, std::string(signal_names()[j]), i64(n), raw[j], norm[j]});
      }
      auto [it, inserted] = across.try_emplace(s, std::vector<double>(kNumSignals, 0.0), std::vector<double>(kNumSignals, 0.0));
      if (inserted) fusion_order.push_back(s);
      for (std::size_t j = 0; j < kNumSignals; ++j) {
        it->second.first[j] += raw[j];
        it->second.second[j] += norm[j];
      }
      ++across_n[s];
    }

    std::vector<PruningTrace> traces;
    for (const RunRecord* r : runs) traces.push_back(r->trace);
    const Heatmap h = prune_order_heatmap(traces);
    for (std::size_t s = 0; s < h.strategies.size(); ++s)
      for (std::size_t l = 0; l < h.n_layers; ++l)
        heat.rows.push_back({ds, h.strategies[s], i64(l), h.mean_rank[s][l], i64(h.n_traces[s])});
  }
  // Average of the per-dataset means.
  for (const std::string& s : fusion_order) {
    const double nd = static_cast<double>(across_n[s]);
    for (std::size_t j = 0; j < kNumSignals; ++j)
      imp.rows.push_back({std::string("all"), s, std::string(signal_names()[j]), i64(across_n[s]),
                          across[s].first[j] / nd, across[s].second[j] / nd});
  }

  Table rnd{"randomization_tests",
            {"dataset", "seed", "kind", "repeat", "max_accuracy", "argmax_step", "mean_max_accuracy", "prune_order"},
            {}};
  for (const RandomizationRecord& r : report.randomization) {
    const MaxAccuracy f = max_accuracy(r.forest, inc);
    rnd.rows.push_back({r.dataset, seed_cell(r.seed), std::string("forest_fusion"), i64(0), f.value, i64(f.step), f.value,
                        join_order(r.forest.prune_order)});
    for (const RandomizationResult* rr : {&r.random12, &r.random10}) {
      for (std::size_t k = 0; k < rr->repeats.size(); ++k) {
        const MaxAccuracy m = max_accuracy(rr->repeats[k], inc);
        rnd.rows.push_back({r.dataset, seed_cell(r.seed), rr->kind, i64(k), m.value, i64(m.step), rr->mean_max_accuracy,
                            join_order(rr->repeats[k].prune_order)});
      }
    }
  }

  Table dist{"distill_report",
             {"dataset", "seed", "acc_original", "acc_compressed", "acc_distilled", "params", "size_gb",
              "accuracy_to_size_ratio"},
             {}};
  for (const DistillRecord& d : report.distill)
    dist.rows.push_back({d.dataset, seed_cell(d.seed), d.acc_original, d.acc_compressed, d.acc_distilled, i64(d.params),
                         d.size_gb, d.accuracy_to_size_ratio});

  std::vector<Table> out;
  for (Table* t : {&max_acc, &ranks, &change, &size, &imp, &heat, &rnd, &dist}) out.push_back(std::move(*t));
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return csv_field(*s);
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  return std::to_string(std::get<std::int64_t>(c));
}

}  // namespace

void write_csv(std::ostream& out, const Table& t) {
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << cell_text(row[i]);
    out << '\n';
  }
}

nlohmann::ordered_json table_json(const Table& t) {
  nlohmann::ordered_json j;
  j["columns"] = t.columns;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : t.rows) {
    nlohmann::ordered_json r = nlohmann::ordered_json::array();
    for (const Cell& c : row) std::visit([&](const auto& v) { r.push_back(v); }, c);
    j["rows"].push_back(std::move(r));
  }
  return j;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + p.string() + "' for writing");
  return f;
}

void close_out(std::ofstream& f, const std::filesystem::path& p) {
  f.close();
  require(!f.fail(), ErrorKind::kIo, "write to '" + p.string() + "' failed");
}

}  // namespace

void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::ordered_json bundle;
  bundle["include_baseline"] = report.include_baseline;
  for (const Table& t : build_tables(report)) {
    const std::filesystem::path p = dir / (t.name + ".csv");
    std::ofstream f = open_out(p);
    write_csv(f, t);
    close_out(f, p);
    bundle[t.name] = table_json(t);
  }
  const std::filesystem::path p = dir / "report.json";
  std::ofstream f = open_out(p);
  f << bundle.dump(1) << '\n';
  close_out(f, p);
}

void write_trace_csv(std::ostream& out, const PruningTrace& trace) {
  out << "step,pruned_layer,test_accuracy,param_count,size_gb\n";
  for (const TraceStep& s : trace.steps)
    out << s.step << ',' << s.pruned_layer << ',' << format_double(s.test_accuracy) << ',' << s.param_count << ','
        << format_double(s.size_gb) << '\n';
}

// ---------------------------------------------------------------------------
// Raw record serialization

namespace {

using ojson = nlohmann::ordered_json;

ojson trace_json(const PruningTrace& t) {
  ojson j;
  j["strategy"] = t.strategy;
  j["seed"] = t.seed;
  j["n_layers"] = t.n_layers;
  j["prune_order"] = t.prune_order;
  ojson steps = ojson::array();
  for (const TraceStep& s : t.steps)
    steps.push_back({s.step, s.pruned_layer, s.test_accuracy, s.param_count, s.size_gb, s.train_loss});
  j["steps"] = std::move(steps);
  j["raw_importance"] = t.raw_importance;
  j["normalized_importance"] = t.normalized_importance;
  return j;
}

PruningTrace trace_from(const ojson& j) {
  PruningTrace t;
  t.strategy = j.at("strategy").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.n_layers = j.at("n_layers").get<std::size_t>();
  t.prune_order = j.at("prune_order").get<std::vector<std::size_t>>();
  for (const ojson& s : j.at("steps")) {
    TraceStep ts;
    ts.step = s.at(0).get<std::size_t>();
    ts.pruned_layer = s.at(1).get<int>();
    ts.test_accuracy = s.at(2).get<double>();
    ts.param_count = s.at(3).get<std::size_t>();
    ts.size_gb = s.at(4).get<double>();
    ts.train_loss = s.at(5).get<double>();
    t.steps.push_back(ts);
  }
  t.raw_importance = j.at("raw_importance").get<std::vector<std::vector<double>>>();
  t.normalized_importance = j.at("normalized_importance").get<std::vector<std::vector<double>>>();
  return t;
}

ojson randomization_json(const RandomizationResult& r) {
  ojson j;
  j["kind"] = r.kind;
  j["max_accuracies"] = r.max_accuracies;
  j["mean_max_accuracy"] = r.mean_max_accuracy;
  j["repeats"] = ojson::array();
  for (const PruningTrace& t : r.repeats) j["repeats"].push_back(trace_json(t));
  return j;
}

RandomizationResult randomization_from(const ojson& j) {
  RandomizationResult r;
  r.kind = j.at("kind").get<std::string>();
  r.max_accuracies = j.at("max_accuracies").get<std::vector<double>>();
  r.mean_max_accuracy = j.at("mean_max_accuracy").get<double>();
  for (const ojson& t : j.at("repeats")) r.repeats.push_back(trace_from(t));
  return r;
}

}  // namespace

nlohmann::ordered_json to_json(const ExperimentReport& report) {
  ojson j;
  j["include_baseline"] = report.include_baseline;
  j["runs"] = ojson::array();
  for (const RunRecord& r : report.runs)
    j["runs"].push_back({{"dataset", r.dataset}, {"seed", r.seed}, {"trace", trace_json(r.trace)}});
  j["randomization"] = ojson::array();
  for (const RandomizationRecord& r : report.randomization)
    j["randomization"].push_back({{"dataset", r.dataset},
                                  {"seed", r.seed},
                                  {"forest", trace_json(r.forest)},
                                  {"random12", randomization_json(r.random12)},
                                  {"random10", randomization_json(r.random10)}});
  j["distill"] = ojson::array();
  for (const DistillRecord& d : report.distill)
    j["distill"].push_back({{"dataset", d.dataset},
                            {"seed", d.seed},
                            {"acc_original", d.acc_original},
                            {"acc_compressed", d.acc_compressed},
                            {"acc_distilled", d.acc_distilled},
                            {"params", d.params},
                            {"size_gb", d.size_gb},
                            {"accuracy_to_size_ratio", d.accuracy_to_size_ratio}});
  return j;
}

ExperimentReport report_from_json(const nlohmann::ordered_json& j) {
  try {
    ExperimentReport r;
    r.include_baseline = j.at("include_baseline").get<bool>();
    for (const ojson& x : j.at("runs"))
      r.runs.push_back({x.at("dataset").get<std::string>(), x.at("seed").get<std::uint64_t>(), trace_from(x.at("trace"))});
    for (const ojson& x : j.at("randomization"))
      r.randomization.push_back({x.at("dataset").get<std::string>(), x.at("seed").get<std::uint64_t>(),
                                 trace_from(x.at("forest")), randomization_from(x.at("random12")),
                                 randomization_from(x.at("random10"))});
    for (const ojson& x : j.at("distill")) {
      DistillRecord d;
      d.dataset = x.at("dataset").get<std::string>();
      d.seed = x.at("seed").get<std::uint64_t>();
      d.acc_original = x.at("acc_original").get<double>();
      d.acc_compressed = x.at("acc_compressed").get<double>();
      d.acc_distilled = x.at("acc_distilled").get<double>();
      d.params = x.at("params").get<std::size_t>();
      d.size_gb = x.at("size_gb").get<double>();
      d.accuracy_to_size_ratio = x.at("accuracy_to_size_ratio").get<double>();
      r.distill.push_back(d);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("results file is malformed: ") + e.what());
  }
}

}  // namespace prunefuse
