#pragma once
// Aggregation of pruning traces into tables: max accuracy, ranks, accuracy
// change, accuracy-to-size improvement, importances, prune-order heatmap,
// randomization tests and distillation. Every table is written as CSV and
// bundled into report.json.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "prunefuse/pruning.hpp"

namespace prunefuse {

// ---------------------------------------------------------------------------
// Records

struct RunRecord {
  std::string dataset;
  std::uint64_t seed = 0;
  PruningTrace trace;
};

struct RandomizationRecord {
  std::string dataset;
  std::uint64_t seed = 0;
  PruningTrace forest;  // the informed reference run
  RandomizationResult random12;
  RandomizationResult random10;
};

struct DistillRecord {
  std::string dataset;
  std::uint64_t seed = 0;
  double acc_original = 0.0;
  double acc_compressed = 0.0;
  double acc_distilled = 0.0;
  std::size_t params = 0;
  double size_gb = 0.0;
  double accuracy_to_size_ratio = 0.0;  // acc_distilled / size_gb
};

struct ExperimentReport {
  std::vector<RunRecord> runs;
  std::vector<RandomizationRecord> randomization;
  std::vector<DistillRecord> distill;
  // Max accuracy over pruned steps only unless set.
  bool include_baseline = false;
};

// ---------------------------------------------------------------------------
// Analysis operations

struct StrategyRank {
  std::string strategy;
  double max_accuracy = 0.0;
  int rank = 0;
};

// Highest accuracy gets rank S, the next S - 1, and so on. Equal accuracies
// are ordered by name: the alphabetically first name takes the higher rank.
// Output follows input order.
std::vector<StrategyRank> rank_strategies(std::span<const std::pair<std::string, double>> max_accuracies);

// 100 * (max - baseline) / baseline.
double accuracy_change_vs_baseline(double max_accuracy, double baseline);

// Percent change of accuracy / size_gb between the compressed and base model.
double accuracy_to_size_improvement(double acc_c, std::size_t params_c, double acc_b, std::size_t params_b,
                                    double bytes_per_param = 4.0);

struct Heatmap {
  std::size_t n_layers = 0;
  std::vector<std::string> strategies;           // first-appearance order
  std::vector<std::vector<double>> mean_rank;    // [strategy][layer]
  std::vector<std::size_t> n_traces;             // per strategy
};

// Mean over traces of the step at which each layer was pruned; a layer a
// trace never pruned counts as that trace's step count + 1.
Heatmap prune_order_heatmap(std::span<const PruningTrace> traces);

// ---------------------------------------------------------------------------
// Tables

using Cell = std::variant<std::string, double, std::int64_t>;

struct Table {
  std::string name;  // file stem
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

std::vector<Table> build_tables(const ExperimentReport& report);

void write_csv(std::ostream& out, const Table& t);
nlohmann::ordered_json table_json(const Table& t);

// Writes <name>.csv for every table and report.json into dir (created).
void emit_report(const ExperimentReport& report, const std::filesystem::path& dir);

// Trace CSV: step, pruned_layer, test_accuracy, param_count, size_gb.
void write_trace_csv(std::ostream& out, const PruningTrace& trace);

// Lossless JSON form of the raw records (reloaded by the report command).
nlohmann::ordered_json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::ordered_json& j);

}  // namespace prunefuse
