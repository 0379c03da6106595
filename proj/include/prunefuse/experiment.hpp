#pragma once
// Dataset x strategy x seed grid: base-model training, pruning runs,
// randomization tests and distillation, fanned out over worker threads and
// merged in grid order.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "prunefuse/data.hpp"
#include "prunefuse/distill.hpp"
#include "prunefuse/fusion.hpp"
#include "prunefuse/model.hpp"
#include "prunefuse/pruning.hpp"
#include "prunefuse/report.hpp"

namespace prunefuse {

struct ExperimentConfig {
  std::vector<DatasetSpec> datasets{DatasetSpec{}};
  // vocab_size, n_classes and seed are taken from the dataset and run seed.
  ModelConfig model;
  std::vector<std::string> strategies = standard_strategies();
  std::size_t steps = 11;
  std::vector<std::uint64_t> seeds{0};

  TrainConfig base_train{.epochs = 6, .batch_size = 32, .lr = 1e-3, .seed = 0, .warmup_steps = 64};
  std::size_t finetune_size = 512;  // 0 = whole training split
  TrainConfig finetune;
  std::size_t probe_batches = 4;
  std::size_t probe_batch_size = 32;
  std::size_t eval_batch_size = 32;
  std::size_t impact_size = 0;  // validation samples used for impacts, 0 = all

  ForestParams forest;
  double ridge_lambda = kDefaultRidge;

  bool randomization = false;
  std::size_t repeats = 10;
  bool distill = false;
  DistillConfig distill_config;

  bool include_baseline = false;
  bool save_checkpoints = true;
  bool write_logs = true;
  std::size_t jobs = 1;
  std::filesystem::path out_dir = "out";

  // Throws kConfig.
  void validate() const;
  ModelConfig model_for(const DatasetSpec& d, std::uint64_t seed) const;
};

// Trains the unpruned model of one (dataset, seed) cell on the full training split.
Model train_base_model(const ExperimentConfig& cfg, std::size_t dataset_index, const Corpus& corpus, std::uint64_t seed);

// Seed handed to run_strategy for every strategy of a (dataset, seed) cell.
std::uint64_t run_seed(std::uint64_t seed, std::size_t dataset_index);

// Training seed of the distillation step of a cell.
std::uint64_t distill_seed(std::uint64_t run_seed);

RunData run_data_for(const ExperimentConfig& cfg, const Corpus& corpus);

// Runs the grid and writes traces, logs, checkpoints, results.json and the
// report tables into cfg.out_dir. Failing tasks are listed in errors.log and
// the first failure is rethrown once every task has finished.
ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr);

// Same dataset naming as the grid: the dataset name, suffixed with the dataset
// seed when several datasets share a name.
std::vector<std::string> dataset_labels(const std::vector<DatasetSpec>& datasets);

}  // namespace prunefuse
