#include "prunefuse/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "prunefuse/error.hpp"
#include "prunefuse/format.hpp"
#include "prunefuse/seed.hpp"

namespace prunefuse {

namespace {

constexpr std::uint64_t kModelStream = 0x6d6f646c;    // "modl"
constexpr std::uint64_t kBaseStream = 0x62617365;     // "base"
constexpr std::uint64_t kRunStream = 0x72756e73;      // "runs"
constexpr std::uint64_t kDistillStream = 0x64697374;  // "dist"

}  // namespace

void ExperimentConfig::validate() const {
  require(!datasets.empty(), ErrorKind::kConfig, "no dataset configured");
  for (const DatasetSpec& d : datasets) {
    try {
      d.validate();
    } catch (const Error& e) {
      fail(ErrorKind::kConfig, "dataset '" + d.name + "': " + e.detail());
    }
  }
  require(!seeds.empty(), ErrorKind::kConfig, "seed list is empty");
  require(!strategies.empty(), ErrorKind::kConfig, "strategy list is empty");
  for (const std::string& s : strategies) {
    require(is_known_strategy(s), ErrorKind::kConfig, "unknown strategy '" + s + "'");
    require(std::count(strategies.begin(), strategies.end(), s) == 1, ErrorKind::kConfig, "strategy '" + s + "' listed twice");
  }
  {
    std::vector<std::uint64_t> sorted = seeds;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::kConfig, "seed listed twice");
  }
  try {
    model_for(datasets.front(), 0).validate();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, "model: " + e.detail());
  }
  require(steps <= model.n_layers, ErrorKind::kConfig,
          "steps (" + std::to_string(steps) + ") exceed n_layers (" + std::to_string(model.n_layers) + ")");
  for (const std::string& s : strategies)
    if (s == "random10") require(model.n_layers >= 3, ErrorKind::kConfig, "random10 needs at least 3 layers");
  require(base_train.epochs >= 1 && base_train.batch_size >= 1 && base_train.lr >= 0.0, ErrorKind::kConfig,
          "base training needs epochs >= 1, batch_size >= 1 and lr >= 0");
  require(finetune.epochs >= 1 && finetune.batch_size >= 1 && finetune.lr >= 0.0, ErrorKind::kConfig,
          "fine-tuning needs epochs >= 1, batch_size >= 1 and lr >= 0");
  require(probe_batches >= 1 && probe_batch_size >= 1 && eval_batch_size >= 1, ErrorKind::kConfig,
          "probe and evaluation batch sizes must be >= 1");
  for (const DatasetSpec& d : datasets)
    require(probe_batches * probe_batch_size <= static_cast<std::size_t>(d.n_val), ErrorKind::kConfig,
            "probe set exceeds the validation split of '" + d.name + "'");
  require(forest.n_trees >= 1 && forest.min_leaf >= 1 && forest.feature_frac > 0.0 && forest.feature_frac <= 1.0,
          ErrorKind::kConfig, "forest needs n_trees >= 1, min_leaf >= 1 and feature_frac in (0, 1]");
  require(ridge_lambda >= 0.0, ErrorKind::kConfig, "ridge_lambda must be >= 0");
  const bool has_forest = std::count(strategies.begin(), strategies.end(), "forest_fusion") == 1;
  if (randomization) {
    require(has_forest, ErrorKind::kConfig, "randomization tests compare against forest_fusion; add it to the strategies");
    require(repeats >= 1, ErrorKind::kConfig, "randomization repeats must be >= 1");
    require(model.n_layers >= 3, ErrorKind::kConfig, "randomization tests need at least 3 layers");
  }
  if (distill) {
    require(has_forest, ErrorKind::kConfig, "distillation uses the best forest_fusion model; add it to the strategies");
    require(steps >= 1, ErrorKind::kConfig, "distillation needs at least one pruning step");
    distill_config.validate();
  }
  require(jobs >= 1, ErrorKind::kConfig, "jobs must be >= 1");
}

ModelConfig ExperimentConfig::model_for(const DatasetSpec& d, std::uint64_t seed) const {
  ModelConfig m = model;
  m.vocab_size = static_cast<std::size_t>(d.vocab_size);
  m.n_classes = static_cast<std::size_t>(d.n_classes);
  m.seed = seed;
  return m;
}

std::uint64_t run_seed(std::uint64_t seed, std::size_t dataset_index) { return derive_seed(seed, kRunStream, dataset_index); }

std::uint64_t distill_seed(std::uint64_t run_seed) { return derive_seed(run_seed, kDistillStream); }

Model train_base_model(const ExperimentConfig& cfg, std::size_t di, const Corpus& corpus, std::uint64_t seed) {
  require(di < cfg.datasets.size(), ErrorKind::kInvalidArgument, "train_base_model: dataset index out of range");
  Model m(cfg.model_for(cfg.datasets[di], derive_seed(seed, kModelStream, di)));
  TrainConfig tc = cfg.base_train;
  tc.seed = derive_seed(seed, kBaseStream, di);
  fine_tune(m, corpus.train, tc);
  return m;
}

RunData run_data_for(const ExperimentConfig& cfg, const Corpus& corpus) {
  return make_run_data(corpus, cfg.finetune_size, cfg.probe_batches, cfg.probe_batch_size, cfg.eval_batch_size,
                       cfg.impact_size);
}

std::vector<std::string> dataset_labels(const std::vector<DatasetSpec>& datasets) {
  std::vector<std::string> out;
  for (const DatasetSpec& d : datasets) {
    const bool shared =
        std::count_if(datasets.begin(), datasets.end(), [&](const DatasetSpec& x) { return x.name == d.name; }) > 1;
    out.push_back(shared ? d.name + "-s" + std::to_string(d.seed) : d.name);
  }
  return out;
}

namespace {

struct TaskFailure {
  std::size_t index = 0;
  std::string what;
  std::exception_ptr error;
};

// Runs fn(0..n-1) on up to `jobs` threads; collects failures by task index.
std::vector<TaskFailure> parallel_for(std::size_t n, std::size_t jobs, const std::function<std::string(std::size_t)>& label,
                                      const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::vector<TaskFailure> failures;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        failures.push_back({i, label(i) + ": " + e.what(), std::current_exception()});
      }
    }
  };
  const std::size_t t = std::min(jobs, n);
  if (t <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < t; ++k) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  std::sort(failures.begin(), failures.end(), [](const TaskFailure& a, const TaskFailure& b) { return a.index < b.index; });
  return failures;
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + p.string() + "' for writing");
  f << content;
  f.close();
  require(!f.fail(), ErrorKind::kIo, "write to '" + p.string() + "' failed");
}

void make_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  require(!ec, ErrorKind::kIo, "cannot create '" + p.string() + "': " + ec.message());
}

[[noreturn]] void report_failures(const std::filesystem::path& out_dir, const std::vector<TaskFailure>& failures) {
  std::string log;
  for (const TaskFailure& f : failures) log += f.what + '\n';
  try {
    make_dir(out_dir);
    write_file(out_dir / "errors.log", log);
  } catch (const Error&) {
  }
  std::rethrow_exception(failures.front().error);
}

using Clock = std::chrono::steady_clock;

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* progress) {
  cfg.validate();
  const std::vector<std::string> labels = dataset_labels(cfg.datasets);
  const std::size_t nd = cfg.datasets.size(), ns = cfg.seeds.size(), nst = cfg.strategies.size();
  std::mutex progress_mu;
  const Clock::time_point t0 = Clock::now();
  auto say = [&](const std::string& line) {
    if (!progress) return;
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::lock_guard lock(progress_mu);
    *progress << "[" << format_double(secs, 4) << "s] " << line << std::endl;
  };

  std::vector<Corpus> corpora;
  std::vector<RunData> data;
  for (const DatasetSpec& d : cfg.datasets) {
    corpora.push_back(generate_corpus(d));
    data.push_back(run_data_for(cfg, corpora.back()));
  }
  make_dir(cfg.out_dir);
  if (cfg.write_logs) make_dir(cfg.out_dir / "logs");
  make_dir(cfg.out_dir / "traces");
  if (cfg.save_checkpoints) make_dir(cfg.out_dir / "checkpoints");
  auto cell_name = [&](std::size_t d, std::size_t s) { return labels[d] + "_seed" + std::to_string(cfg.seeds[s]); };

  // Stage 1: base models, one per (dataset, seed) cell.
  std::vector<std::optional<Model>> base(nd * ns);
  auto failures = parallel_for(
      nd * ns, cfg.jobs, [&](std::size_t c) { return "base " + cell_name(c / ns, c % ns); },
      [&](std::size_t c) {
        const std::size_t d = c / ns, s = c % ns;
        base[c] = train_base_model(cfg, d, corpora[d], cfg.seeds[s]);
        if (cfg.save_checkpoints)
          save_checkpoint(*base[c], (cfg.out_dir / "checkpoints" / (cell_name(d, s) + "_base.ckpt")).string());
        say("base " + cell_name(d, s) + " test accuracy " + format_double(accuracy(*base[c], data[d].test), 6));
      });
  if (!failures.empty()) report_failures(cfg.out_dir, failures);

  // Stage 2: one task per strategy run and per randomization repeat.
  struct Task {
    std::size_t cell = 0;
    std::string strategy;
    std::size_t repeat = 0;
    bool is_repeat = false;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < nd * ns; ++c) {
    for (const std::string& s : cfg.strategies) tasks.push_back({c, s, 0, false});
    if (cfg.randomization)
      for (const char* kind : {"random12", "random10"})
        for (std::size_t r = 0; r < cfg.repeats; ++r) tasks.push_back({c, kind, r, true});
  }
  auto task_name = [&](const Task& t) {
    std::string n = cell_name(t.cell / ns, t.cell % ns) + "_" + t.strategy;
    if (t.is_repeat) n += "_rep" + std::to_string(t.repeat);
    return n;
  };
  std::vector<PruningTrace> traces(tasks.size());
  std::vector<std::optional<DistillRecord>> distilled(tasks.size());

  failures = parallel_for(
      tasks.size(), cfg.jobs, [&](std::size_t i) { return task_name(tasks[i]); },
      [&](std::size_t i) {
        const Task& t = tasks[i];
        const std::size_t d = t.cell / ns, s = t.cell % ns;
        const Model& model0 = *base[t.cell];
        const std::uint64_t rs = run_seed(cfg.seeds[s], d);
        RunOptions opts;
        opts.steps = cfg.steps;
        opts.finetune = cfg.finetune;
        opts.forest = cfg.forest;
        opts.ridge_lambda = cfg.ridge_lambda;
        opts.seed = t.is_repeat ? randomization_repeat_seed(t.strategy, rs, t.repeat) : rs;
        opts.keep_best_model = cfg.distill && t.strategy == "forest_fusion";
        std::ostringstream log;
        if (cfg.write_logs) opts.log = &log;
        RunResult res = run_strategy(make_strategy(t.strategy), model0, data[d], opts);
        const std::string name = task_name(t);
        if (cfg.write_logs) write_file(cfg.out_dir / "logs" / (name + ".jsonl"), log.str());
        std::ostringstream csv;
        write_trace_csv(csv, res.trace);
        write_file(cfg.out_dir / "traces" / (name + ".csv"), csv.str());
        say(name + " max accuracy " + format_double(max_accuracy(res.trace, cfg.include_baseline || cfg.steps == 0).value, 6));

        if (res.best_model) {
          Model& student = *res.best_model;
          if (cfg.save_checkpoints)
            save_checkpoint(student, (cfg.out_dir / "checkpoints" / (cell_name(d, s) + "_forest_best.ckpt")).string());
          DistillRecord rec;
          rec.dataset = labels[d];
          rec.seed = cfg.seeds[s];
          rec.acc_original = res.trace.steps.front().test_accuracy;
          rec.acc_compressed = accuracy(student, data[d].test);
          DistillConfig dc = cfg.distill_config;
          dc.train.seed = distill_seed(rs);
          distill_train(model0, student, data[d].finetune, dc);
          rec.acc_distilled = accuracy(student, data[d].test);
          rec.params = param_count(student.config(), student.prune_mask());
          rec.size_gb = size_gb(rec.params);
          rec.accuracy_to_size_ratio = rec.acc_distilled / rec.size_gb;
          distilled[i] = rec;
          say(name + " distilled " + format_double(rec.acc_compressed, 6) + " -> " + format_double(rec.acc_distilled, 6));
        }
        traces[i] = std::move(res.trace);
      });
  if (!failures.empty()) report_failures(cfg.out_dir, failures);

  // Deterministic merge in grid order.
  ExperimentReport report;
  report.include_baseline = cfg.include_baseline;
  const std::size_t per_cell = nst + (cfg.randomization ? 2 * cfg.repeats : 0);
  for (std::size_t d = 0; d < nd; ++d)
    for (std::size_t k = 0; k < nst; ++k)
      for (std::size_t s = 0; s < ns; ++s) {
        const std::size_t i = (d * ns + s) * per_cell + k;
        report.runs.push_back({labels[d], cfg.seeds[s], traces[i]});
      }
  for (std::size_t c = 0; c < nd * ns; ++c) {
    const std::size_t d = c / ns, s = c % ns;
    const std::size_t first = c * per_cell;
    if (cfg.randomization) {
      RandomizationRecord rr;
      rr.dataset = labels[d];
      rr.seed = cfg.seeds[s];
      const std::size_t fk =
          static_cast<std::size_t>(std::find(cfg.strategies.begin(), cfg.strategies.end(), "forest_fusion") - cfg.strategies.begin());
      rr.forest = traces[first + fk];
      std::size_t i = first + nst;
      for (RandomizationResult* res : {&rr.random12, &rr.random10}) {
        res->kind = res == &rr.random12 ? "random12" : "random10";
        double sum = 0.0;
        for (std::size_t r = 0; r < cfg.repeats; ++r, ++i) {
          res->max_accuracies.push_back(max_accuracy(traces[i]).value);
          sum += res->max_accuracies.back();
          res->repeats.push_back(traces[i]);
        }
        res->mean_max_accuracy = sum / static_cast<double>(cfg.repeats);
      }
      report.randomization.push_back(std::move(rr));
    }
    for (std::size_t k = 0; k < per_cell; ++k)
      if (distilled[first + k]) report.distill.push_back(*distilled[first + k]);
  }

  write_file(cfg.out_dir / "results.json", to_json(report).dump(1) + "\n");
  emit_report(report, cfg.out_dir);
  return report;
}

}  // namespace prunefuse
