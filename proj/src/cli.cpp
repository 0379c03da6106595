#include "prunefuse/cli.hpp"

#include <fstream>
#include <ostream>

#include "CLI11.hpp"
#include "prunefuse/error.hpp"
#include "prunefuse/format.hpp"

namespace prunefuse {

namespace {

Model load_for_cli(const std::filesystem::path& p) {
  require(std::filesystem::exists(p), ErrorKind::kConfig, "checkpoint '" + p.string() + "' does not exist");
  try {
    return load_checkpoint(p.string());
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, "checkpoint '" + p.string() + "': " + e.detail());
  }
}

bool same_family(ModelConfig a, ModelConfig b) {
  a.seed = b.seed = 0;
  return a == b;
}

void check_against_config(const ExperimentConfig& cfg, const Model& m, const std::filesystem::path& p) {
  require(same_family(m.config(), cfg.model_for(cfg.datasets.front(), 0)), ErrorKind::kConfig,
          "checkpoint '" + p.string() + "' does not match the configured model and dataset");
}

void write_text(const std::filesystem::path& p, const std::function<void(std::ostream&)>& body) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + p.string() + "' for writing");
  body(f);
  f.close();
  require(!f.fail(), ErrorKind::kIo, "write to '" + p.string() + "' failed");
}

}  // namespace

ExperimentReport cmd_run(const ExperimentConfig& cfg, std::ostream* progress) { return run_experiment(cfg, progress); }

SignalMatrix cmd_signals(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint) {
  cfg.validate();
  Model m = load_for_cli(checkpoint);
  check_against_config(cfg, m, checkpoint);
  require(!m.live_layers().empty(), ErrorKind::kConfig, "checkpoint '" + checkpoint.string() + "' has no live layer");
  const Corpus corpus = generate_corpus(cfg.datasets.front());
  const RunData data = run_data_for(cfg, corpus);
  return build_signal_matrix(m, data.probes);
}

DistillRecord cmd_distill(const ExperimentConfig& cfg, const std::filesystem::path& compressed,
                          const std::filesystem::path& teacher_path, double* initial_kd_loss) {
  cfg.validate();
  cfg.distill_config.validate();
  const Model teacher = load_for_cli(teacher_path);
  Model student = load_for_cli(compressed);
  require(same_family(teacher.config(), student.config()), ErrorKind::kConfig,
          "teacher '" + teacher_path.string() + "' and student '" + compressed.string() + "' differ in configuration");
  check_against_config(cfg, teacher, teacher_path);
  require(!student.live_layers().empty(), ErrorKind::kConfig, "student has no live layer");

  const Corpus corpus = generate_corpus(cfg.datasets.front());
  const RunData data = run_data_for(cfg, corpus);
  if (initial_kd_loss) {
    double s = 0.0;
    for (const TokenBatch& b : data.probes)
      s += kd_loss(forward(teacher, b).logits, forward(student, b).logits, cfg.distill_config.temperature);
    *initial_kd_loss = s / static_cast<double>(data.probes.size());
  }
  DistillRecord rec;
  rec.dataset = dataset_labels(cfg.datasets).front();
  rec.seed = cfg.seeds.front();
  rec.acc_original = accuracy(teacher, data.test);
  rec.acc_compressed = accuracy(student, data.test);
  DistillConfig dc = cfg.distill_config;
  dc.train.seed = distill_seed(run_seed(cfg.seeds.front(), 0));
  distill_train(teacher, student, data.finetune, dc);
  rec.acc_distilled = accuracy(student, data.test);
  rec.params = param_count(student.config(), student.prune_mask());
  rec.size_gb = size_gb(rec.params);
  rec.accuracy_to_size_ratio = rec.acc_distilled / rec.size_gb;
  return rec;
}

ExperimentReport cmd_randomization_test(ExperimentConfig cfg, std::ostream* progress) {
  cfg.strategies = {"forest_fusion"};
  cfg.randomization = true;
  cfg.distill = false;
  return run_experiment(cfg, progress);
}

ExperimentReport cmd_report(const std::filesystem::path& results, const std::filesystem::path& out_dir) {
  std::filesystem::path p = results;
  if (std::filesystem::is_directory(p)) p /= "results.json";
  std::ifstream f(p, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kConfig, "cannot read results file '" + p.string() + "'");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "results file '" + p.string() + "' is not valid JSON: " + e.what());
  }
  ExperimentReport r = report_from_json(j);
  emit_report(r, out_dir);
  return r;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-pruning laboratory: signal and fusion strategies, randomization tests, distillation", "prunefuse"};
  app.set_config("--config", "", "Config file (key = value)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  ExperimentConfig cfg;
  DatasetSpec ds;
  std::vector<std::uint64_t> dataset_seeds{0};
  std::string out_dir = cfg.out_dir.string();

  // Dataset.
  app.add_option("--dataset_name", ds.name, "Dataset label");
  app.add_option("--dataset_seed", dataset_seeds, "Corpus seeds, one dataset per seed")->delimiter(',');
  app.add_option("--n_classes", ds.n_classes);
  app.add_option("--vocab_size", ds.vocab_size);
  app.add_option("--n_train", ds.n_train);
  app.add_option("--n_val", ds.n_val);
  app.add_option("--n_test", ds.n_test);
  app.add_option("--keyword_strength", ds.keyword_strength);
  app.add_option("--noise_rate", ds.noise_rate);
  app.add_option("--keywords_per_class", ds.keywords_per_class);
  app.add_option("--min_len", ds.min_len);
  app.add_option("--max_len", ds.max_len);
  // Model.
  app.add_option("--d_model", cfg.model.d_model);
  app.add_option("--n_heads", cfg.model.n_heads);
  app.add_option("--d_ff", cfg.model.d_ff);
  app.add_option("--n_layers", cfg.model.n_layers);
  app.add_option("--max_seq_len", cfg.model.max_seq_len);
  // Grid.
  app.add_option("--strategy", cfg.strategies, "Strategies to run")->delimiter(',');
  app.add_option("--steps", cfg.steps, "Layers pruned per run");
  app.add_option("--seed", cfg.seeds, "Experiment seeds")->delimiter(',');
  app.add_option("--jobs", cfg.jobs, "Worker threads");
  app.add_option("--out-dir,--out_dir", out_dir, "Output directory")->envname("PRUNEFUSE_OUT");
  // Training.
  app.add_option("--base_epochs", cfg.base_train.epochs);
  app.add_option("--base_batch_size", cfg.base_train.batch_size);
  app.add_option("--base_lr", cfg.base_train.lr);
  app.add_option("--base_warmup_steps", cfg.base_train.warmup_steps);
  app.add_option("--finetune_size", cfg.finetune_size, "Training samples used for fine-tuning (0 = all)");
  app.add_option("--finetune_epochs", cfg.finetune.epochs);
  app.add_option("--finetune_batch_size", cfg.finetune.batch_size);
  app.add_option("--finetune_lr", cfg.finetune.lr);
  app.add_option("--probe_batches", cfg.probe_batches);
  app.add_option("--probe_batch_size", cfg.probe_batch_size);
  app.add_option("--eval_batch_size", cfg.eval_batch_size);
  app.add_option("--impact_size", cfg.impact_size, "Validation samples for impact measurement (0 = all)");
  // Fusion.
  app.add_option("--forest_trees", cfg.forest.n_trees);
  app.add_option("--forest_min_leaf", cfg.forest.min_leaf);
  app.add_option("--forest_feature_frac", cfg.forest.feature_frac);
  app.add_option("--ridge_lambda", cfg.ridge_lambda);
  // Randomization and distillation.
  app.add_option("--randomization", cfg.randomization, "Also run the Random12/Random10 tests");
  app.add_option("--repeats", cfg.repeats);
  app.add_option("--distill", cfg.distill, "Distill the best forest_fusion model");
  app.add_option("--distill_temperature", cfg.distill_config.temperature);
  app.add_option("--distill_alpha", cfg.distill_config.alpha);
  app.add_option("--distill_epochs", cfg.distill_config.train.epochs);
  app.add_option("--distill_batch_size", cfg.distill_config.train.batch_size);
  app.add_option("--distill_lr", cfg.distill_config.train.lr);
  // Output.
  app.add_option("--include_baseline", cfg.include_baseline, "Count the unpruned step in max accuracy");
  app.add_option("--save_checkpoints", cfg.save_checkpoints);
  app.add_option("--write_logs", cfg.write_logs);

  CLI::App* run = app.add_subcommand("run", "Run the dataset x strategy x seed grid")->fallthrough();
  CLI::App* signals = app.add_subcommand("signals", "Signal matrix of a checkpoint")->fallthrough();
  std::string checkpoint, signals_out;
  signals->add_option("--checkpoint", checkpoint)->required();
  signals->add_option("--output", signals_out, "CSV path (default <out-dir>/signals.csv)");
  CLI::App* distill = app.add_subcommand("distill", "Distill a compressed checkpoint from its teacher")->fallthrough();
  std::string compressed, teacher;
  distill->add_option("--compressed", compressed)->required();
  distill->add_option("--teacher", teacher)->required();
  CLI::App* rand = app.add_subcommand("randomization-test", "forest_fusion against Random12/Random10")->fallthrough();
  CLI::App* report = app.add_subcommand("report", "Re-emit report tables from results.json")->fallthrough();
  std::string results_in;
  report->add_option("--in", results_in, "results.json or the run directory holding it")->required();

  std::vector<std::string> argv_store{"prunefuse"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    cfg.out_dir = out_dir;
    cfg.datasets.clear();
    for (std::uint64_t s : dataset_seeds) {
      DatasetSpec d = ds;
      d.seed = s;
      cfg.datasets.push_back(d);
    }
    if (run->parsed()) {
      const ExperimentReport r = cmd_run(cfg, &err);
      out << "wrote " << r.runs.size() << " runs to " << cfg.out_dir.string() << '\n';
    } else if (signals->parsed()) {
      const SignalMatrix m = cmd_signals(cfg, checkpoint);
      const std::filesystem::path p = signals_out.empty() ? cfg.out_dir / "signals.csv" : std::filesystem::path(signals_out);
      write_text(p, [&](std::ostream& f) { write_signal_csv(f, m); });
      out << "wrote " << m.size() << " layers to " << p.string() << '\n';
    } else if (distill->parsed()) {
      double kd0 = 0.0;
      ExperimentReport r;
      r.distill.push_back(cmd_distill(cfg, compressed, teacher, &kd0));
      for (const Table& t : build_tables(r))
        if (t.name == "distill_report")
          write_text(cfg.out_dir / "distill_report.csv", [&](std::ostream& f) { write_csv(f, t); });
      const DistillRecord& d = r.distill.front();
      out << "initial_kd_loss " << format_double(kd0) << '\n'
          << "acc_original " << format_double(d.acc_original) << '\n'
          << "acc_compressed " << format_double(d.acc_compressed) << '\n'
          << "acc_distilled " << format_double(d.acc_distilled) << '\n';
    } else if (rand->parsed()) {
      const ExperimentReport r = cmd_randomization_test(cfg, &err);
      out << "wrote " << r.randomization.size() << " randomization tests to " << cfg.out_dir.string() << '\n';
    } else if (report->parsed()) {
      const ExperimentReport r = cmd_report(results_in, cfg.out_dir);
      out << "wrote report for " << r.runs.size() << " runs to " << cfg.out_dir.string() << '\n';
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::kConfig ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace prunefuse
