#pragma once
// Command surface: run, signals, distill, randomization-test, report.
// Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "prunefuse/experiment.hpp"

namespace prunefuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Library forms of the subcommands; they throw Error on failure.
ExperimentReport cmd_run(const ExperimentConfig& cfg, std::ostream* progress);
SignalMatrix cmd_signals(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);
DistillRecord cmd_distill(const ExperimentConfig& cfg, const std::filesystem::path& compressed,
                          const std::filesystem::path& teacher, double* initial_kd_loss = nullptr);
ExperimentReport cmd_randomization_test(ExperimentConfig cfg, std::ostream* progress);
ExperimentReport cmd_report(const std::filesystem::path& results, const std::filesystem::path& out_dir);

}  // namespace prunefuse
