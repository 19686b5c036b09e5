#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "forgetbench/report.hpp"

// Implementation of the forgetbench subcommands; tools/forgetbench.cpp only
// parses arguments.
namespace forgetbench::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitIncomplete = 4;

// ConfigError -> 2, DataError -> 3, IncompleteRunError -> 4, anything else -> 1.
int exit_code(const std::exception& e);

struct PrepareArgs {
    std::string data;  // empty: FORGETBENCH_DATA
    std::uint64_t seed = 42;
    std::size_t tasks = 10;
    std::filesystem::path out;
    std::optional<std::size_t> subset_per_class;
    std::size_t max_length = 64;
    std::size_t min_freq = 1;
};
void cmd_prepare(const PrepareArgs& args, std::ostream& log);

struct RunArgs {
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> grid;
    bool force = false;
    std::size_t jobs = 1;
    // Override data_dir / out_dir of every cell.
    std::optional<std::string> data;
    std::optional<std::string> out;
};

struct RunSummary {
    std::size_t cells_run = 0;
    std::size_t cells_skipped = 0;
    std::size_t training_steps = 0;
    std::vector<std::filesystem::path> run_dirs;
};

// Runs each cell into <out_dir>/<cell name>. A cell whose directory already
// holds a complete record of the same config is skipped unless `force`; a
// complete record of a different config is a ConfigError unless `force`.
RunSummary cmd_run(const RunArgs& args, std::ostream& log);

struct ReportArgs {
    std::filesystem::path runs;
    std::filesystem::path out;
    std::vector<std::string> formats = {"csv", "json", "svg"};
};
report::ReportBundle cmd_report(const ReportArgs& args, std::ostream& log);

struct SynthArgs {
    std::filesystem::path out;
    std::uint64_t seed = 7;
    std::size_t domains = 10;
    std::size_t intents_per_domain = 15;
    std::size_t train_per_intent = 100;
    std::size_t val_per_intent = 20;
    std::size_t test_per_intent = 30;
    double confusion = 0.08;
};
void cmd_synth(const SynthArgs& args, std::ostream& log);

}  // namespace forgetbench::cli
