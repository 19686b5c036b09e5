#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forgetbench/metrics.hpp"

namespace forgetbench::report {

struct CellSummary {
    std::string cell;  // run directory name
    std::string architecture;
    std::string strategies;  // "naive", "joint", "mir+hat", ...
    std::uint64_t seed = 0;
    std::size_t tasks = 0;
    metrics::MetricSummary metrics;  // as stored in metrics.json
    std::vector<metrics::CurvePoint> curve;
};

struct BestRow {
    std::string architecture;
    std::string strategies;
    std::string cell;
    double aa = 0.0;
    double af1 = 0.0;
    std::optional<double> avg_bwt_acc;
    std::optional<double> avg_bwt_f1;
};

struct ReportBundle {
    std::vector<CellSummary> cells;  // sorted by cell name
    std::vector<BestRow> best;       // one per architecture, sorted by architecture
    std::vector<std::string> skipped;  // incomplete runs, with the reason
};

// Reads every run directory directly under `runs_dir` (a directory holding
// config.json). Incomplete runs are listed in `skipped`. Throws
// IncompleteRunError when no complete run is found.
ReportBundle collect(const std::filesystem::path& runs_dir);

// Highest AA per architecture among continual-learning cells (at least one
// strategy; naive and joint excluded), ties broken by AF1, then by cell name.
std::vector<BestRow> best_per_architecture(const std::vector<CellSummary>& cells);

std::string summary_csv(const ReportBundle& bundle);
std::string summary_json(const ReportBundle& bundle);
std::string best_csv(const ReportBundle& bundle);
// Line chart of AA, AF1 and the running averaged BWT (accuracy and F1) over
// the task index.
std::string curve_svg(const CellSummary& cell);

enum class Format { csv, json, svg };
Format parse_format(const std::string& name);

// Writes summary.csv and best_per_architecture.csv (csv), summary.json (json),
// or curves/<cell>.svg (svg). Returns the files written.
std::vector<std::filesystem::path> write(const ReportBundle& bundle, const std::filesystem::path& out_dir,
                                         const std::vector<Format>& formats);

}  // namespace forgetbench::report
