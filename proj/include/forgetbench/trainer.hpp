#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetbench/data.hpp"
#include "forgetbench/metrics.hpp"
#include "forgetbench/models.hpp"
#include "forgetbench/optim.hpp"
#include "forgetbench/strategies.hpp"

namespace forgetbench::trainer {

struct Hyperparameters {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 30;
    std::size_t patience = 3;
    OptimizerKind optimizer = OptimizerKind::adam;

    std::size_t embed_dim = 128;
    std::size_t hidden_dim = 256;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    double dropout = 0.1;

    std::size_t buffer_capacity = 500;
    // Replayed items per step; unset means batch_size.
    std::optional<std::size_t> k;
    // 0 scores the whole buffer.
    std::size_t n_candidates = 0;
    double eta_virtual = 1e-3;
    double temperature = 2.0;
    double alpha_lwf = 1.0;
    bool lwf_seen_classes_only = false;
    double hat_scale = 50.0;
};

enum class RunMode { sequential, joint };

// One experiment cell.
//
// JSON form (every key optional except architecture):
//   {"architecture": "ann", "strategies": ["mir", "hat"], "seed": 42,
//    "tasks": 10, "subset_per_class": 50, "data_dir": "...", "out_dir": "...",
//    "checkpoints": true, "hyperparameters": {"learning_rate": 0.001, ...}}
// strategies may be [] or ["naive"] for naive fine-tuning and ["joint"] for
// the joint baseline. Unknown keys are rejected.
struct ExperimentConfig {
    models::Architecture architecture = models::Architecture::ann;
    RunMode mode = RunMode::sequential;
    strategies::StrategySet strategies;
    Hyperparameters hyper;
    std::uint64_t seed = 42;
    std::size_t tasks = 10;
    std::optional<std::size_t> subset_per_class = 50;
    std::size_t max_length = data::kDefaultMaxLength;
    // A prepared cache directory or a raw CLINC150 JSON file; empty means the
    // FORGETBENCH_DATA environment variable.
    std::string data_dir;
    std::string out_dir = "runs";
    bool checkpoints = true;

    // "joint" or the strategy set name.
    std::string strategy_name() const;
    // <architecture>-<strategy name>-seed<seed>
    std::string cell_name() const;

    // Throws ConfigError on unknown keys, wrong types or invalid values.
    static ExperimentConfig from_json(const std::string& text);
    std::string to_json() const;
    // FNV-1a of the canonical JSON without data_dir and out_dir.
    std::string hash() const;
    void validate() const;

    models::ModelConfig model_config(std::size_t vocab_size, std::size_t num_classes) const;
    strategies::StrategyConfig strategy_config() const;
};

// A grid file holds the same keys as a config, except that architecture,
// strategies (a list of lists) and seed may be lists; cells are their cross
// product in architecture, strategies, seed order.
std::vector<ExperimentConfig> expand_grid(const std::string& text);

// Resolves data_dir (or FORGETBENCH_DATA) and returns task data: a cache
// directory is read as is and must match tasks and subset_per_class; a JSON
// file is prepared in memory with the config's seed.
data::PreparedData load_data(const ExperimentConfig& config);

class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience);

    // Records one epoch's validation loss; true when it strictly improves on
    // the best so far.
    bool update(double val_loss);
    bool should_stop() const { return patience_ > 0 && since_best_ >= patience_; }
    std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
    double best_loss() const { return best_loss_; }
    std::size_t epochs() const { return epochs_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    double best_loss_ = 0.0;
};

struct EarlyStopDecision {
    bool stopped = false;
    std::size_t stop_epoch = 0;  // last epoch run
    std::size_t best_epoch = 0;
};

// Replays a validation-loss history through EarlyStopping.
EarlyStopDecision early_stop_controller(std::span<const double> val_losses, std::size_t patience);

struct Evaluation {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<int> predictions;
};

// Argmax over every output class, no dropout. Macro-F1 averages over the
// classes present in the labels or the predictions. Throws DataError for an
// empty set.
Evaluation evaluate(const models::Model& model, std::span<const data::Utterance> test, const models::Gates* gates);

std::vector<strategies::Sample> as_samples(std::span<const data::Utterance> items);

struct EpochLog {
    std::size_t task = 0;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    bool improved = false;
};

struct TaskLog {
    std::size_t task = 0;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    // Validation loss after restoring the best epoch.
    double restored_val_loss = 0.0;
    double seconds = 0.0;
    std::size_t steps = 0;
};

struct RunRecord {
    ExperimentConfig config;
    std::string config_hash;
    metrics::PerformanceMatrix matrix{1};
    metrics::MetricSummary metrics;
    std::vector<EpochLog> epochs;
    std::vector<TaskLog> tasks;
    // Optimizer steps taken by this invocation (0 when everything came from
    // checkpoints).
    std::size_t training_steps = 0;
};

struct RunOptions {
    // Where checkpoints go and are resumed from; nothing is written when unset.
    std::optional<std::filesystem::path> record_dir;
    bool resume = true;
    std::function<void(const std::string&)> progress;
};

// Sequential training over all tasks (strategy set may be empty). Row t of the
// performance matrix is filled after task t.
RunRecord train_sequential(const ExperimentConfig& config, const data::PreparedData& data,
                           const RunOptions& options = {});
// One model on the union of the task splits; the result is a 1x1 matrix of the
// pooled test scores.
RunRecord train_joint(const ExperimentConfig& config, const data::PreparedData& data, const RunOptions& options = {});
RunRecord run_experiment(const ExperimentConfig& config, const data::PreparedData& data,
                         const RunOptions& options = {});

// Run directory: config.json, r_acc.csv, r_f1.csv, log.jsonl, checkpoints/,
// and metrics.json, written last; a run without metrics.json is incomplete.
void write_run_record(const std::filesystem::path& dir, const RunRecord& record);
// Throws IncompleteRunError when metrics.json is missing.
RunRecord read_run_record(const std::filesystem::path& dir);
bool run_complete(const std::filesystem::path& dir);

std::string metrics_to_json(const metrics::MetricSummary& summary);
metrics::MetricSummary metrics_from_json(const std::string& text);

}  // namespace forgetbench::trainer
