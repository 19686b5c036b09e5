#include <iostream>

#include <CLI11.hpp>

#include "forgetbench/cli.hpp"
#include "forgetbench/error.hpp"

using namespace forgetbench;

int main(int argc, char** argv) {
    CLI::App app{"Continual intent-classification benchmark: MIR, LwF and HAT over ANN, GRU and Transformer models"};
    app.require_subcommand(1);

    cli::PrepareArgs prepare;
    std::size_t subset = 0;
    auto* prep = app.add_subcommand("prepare", "Build task caches from a CLINC150 data_full.json");
    prep->add_option("--data", prepare.data, "CLINC150 JSON file (default: $FORGETBENCH_DATA)");
    prep->add_option("--seed", prepare.seed, "Label-partition and subsampling seed")->capture_default_str();
    prep->add_option("--tasks", prepare.tasks, "Number of label-disjoint tasks")->capture_default_str();
    prep->add_option("--out", prepare.out, "Cache directory")->required();
    prep->add_option("--subset-per-class", subset, "Keep at most N training utterances per intent");
    prep->add_option("--max-length", prepare.max_length, "Token sequence length")->capture_default_str();
    prep->add_option("--min-freq", prepare.min_freq, "Minimum token count for the vocabulary")->capture_default_str();

    cli::RunArgs run;
    std::string config, grid, data, out;
    auto* runc = app.add_subcommand("run", "Train one experiment cell or a grid of cells");
    auto* config_opt = runc->add_option("--config", config, "Experiment config JSON");
    auto* grid_opt = runc->add_option("--grid", grid, "Grid JSON (lists are crossed)");
    config_opt->excludes(grid_opt);
    runc->add_flag("--force", run.force, "Rerun cells that already have a complete record");
    runc->add_option("--jobs", run.jobs, "Cells trained concurrently")->capture_default_str();
    runc->add_option("--data", data, "Override data_dir of every cell");
    runc->add_option("--out", out, "Override out_dir of every cell");

    cli::ReportArgs report;
    std::vector<std::string> formats;
    auto* rep = app.add_subcommand("report", "Summarise complete runs into tables and curves");
    rep->add_option("--runs", report.runs, "Directory holding run directories")->required();
    rep->add_option("--out", report.out, "Report directory")->required();
    rep->add_option("--format", formats, "csv, json or svg; repeatable (default: all)");

    cli::SynthArgs synth;
    auto* syn = app.add_subcommand("synth", "Write a synthetic corpus in the CLINC150 JSON layout");
    syn->add_option("--out", synth.out, "Output JSON file")->required();
    syn->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
    syn->add_option("--domains", synth.domains, "Domains")->capture_default_str();
    syn->add_option("--intents-per-domain", synth.intents_per_domain, "Intents per domain")->capture_default_str();
    syn->add_option("--train-per-intent", synth.train_per_intent, "Training utterances per intent")
        ->capture_default_str();
    syn->add_option("--val-per-intent", synth.val_per_intent, "Validation utterances per intent")
        ->capture_default_str();
    syn->add_option("--test-per-intent", synth.test_per_intent, "Test utterances per intent")->capture_default_str();
    syn->add_option("--confusion", synth.confusion, "Keyword swap probability between sibling intents")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::kExitOk : cli::kExitConfig;
    }

    try {
        if (*prep) {
            if (subset > 0) {
                prepare.subset_per_class = subset;
            }
            cli::cmd_prepare(prepare, std::cerr);
        } else if (*runc) {
            if (!config.empty()) run.config = config;
            if (!grid.empty()) run.grid = grid;
            if (!data.empty()) run.data = data;
            if (!out.empty()) run.out = out;
            const auto summary = cli::cmd_run(run, std::cerr);
            std::cout << "cells run: " << summary.cells_run << ", skipped: " << summary.cells_skipped
                      << ", training steps: " << summary.training_steps << "\n";
        } else if (*rep) {
            if (!formats.empty()) {
                report.formats = formats;
            }
            cli::cmd_report(report, std::cerr);
        } else if (*syn) {
            cli::cmd_synth(synth, std::cerr);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_code(e);
    }
    return cli::kExitOk;
}
