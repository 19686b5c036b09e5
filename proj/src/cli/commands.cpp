#include "forgetbench/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <thread>
#include <tuple>

#include "forgetbench/error.hpp"
#include "forgetbench/synthetic.hpp"
#include "forgetbench/trainer.hpp"

namespace forgetbench::cli {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError(std::string("cannot open ") + what + " " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

using DataKey = std::tuple<std::string, std::uint64_t, std::size_t, std::optional<std::size_t>, std::size_t>;

DataKey data_key(const trainer::ExperimentConfig& c) {
    std::string source = c.data_dir;
    if (source.empty()) {
        const char* env = std::getenv("FORGETBENCH_DATA");
        source = env == nullptr ? "" : env;
    }
    // A prepared cache does not depend on the seed of the cell.
    const bool cache = !source.empty() && fs::is_directory(source);
    return {source, cache ? 0 : c.seed, c.tasks, c.subset_per_class, cache ? 0 : c.max_length};
}

}  // namespace

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) {
        return kExitConfig;
    }
    if (dynamic_cast<const DataError*>(&e) != nullptr) {
        return kExitData;
    }
    if (dynamic_cast<const IncompleteRunError*>(&e) != nullptr) {
        return kExitIncomplete;
    }
    return kExitFailure;
}

void cmd_prepare(const PrepareArgs& args, std::ostream& log) {
    std::string source = args.data;
    if (source.empty()) {
        const char* env = std::getenv("FORGETBENCH_DATA");
        if (env == nullptr || *env == '\0') {
            throw ConfigError("no --data given and FORGETBENCH_DATA is not set");
        }
        source = env;
    }
    if (args.out.empty()) {
        throw ConfigError("--out is required");
    }
    data::PrepareOptions opts;
    opts.seed = args.seed;
    opts.tasks = args.tasks;
    opts.max_length = args.max_length;
    opts.min_freq = args.min_freq;
    opts.subset_per_class = args.subset_per_class;
    const data::PreparedData prepared = data::prepare(data::load_clinc150(source), opts);
    for (const auto& w : prepared.warnings) {
        log << "warning: " << w << "\n";
    }
    data::write_cache(prepared, args.out);
    log << "prepared " << prepared.tasks.size() << " tasks, vocabulary " << prepared.vocab.size() << " -> "
        << args.out.string() << "\n";
}

RunSummary cmd_run(const RunArgs& args, std::ostream& log) {
    if (args.config.has_value() == args.grid.has_value()) {
        throw ConfigError("give exactly one of --config and --grid");
    }
    std::vector<trainer::ExperimentConfig> cells;
    if (args.config) {
        cells.push_back(trainer::ExperimentConfig::from_json(read_file(*args.config, "config")));
    } else {
        cells = trainer::expand_grid(read_file(*args.grid, "grid"));
    }
    for (auto& c : cells) {
        if (args.data) {
            c.data_dir = *args.data;
        }
        if (args.out) {
            c.out_dir = *args.out;
        }
    }

    RunSummary summary;
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const fs::path dir = fs::path(cells[i].out_dir) / cells[i].cell_name();
        summary.run_dirs.push_back(dir);
        if (trainer::run_complete(dir)) {
            const auto existing = trainer::ExperimentConfig::from_json(read_file(dir / "config.json", "config"));
            if (!args.force) {
                if (existing.hash() != cells[i].hash()) {
                    throw ConfigError("run " + dir.string() +
                                      " holds a complete record of a different config; use --force to replace it");
                }
                log << cells[i].cell_name() << ": complete, skipped\n";
                ++summary.cells_skipped;
                continue;
            }
        }
        if (args.force && fs::exists(dir)) {
            fs::remove_all(dir);
        }
        pending.push_back(i);
    }

    std::map<DataKey, std::shared_ptr<const data::PreparedData>> datasets;
    for (std::size_t i : pending) {
        const DataKey key = data_key(cells[i]);
        if (datasets.count(key) == 0) {
            datasets[key] = std::make_shared<const data::PreparedData>(trainer::load_data(cells[i]));
        }
    }

    std::mutex mutex;
    std::size_t next = 0;
    std::exception_ptr failure;
    auto worker = [&]() {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mutex);
                if (next >= pending.size() || failure) {
                    return;
                }
                i = pending[next++];
            }
            const auto& cfg = cells[i];
            const fs::path dir = summary.run_dirs[i];
            try {
                fs::create_directories(dir);
                trainer::RunOptions options;
                options.record_dir = dir;
                options.progress = [&](const std::string& message) {
                    std::lock_guard<std::mutex> lock(mutex);
                    log << message << "\n" << std::flush;
                };
                const auto& prepared = *datasets.at(data_key(cfg));
                const trainer::RunRecord record = trainer::run_experiment(cfg, prepared, options);
                trainer::write_run_record(dir, record);
                std::lock_guard<std::mutex> lock(mutex);
                ++summary.cells_run;
                summary.training_steps += record.training_steps;
                log << cfg.cell_name() << ": done, AA " << record.metrics.aa << "\n" << std::flush;
            } catch (...) {
                std::lock_guard<std::mutex> lock(mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(args.jobs, pending.size()));
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t j = 0; j < jobs; ++j) {
            threads.emplace_back(worker);
        }
        for (auto& t : threads) {
            t.join();
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return summary;
}

report::ReportBundle cmd_report(const ReportArgs& args, std::ostream& log) {
    std::vector<report::Format> formats;
    for (const auto& f : args.formats) {
        formats.push_back(report::parse_format(f));
    }
    report::ReportBundle bundle = report::collect(args.runs);
    for (const auto& s : bundle.skipped) {
        log << "warning: skipped incomplete run " << s << "\n";
    }
    const auto files = report::write(bundle, args.out, formats);
    log << "report: " << bundle.cells.size() << " cells, " << files.size() << " files -> " << args.out.string()
        << "\n";
    return bundle;
}

void cmd_synth(const SynthArgs& args, std::ostream& log) {
    if (args.out.empty()) {
        throw ConfigError("--out is required");
    }
    data::SyntheticCorpusOptions opts;
    opts.seed = args.seed;
    opts.domains = args.domains;
    opts.intents_per_domain = args.intents_per_domain;
    opts.train_per_intent = args.train_per_intent;
    opts.val_per_intent = args.val_per_intent;
    opts.test_per_intent = args.test_per_intent;
    opts.confusion = args.confusion;
    const std::string text = data::generate_clinc_like_json(opts);
    if (args.out.has_parent_path()) {
        fs::create_directories(args.out.parent_path());
    }
    std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text)) {
        throw DataError("cannot write " + args.out.string());
    }
    log << "wrote " << opts.domains * opts.intents_per_domain << " intents -> " << args.out.string() << "\n";
}

}  // namespace forgetbench::cli
