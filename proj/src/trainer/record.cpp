#include <fstream>

#include <json.hpp>

#include "forgetbench/error.hpp"
#include "forgetbench/trainer.hpp"

namespace forgetbench::trainer {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw DataError("failed writing " + path.string());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return std::nullopt;
    }
    return j.at(key).get<double>();
}

}  // namespace

std::string metrics_to_json(const metrics::MetricSummary& s) {
    json j{{"aa", s.aa},
           {"af1", s.af1},
           {"bwt_acc", optional_json(s.bwt_acc)},
           {"bwt_f1", optional_json(s.bwt_f1)},
           {"avg_bwt_acc", optional_json(s.avg_bwt_acc)},
           {"avg_bwt_f1", optional_json(s.avg_bwt_f1)}};
    return j.dump(2) + "\n";
}

metrics::MetricSummary metrics_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        metrics::MetricSummary s;
        s.aa = j.at("aa").get<double>();
        s.af1 = j.at("af1").get<double>();
        s.bwt_acc = optional_from(j, "bwt_acc");
        s.bwt_f1 = optional_from(j, "bwt_f1");
        s.avg_bwt_acc = optional_from(j, "avg_bwt_acc");
        s.avg_bwt_f1 = optional_from(j, "avg_bwt_f1");
        return s;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed metrics JSON: ") + e.what());
    }
}

void write_run_record(const fs::path& dir, const RunRecord& record) {
    fs::create_directories(dir);
    fs::remove(dir / "metrics.json");
    write_file(dir / "config.json", record.config.to_json());
    write_file(dir / "r_acc.csv", record.matrix.to_csv(metrics::Metric::accuracy));
    write_file(dir / "r_f1.csv", record.matrix.to_csv(metrics::Metric::f1));
    std::string log;
    for (const auto& e : record.epochs) {
        log += json{{"event", "epoch"},
                    {"task", e.task},
                    {"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"improved", e.improved}}
                   .dump();
        log.push_back('\n');
    }
    for (const auto& t : record.tasks) {
        log += json{{"event", "task"},
                    {"task", t.task},
                    {"epochs_run", t.epochs_run},
                    {"best_epoch", t.best_epoch},
                    {"best_val_loss", t.best_val_loss},
                    {"restored_val_loss", t.restored_val_loss},
                    {"seconds", t.seconds},
                    {"steps", t.steps}}
                   .dump();
        log.push_back('\n');
    }
    log += json{{"event", "run"}, {"config_hash", record.config_hash}, {"training_steps", record.training_steps}}.dump();
    log.push_back('\n');
    write_file(dir / "log.jsonl", log);
    write_file(dir / "metrics.json", metrics_to_json(record.metrics));
}

bool run_complete(const fs::path& dir) { return fs::exists(dir / "metrics.json"); }

RunRecord read_run_record(const fs::path& dir) {
    if (!run_complete(dir)) {
        throw IncompleteRunError("run " + dir.string() + " is incomplete (no metrics.json)");
    }
    RunRecord record;
    record.config = ExperimentConfig::from_json(read_file(dir / "config.json"));
    record.config_hash = record.config.hash();
    record.matrix =
        metrics::PerformanceMatrix::from_csv(read_file(dir / "r_acc.csv"), read_file(dir / "r_f1.csv"));
    if (!record.matrix.complete()) {
        throw IncompleteRunError("run " + dir.string() + " has an incomplete performance matrix");
    }
    record.metrics = metrics_from_json(read_file(dir / "metrics.json"));
    if (fs::exists(dir / "log.jsonl")) {
        std::ifstream in(dir / "log.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            try {
                const json j = json::parse(line);
                const std::string event = j.value("event", "");
                if (event == "epoch") {
                    record.epochs.push_back(EpochLog{j.at("task").get<std::size_t>(), j.at("epoch").get<std::size_t>(),
                                                     j.at("train_loss").get<double>(), j.at("val_loss").get<double>(),
                                                     j.at("improved").get<bool>()});
                } else if (event == "task") {
                    TaskLog t;
                    t.task = j.at("task").get<std::size_t>();
                    t.epochs_run = j.at("epochs_run").get<std::size_t>();
                    t.best_epoch = j.at("best_epoch").get<std::size_t>();
                    t.best_val_loss = j.at("best_val_loss").get<double>();
                    t.restored_val_loss = j.at("restored_val_loss").get<double>();
                    t.seconds = j.at("seconds").get<double>();
                    t.steps = j.at("steps").get<std::size_t>();
                    record.tasks.push_back(t);
                } else if (event == "run") {
                    record.training_steps = j.at("training_steps").get<std::size_t>();
                }
            } catch (const json::exception& e) {
                throw DataError("malformed line in " + (dir / "log.jsonl").string() + ": " + e.what());
            }
        }
    }
    return record;
}

}  // namespace forgetbench::trainer
