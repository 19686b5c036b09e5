#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "forgetbench/error.hpp"
#include "forgetbench/ops.hpp"
#include "forgetbench/trainer.hpp"

namespace forgetbench::trainer {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Stream identifiers for Rng::derive.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kShuffleStream = 0x5f1e;
constexpr std::uint64_t kDropoutStream = 0xd7;
constexpr std::uint64_t kMirStream = 0x313;
constexpr std::uint64_t kLearnerStream = 0x1ea7;

std::string task_dir_name(std::size_t task) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "task_%02zu", task);
    return buf;
}

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

void report(const RunOptions& options, const std::string& message) {
    if (options.progress) {
        options.progress(message);
    }
}

json epoch_json(const EpochLog& e) {
    return json{{"task", e.task},
                {"epoch", e.epoch},
                {"train_loss", e.train_loss},
                {"val_loss", e.val_loss},
                {"improved", e.improved}};
}

EpochLog epoch_from_json(const json& j) {
    return EpochLog{j.at("task").get<std::size_t>(), j.at("epoch").get<std::size_t>(),
                    j.at("train_loss").get<double>(), j.at("val_loss").get<double>(), j.at("improved").get<bool>()};
}

json task_json(const TaskLog& t) {
    return json{{"task", t.task},
                {"epochs_run", t.epochs_run},
                {"best_epoch", t.best_epoch},
                {"best_val_loss", t.best_val_loss},
                {"restored_val_loss", t.restored_val_loss},
                {"seconds", t.seconds},
                {"steps", t.steps}};
}

TaskLog task_from_json(const json& j) {
    TaskLog t;
    t.task = j.at("task").get<std::size_t>();
    t.epochs_run = j.at("epochs_run").get<std::size_t>();
    t.best_epoch = j.at("best_epoch").get<std::size_t>();
    t.best_val_loss = j.at("best_val_loss").get<double>();
    t.restored_val_loss = j.at("restored_val_loss").get<double>();
    t.seconds = j.at("seconds").get<double>();
    t.steps = j.at("steps").get<std::size_t>();
    return t;
}

std::vector<std::vector<double>> copy_values(const std::vector<Tensor>& tensors) {
    std::vector<std::vector<double>> out;
    out.reserve(tensors.size());
    for (const Tensor& t : tensors) {
        out.emplace_back(t.data().begin(), t.data().end());
    }
    return out;
}

void paste_values(std::vector<Tensor>& tensors, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        std::copy(values[i].begin(), values[i].end(), tensors[i].mutable_data().begin());
    }
}

struct TaskOutcome {
    TaskLog log;
    std::vector<EpochLog> epochs;
};

// Epochs over one training split with early stopping on the validation loss;
// leaves the learner at the best epoch's parameters.
TaskOutcome fit_task(strategies::Learner& learner, const ExperimentConfig& config, std::size_t task,
                     std::span<const data::Utterance> train, std::span<const data::Utterance> val) {
    if (train.empty()) {
        throw DataError("task " + std::to_string(task) + " has no training examples");
    }
    if (val.empty()) {
        throw DataError("task " + std::to_string(task) + " has no validation examples");
    }
    const auto start = std::chrono::steady_clock::now();
    const auto train_samples = as_samples(train);
    const auto val_samples = as_samples(val);
    const std::size_t batch_size = config.hyper.batch_size;

    TaskOutcome outcome;
    EarlyStopping stopper(config.hyper.patience);
    std::vector<Tensor> trainable = learner.trainable();
    std::vector<std::vector<double>> best = copy_values(trainable);
    std::vector<std::size_t> order(train_samples.size());
    std::vector<strategies::Sample> batch;
    batch.reserve(batch_size);
    for (std::size_t epoch = 1; epoch <= config.hyper.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        Rng shuffle(Rng::derive(config.seed, {kShuffleStream, task, epoch}));
        shuffle.shuffle(order);
        Rng dropout(Rng::derive(config.seed, {kDropoutStream, task, epoch}));
        Rng mir(Rng::derive(config.seed, {kMirStream, task, epoch}));

        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(order.size(), begin + batch_size);
            batch.clear();
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(train_samples[order[i]]);
            }
            const auto step = learner.step(batch, dropout, mir);
            loss_sum += step.loss * static_cast<double>(batch.size());
            ++outcome.log.steps;
        }
        const double val_loss = learner.evaluation_loss(val_samples);
        const bool improved = stopper.update(val_loss);
        if (improved) {
            best = copy_values(trainable);
        }
        outcome.epochs.push_back(
            EpochLog{task, epoch, loss_sum / static_cast<double>(order.size()), val_loss, improved});
        if (stopper.should_stop()) {
            break;
        }
    }
    paste_values(trainable, best);
    outcome.log.task = task;
    outcome.log.epochs_run = stopper.epochs();
    outcome.log.best_epoch = stopper.best_epoch();
    outcome.log.best_val_loss = stopper.best_loss();
    outcome.log.restored_val_loss = learner.evaluation_loss(val_samples);
    outcome.log.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return outcome;
}

// ------------------------------------------------------------------ checkpoints

struct Checkpoint {
    std::size_t task = 0;
    std::vector<std::vector<double>> acc_rows;
    std::vector<std::vector<double>> f1_rows;
    std::vector<EpochLog> epochs;
    std::vector<TaskLog> tasks;
};

void save_checkpoint(const fs::path& dir, const ExperimentConfig& config, const strategies::Learner& learner,
                     const models::Model& model, const metrics::PerformanceMatrix& matrix,
                     const std::vector<EpochLog>& epochs, const std::vector<TaskLog>& tasks, std::size_t task) {
    const fs::path td = dir / "checkpoints" / task_dir_name(task);
    fs::create_directories(td);
    fs::remove(td / "state.json");
    models::save_tensors(td / "model.fbtm", models::named_parameters(model));
    json state{{"task", task}, {"config_hash", config.hash()}};
    if (const auto* teacher = learner.teacher()) {
        models::save_tensors(td / "teacher.fbtm", models::named_parameters(teacher->model()));
        state["teacher_task"] = teacher->snapshot_task();
    }
    if (const auto* hat = learner.hat()) {
        models::NamedTensors tensors;
        const auto& masks = hat->cumulative_masks();
        for (std::size_t l = 0; l < masks.size(); ++l) {
            tensors.emplace_back("mask." + hat->layers()[l].id, Tensor::vector(masks[l]));
        }
        for (std::size_t t : hat->tasks()) {
            const auto& e = hat->embeddings(t);
            for (std::size_t l = 0; l < e.size(); ++l) {
                tensors.emplace_back("task" + std::to_string(t) + "." + hat->layers()[l].id, e[l].detach());
            }
        }
        models::save_tensors(td / "hat.fbtm", tensors);
        state["hat_tasks"] = hat->tasks();
    }
    if (learner.strategies().mir) {
        json items = json::array();
        for (const auto& item : learner.buffer().items()) {
            items.push_back(json{{"token_ids", item.token_ids},
                                 {"mask", item.attention_mask},
                                 {"label", item.label},
                                 {"task", item.task_index},
                                 {"sequence", item.sequence}});
        }
        state["buffer"] = json{{"seen", learner.buffer().seen_count()}, {"items", std::move(items)}};
    }
    state["seen_classes"] = learner.seen_classes();
    json acc = json::array();
    json f1 = json::array();
    for (std::size_t i = 1; i <= task; ++i) {
        json ra = json::array();
        json rf = json::array();
        for (std::size_t j = 1; j <= i; ++j) {
            ra.push_back(matrix.get(metrics::Metric::accuracy, i, j));
            rf.push_back(matrix.get(metrics::Metric::f1, i, j));
        }
        acc.push_back(ra);
        f1.push_back(rf);
    }
    state["r_acc"] = acc;
    state["r_f1"] = f1;
    json ep = json::array();
    for (const auto& e : epochs) {
        ep.push_back(epoch_json(e));
    }
    json tk = json::array();
    for (const auto& t : tasks) {
        tk.push_back(task_json(t));
    }
    state["epochs"] = ep;
    state["tasks"] = tk;
    // Written last: a checkpoint without state.json is ignored on resume.
    write_file(td / "state.json", state.dump());
}

// Latest complete checkpoint made with the same config, restored into the
// learner and model. Returns nothing when there is none.
std::optional<Checkpoint> load_checkpoint(const fs::path& dir, const ExperimentConfig& config,
                                          strategies::Learner& learner, models::Model& model) {
    const fs::path root = dir / "checkpoints";
    if (!fs::is_directory(root)) {
        return std::nullopt;
    }
    for (std::size_t task = config.tasks; task >= 1; --task) {
        const fs::path td = root / task_dir_name(task);
        if (!fs::exists(td / "state.json")) {
            continue;
        }
        json state;
        try {
            state = json::parse(read_file(td / "state.json"));
        } catch (const json::exception&) {
            continue;
        }
        if (state.value("config_hash", std::string()) != config.hash()) {
            continue;
        }
        Checkpoint cp;
        cp.task = task;
        models::load_parameters(model, models::load_tensors(td / "model.fbtm"));
        if (state.contains("teacher_task")) {
            learner.restore_teacher(models::load_tensors(td / "teacher.fbtm"),
                                    state.at("teacher_task").get<std::size_t>());
        }
        if (auto* hat = learner.hat()) {
            const auto tensors = models::load_tensors(td / "hat.fbtm");
            auto find = [&](const std::string& name) {
                for (const auto& [n, t] : tensors) {
                    if (n == name) {
                        return std::vector<double>(t.data().begin(), t.data().end());
                    }
                }
                throw DataError("HAT checkpoint lacks " + name);
            };
            std::vector<std::vector<double>> masks;
            for (const auto& layer : hat->layers()) {
                masks.push_back(find("mask." + layer.id));
            }
            hat->set_cumulative_masks(std::move(masks));
            for (std::size_t t : state.at("hat_tasks").get<std::vector<std::size_t>>()) {
                std::vector<std::vector<double>> values;
                for (const auto& layer : hat->layers()) {
                    values.push_back(find("task" + std::to_string(t) + "." + layer.id));
                }
                hat->set_embeddings(t, std::move(values));
            }
        }
        if (state.contains("buffer")) {
            std::vector<strategies::ReplayItem> items;
            for (const json& j : state.at("buffer").at("items")) {
                items.push_back(strategies::ReplayItem{j.at("token_ids").get<std::vector<int>>(),
                                                       j.at("mask").get<std::vector<int>>(), j.at("label").get<int>(),
                                                       j.at("task").get<std::size_t>(),
                                                       j.at("sequence").get<std::uint64_t>()});
            }
            learner.buffer().restore(std::move(items), state.at("buffer").at("seen").get<std::uint64_t>());
        }
        learner.restore_seen_classes(state.at("seen_classes").get<std::vector<int>>());
        cp.acc_rows = state.at("r_acc").get<std::vector<std::vector<double>>>();
        cp.f1_rows = state.at("r_f1").get<std::vector<std::vector<double>>>();
        for (const json& e : state.at("epochs")) {
            cp.epochs.push_back(epoch_from_json(e));
        }
        for (const json& t : state.at("tasks")) {
            cp.tasks.push_back(task_from_json(t));
        }
        return cp;
    }
    return std::nullopt;
}

std::unique_ptr<models::Model> make_model(const ExperimentConfig& config, const data::PreparedData& data) {
    return models::build_model(config.model_config(data.vocab.size(), data.labels.size()),
                               Rng::derive(config.seed, {kInitStream}));
}

void check_tasks(const ExperimentConfig& config, const data::PreparedData& data) {
    if (data.tasks.size() != config.tasks) {
        throw ConfigError("data holds " + std::to_string(data.tasks.size()) + " tasks, config asks for " +
                          std::to_string(config.tasks));
    }
}

}  // namespace

// ------------------------------------------------------------------ early stopping

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {}

bool EarlyStopping::update(double val_loss) {
    ++epochs_;
    if (best_epoch_ == 0 || val_loss < best_loss_) {
        best_loss_ = val_loss;
        best_epoch_ = epochs_;
        since_best_ = 0;
        return true;
    }
    ++since_best_;
    return false;
}

EarlyStopDecision early_stop_controller(std::span<const double> val_losses, std::size_t patience) {
    EarlyStopping stopper(patience);
    EarlyStopDecision d;
    for (double loss : val_losses) {
        stopper.update(loss);
        d.stop_epoch = stopper.epochs();
        if (stopper.should_stop()) {
            d.stopped = true;
            break;
        }
    }
    d.best_epoch = stopper.best_epoch();
    return d;
}

// ------------------------------------------------------------------ evaluation

std::vector<strategies::Sample> as_samples(std::span<const data::Utterance> items) {
    std::vector<strategies::Sample> out;
    out.reserve(items.size());
    for (const auto& u : items) {
        out.push_back(strategies::Sample{u.token_ids, u.attention_mask, u.label_id});
    }
    return out;
}

Evaluation evaluate(const models::Model& model, std::span<const data::Utterance> test, const models::Gates* gates) {
    if (test.empty()) {
        throw DataError("cannot evaluate on an empty test set");
    }
    Evaluation ev;
    std::vector<int> labels;
    labels.reserve(test.size());
    ev.predictions.reserve(test.size());
    models::ForwardOptions options;
    options.gates = gates;
    for (const auto& u : test) {
        Tape tape = Tape::inference();
        const Tensor logits = model.forward(tape, u.token_ids, u.attention_mask, options);
        ev.predictions.push_back(static_cast<int>(ops::argmax(logits.data())));
        labels.push_back(u.label_id);
    }
    ev.accuracy = metrics::accuracy(ev.predictions, labels);
    ev.macro_f1 = metrics::macro_f1(ev.predictions, labels);
    return ev;
}

// ------------------------------------------------------------------ runs

RunRecord train_sequential(const ExperimentConfig& config, const data::PreparedData& data,
                           const RunOptions& options) {
    config.validate();
    if (config.mode != RunMode::sequential) {
        throw ConfigError("train_sequential needs a sequential config");
    }
    check_tasks(config, data);
    auto model = make_model(config, data);
    strategies::Learner learner(*model, config.strategies, config.strategy_config(), config.hyper.optimizer,
                                config.hyper.learning_rate, Rng::derive(config.seed, {kLearnerStream}));

    RunRecord record;
    record.config = config;
    record.config_hash = config.hash();
    record.matrix = metrics::PerformanceMatrix(config.tasks);

    std::size_t first_task = 1;
    if (options.record_dir && options.resume) {
        if (auto cp = load_checkpoint(*options.record_dir, config, learner, *model)) {
            for (std::size_t i = 0; i < cp->acc_rows.size(); ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    record.matrix.set(i + 1, j + 1, cp->acc_rows[i][j], cp->f1_rows[i][j]);
                }
            }
            record.epochs = std::move(cp->epochs);
            record.tasks = std::move(cp->tasks);
            first_task = cp->task + 1;
            report(options, config.cell_name() + ": resumed after task " + std::to_string(cp->task));
        }
    }

    for (std::size_t t = first_task; t <= config.tasks; ++t) {
        const auto& task = data.tasks[t - 1];
        learner.begin_task(t, task.label_set);
        TaskOutcome outcome = fit_task(learner, config, t, task.train, task.val);
        record.training_steps += outcome.log.steps;
        for (std::size_t j = 1; j <= t; ++j) {
            const auto gates = learner.eval_gates(j);
            const Evaluation ev = evaluate(*model, data.tasks[j - 1].test, gates ? &*gates : nullptr);
            record.matrix.set(t, j, ev.accuracy, ev.macro_f1);
        }
        learner.end_task();
        record.epochs.insert(record.epochs.end(), outcome.epochs.begin(), outcome.epochs.end());
        record.tasks.push_back(outcome.log);
        if (options.record_dir && config.checkpoints) {
            save_checkpoint(*options.record_dir, config, learner, *model, record.matrix, record.epochs, record.tasks,
                            t);
        }
        char line[160];
        std::snprintf(line, sizeof(line), "%s: task %zu/%zu, %zu epochs, R[%zu][%zu] acc %.4f", config.cell_name().c_str(),
                      t, config.tasks, outcome.log.epochs_run, t, t,
                      record.matrix.get(metrics::Metric::accuracy, t, t));
        report(options, line);
    }
    record.metrics = metrics::summarize(record.matrix);
    return record;
}

RunRecord train_joint(const ExperimentConfig& config, const data::PreparedData& data, const RunOptions& options) {
    config.validate();
    if (config.mode != RunMode::joint) {
        throw ConfigError("train_joint needs a joint config");
    }
    check_tasks(config, data);
    std::vector<data::Utterance> train, val, test;
    std::vector<int> labels;
    for (const auto& task : data.tasks) {
        train.insert(train.end(), task.train.begin(), task.train.end());
        val.insert(val.end(), task.val.begin(), task.val.end());
        test.insert(test.end(), task.test.begin(), task.test.end());
        labels.insert(labels.end(), task.label_set.begin(), task.label_set.end());
    }
    auto model = make_model(config, data);
    strategies::Learner learner(*model, strategies::StrategySet{}, config.strategy_config(), config.hyper.optimizer,
                                config.hyper.learning_rate, Rng::derive(config.seed, {kLearnerStream}));
    learner.begin_task(1, labels);
    TaskOutcome outcome = fit_task(learner, config, 1, train, val);
    const Evaluation ev = evaluate(*model, test, nullptr);

    RunRecord record;
    record.config = config;
    record.config_hash = config.hash();
    record.matrix = metrics::PerformanceMatrix(1);
    record.matrix.set(1, 1, ev.accuracy, ev.macro_f1);
    record.metrics = metrics::summarize(record.matrix);
    record.epochs = std::move(outcome.epochs);
    record.tasks.push_back(outcome.log);
    record.training_steps = outcome.log.steps;
    if (options.record_dir && config.checkpoints) {
        const fs::path dir = *options.record_dir / "checkpoints" / "joint";
        fs::create_directories(dir);
        models::save_tensors(dir / "model.fbtm", models::named_parameters(*model));
    }
    char line[160];
    std::snprintf(line, sizeof(line), "%s: %zu epochs, pooled test acc %.4f", config.cell_name().c_str(),
                  outcome.log.epochs_run, ev.accuracy);
    report(options, line);
    return record;
}

RunRecord run_experiment(const ExperimentConfig& config, const data::PreparedData& data, const RunOptions& options) {
    return config.mode == RunMode::joint ? train_joint(config, data, options)
                                         : train_sequential(config, data, options);
}

}  // namespace forgetbench::trainer
