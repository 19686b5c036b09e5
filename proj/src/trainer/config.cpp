#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

#include "forgetbench/error.hpp"
#include "forgetbench/trainer.hpp"

namespace forgetbench::trainer {

namespace {

using nlohmann::json;

const std::set<std::string> kTopKeys = {"architecture", "strategies", "hyperparameters", "seed",
                                        "tasks",        "subset_per_class", "max_length", "data_dir",
                                        "out_dir",      "checkpoints"};
const std::set<std::string> kHyperKeys = {
    "learning_rate", "batch_size",   "max_epochs",  "patience",    "optimizer", "embed_dim",
    "hidden_dim",    "num_layers",   "num_heads",   "dropout",     "buffer_capacity", "k",
    "n_candidates",  "eta_virtual",  "temperature", "alpha_lwf",   "lwf_seen_classes_only", "s"};

std::string join(const std::set<std::string>& keys) {
    std::string out;
    for (const auto& k : keys) {
        out += out.empty() ? "" : ", ";
        out += k;
    }
    return out;
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        if (allowed.count(key) == 0) {
            throw ConfigError("unknown key '" + key + "' in " + where + " (valid: " + join(allowed) + ")");
        }
    }
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("'" + std::string(key) + "' in " + where + " has the wrong type");
    }
}

std::size_t get_count(const json& obj, const char* key, const std::string& where) {
    const json& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("'" + std::string(key) + "' in " + where + " must be a non-negative integer");
    }
    return v.get<std::size_t>();
}

double get_real(const json& obj, const char* key, const std::string& where) {
    const json& v = obj.at(key);
    if (!v.is_number()) {
        throw ConfigError("'" + std::string(key) + "' in " + where + " must be a number");
    }
    return v.get<double>();
}

// Strategy list: [], ["naive"], ["joint"], or any of mir/lwf/hat.
void parse_strategies(const json& value, ExperimentConfig& cfg) {
    if (!value.is_array()) {
        throw ConfigError("'strategies' must be a list of names");
    }
    std::vector<std::string> names;
    for (const json& n : value) {
        if (!n.is_string()) {
            throw ConfigError("'strategies' must be a list of names");
        }
        names.push_back(n.get<std::string>());
    }
    if (names.size() == 1 && (names.front() == "joint" || names.front() == "JOINT")) {
        cfg.mode = RunMode::joint;
        cfg.strategies = {};
        return;
    }
    for (const auto& n : names) {
        if (n == "joint") {
            throw ConfigError("'joint' is a baseline and cannot be combined with strategies");
        }
    }
    try {
        cfg.mode = RunMode::sequential;
        cfg.strategies = strategies::StrategySet::parse(names);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()) + "; 'joint' selects the joint baseline");
    }
}

void parse_hyper(const json& h, Hyperparameters& hp) {
    if (!h.is_object()) {
        throw ConfigError("'hyperparameters' must be an object");
    }
    reject_unknown(h, kHyperKeys, "hyperparameters");
    const std::string where = "hyperparameters";
    if (h.contains("learning_rate")) hp.learning_rate = get_real(h, "learning_rate", where);
    if (h.contains("batch_size")) hp.batch_size = get_count(h, "batch_size", where);
    if (h.contains("max_epochs")) hp.max_epochs = get_count(h, "max_epochs", where);
    if (h.contains("patience")) hp.patience = get_count(h, "patience", where);
    if (h.contains("optimizer")) hp.optimizer = parse_optimizer(get_as<std::string>(h, "optimizer", where));
    if (h.contains("embed_dim")) hp.embed_dim = get_count(h, "embed_dim", where);
    if (h.contains("hidden_dim")) hp.hidden_dim = get_count(h, "hidden_dim", where);
    if (h.contains("num_layers")) hp.num_layers = get_count(h, "num_layers", where);
    if (h.contains("num_heads")) hp.num_heads = get_count(h, "num_heads", where);
    if (h.contains("dropout")) hp.dropout = get_real(h, "dropout", where);
    if (h.contains("buffer_capacity")) hp.buffer_capacity = get_count(h, "buffer_capacity", where);
    if (h.contains("k")) {
        if (h.at("k").is_null()) {
            hp.k.reset();
        } else {
            hp.k = get_count(h, "k", where);
        }
    }
    if (h.contains("n_candidates")) hp.n_candidates = get_count(h, "n_candidates", where);
    if (h.contains("eta_virtual")) hp.eta_virtual = get_real(h, "eta_virtual", where);
    if (h.contains("temperature")) hp.temperature = get_real(h, "temperature", where);
    if (h.contains("alpha_lwf")) hp.alpha_lwf = get_real(h, "alpha_lwf", where);
    if (h.contains("lwf_seen_classes_only")) hp.lwf_seen_classes_only = get_as<bool>(h, "lwf_seen_classes_only", where);
    if (h.contains("s")) hp.hat_scale = get_real(h, "s", where);
}

json hyper_to_json(const Hyperparameters& hp) {
    json h{{"learning_rate", hp.learning_rate},
           {"batch_size", hp.batch_size},
           {"max_epochs", hp.max_epochs},
           {"patience", hp.patience},
           {"optimizer", to_string(hp.optimizer)},
           {"embed_dim", hp.embed_dim},
           {"hidden_dim", hp.hidden_dim},
           {"num_layers", hp.num_layers},
           {"num_heads", hp.num_heads},
           {"dropout", hp.dropout},
           {"buffer_capacity", hp.buffer_capacity},
           {"n_candidates", hp.n_candidates},
           {"eta_virtual", hp.eta_virtual},
           {"temperature", hp.temperature},
           {"alpha_lwf", hp.alpha_lwf},
           {"lwf_seen_classes_only", hp.lwf_seen_classes_only},
           {"s", hp.hat_scale}};
    h["k"] = hp.k ? json(*hp.k) : json(nullptr);
    return h;
}

json strategies_to_json(const ExperimentConfig& cfg) {
    if (cfg.mode == RunMode::joint) {
        return json::array({"joint"});
    }
    json list = json::array();
    if (cfg.strategies.mir) list.push_back("mir");
    if (cfg.strategies.lwf) list.push_back("lwf");
    if (cfg.strategies.hat) list.push_back("hat");
    return list;
}

json config_to_json(const ExperimentConfig& cfg, bool with_paths) {
    json j{{"architecture", models::to_string(cfg.architecture)},
           {"strategies", strategies_to_json(cfg)},
           {"hyperparameters", hyper_to_json(cfg.hyper)},
           {"seed", cfg.seed},
           {"tasks", cfg.tasks},
           {"max_length", cfg.max_length},
           {"checkpoints", cfg.checkpoints}};
    j["subset_per_class"] = cfg.subset_per_class ? json(*cfg.subset_per_class) : json(nullptr);
    if (with_paths) {
        j["data_dir"] = cfg.data_dir;
        j["out_dir"] = cfg.out_dir;
    }
    return j;
}

json parse_object(const std::string& text, const char* what) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("malformed ") + what + " JSON: " + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError(std::string(what) + " must be a JSON object");
    }
    return j;
}

ExperimentConfig config_from_object(const json& j) {
    reject_unknown(j, kTopKeys, "config");
    ExperimentConfig cfg;
    const std::string where = "config";
    if (!j.contains("architecture")) {
        throw ConfigError("config lacks 'architecture' (valid: ann, gru, transformer)");
    }
    cfg.architecture = models::parse_architecture(get_as<std::string>(j, "architecture", where));
    if (j.contains("strategies")) parse_strategies(j.at("strategies"), cfg);
    if (j.contains("hyperparameters")) parse_hyper(j.at("hyperparameters"), cfg.hyper);
    if (j.contains("seed")) cfg.seed = get_count(j, "seed", where);
    if (j.contains("tasks")) cfg.tasks = get_count(j, "tasks", where);
    if (j.contains("subset_per_class")) {
        if (j.at("subset_per_class").is_null()) {
            cfg.subset_per_class.reset();
        } else {
            cfg.subset_per_class = get_count(j, "subset_per_class", where);
        }
    }
    if (j.contains("max_length")) cfg.max_length = get_count(j, "max_length", where);
    if (j.contains("data_dir")) cfg.data_dir = get_as<std::string>(j, "data_dir", where);
    if (j.contains("out_dir")) cfg.out_dir = get_as<std::string>(j, "out_dir", where);
    if (j.contains("checkpoints")) cfg.checkpoints = get_as<bool>(j, "checkpoints", where);
    cfg.validate();
    return cfg;
}

}  // namespace

std::string ExperimentConfig::strategy_name() const { return mode == RunMode::joint ? "joint" : strategies.name(); }

std::string ExperimentConfig::cell_name() const {
    return models::to_string(architecture) + "-" + strategy_name() + "-seed" + std::to_string(seed);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    return config_from_object(parse_object(text, "config"));
}

std::string ExperimentConfig::to_json() const { return config_to_json(*this, true).dump(2) + "\n"; }

std::string ExperimentConfig::hash() const { return data::fnv1a_hex(config_to_json(*this, false).dump()); }

void ExperimentConfig::validate() const {
    const auto& hp = hyper;
    if (!(hp.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (hp.batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (hp.max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
    if (hp.patience > hp.max_epochs) throw ConfigError("patience must not exceed max_epochs");
    if (tasks == 0) throw ConfigError("tasks must be at least 1");
    if (subset_per_class && *subset_per_class == 0) throw ConfigError("subset_per_class must be at least 1");
    if (max_length == 0) throw ConfigError("max_length must be at least 1");
    model_config(1, 1).validate();
    strategy_config().validate();
}

models::ModelConfig ExperimentConfig::model_config(std::size_t vocab_size, std::size_t num_classes) const {
    models::ModelConfig m;
    m.architecture = architecture;
    m.vocab_size = vocab_size;
    m.num_classes = num_classes;
    m.embed_dim = hyper.embed_dim;
    m.hidden_dim = hyper.hidden_dim;
    m.num_layers = hyper.num_layers;
    m.num_heads = hyper.num_heads;
    m.dropout_p = hyper.dropout;
    return m;
}

strategies::StrategyConfig ExperimentConfig::strategy_config() const {
    strategies::StrategyConfig s;
    s.buffer_capacity = hyper.buffer_capacity;
    s.mir.eta_virtual = hyper.eta_virtual;
    s.mir.k = hyper.k.value_or(hyper.batch_size);
    s.mir.n_candidates = hyper.n_candidates;
    s.lwf_temperature = hyper.temperature;
    s.lwf_alpha = hyper.alpha_lwf;
    s.lwf_seen_classes_only = hyper.lwf_seen_classes_only;
    s.hat_scale = hyper.hat_scale;
    return s;
}

std::vector<ExperimentConfig> expand_grid(const std::string& text) {
    const json grid = parse_object(text, "grid");
    auto as_list = [&](const char* key, bool nested) {
        if (!grid.contains(key)) {
            return json::array({json(nullptr)});
        }
        const json& v = grid.at(key);
        if (nested) {
            // strategies: a list of lists, or a single list of names.
            if (v.is_array() && !v.empty() && v.front().is_array()) {
                return v;
            }
            return json::array({v});
        }
        return v.is_array() ? v : json::array({v});
    };
    const json archs = as_list("architecture", false);
    const json sets = as_list("strategies", true);
    const json seeds = as_list("seed", false);
    if (archs.empty() || sets.empty() || seeds.empty()) {
        throw ConfigError("grid lists must not be empty");
    }
    std::vector<ExperimentConfig> out;
    for (const json& arch : archs) {
        for (const json& set : sets) {
            for (const json& seed : seeds) {
                json cell = grid;
                if (!arch.is_null()) cell["architecture"] = arch;
                if (!set.is_null()) cell["strategies"] = set;
                if (!seed.is_null()) cell["seed"] = seed;
                out.push_back(config_from_object(cell));
            }
        }
    }
    return out;
}

data::PreparedData load_data(const ExperimentConfig& config) {
    std::filesystem::path source = config.data_dir;
    if (source.empty()) {
        const char* env = std::getenv("FORGETBENCH_DATA");
        if (env == nullptr || *env == '\0') {
            throw ConfigError("no data_dir in the config and FORGETBENCH_DATA is not set");
        }
        source = env;
    }
    if (std::filesystem::is_directory(source)) {
        data::PreparedData prepared = data::read_cache(source);
        if (prepared.options.tasks != config.tasks) {
            throw ConfigError("cache " + source.string() + " holds " + std::to_string(prepared.options.tasks) +
                              " tasks, config asks for " + std::to_string(config.tasks));
        }
        if (prepared.options.subset_per_class != config.subset_per_class) {
            throw ConfigError("cache " + source.string() + " was prepared with a different subset_per_class");
        }
        return prepared;
    }
    if (!std::filesystem::exists(source)) {
        throw DataError("data path " + source.string() + " does not exist");
    }
    data::PrepareOptions opts;
    opts.seed = config.seed;
    opts.tasks = config.tasks;
    opts.max_length = config.max_length;
    opts.subset_per_class = config.subset_per_class;
    return data::prepare(data::load_clinc150(source), opts);
}

}  // namespace forgetbench::trainer
