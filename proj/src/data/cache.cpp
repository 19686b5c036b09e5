#include <fstream>
#include <sstream>

#include <json.hpp>

#include "forgetbench/data.hpp"
#include "forgetbench/error.hpp"

namespace forgetbench::data {

namespace {

using nlohmann::json;

constexpr int kCacheFormat = 1;

std::string task_dir_name(std::size_t task_index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "task_%02zu", task_index);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_split(const std::filesystem::path& path, const std::vector<Utterance>& items) {
    std::string text;
    for (const auto& u : items) {
        json line{{"text", u.text}, {"label_id", u.label_id}, {"token_ids", u.token_ids}, {"mask", u.attention_mask}};
        text += line.dump();
        text.push_back('\n');
    }
    write_text(path, text);
}

std::vector<Utterance> read_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<Utterance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            Utterance u;
            u.text = j.at("text").get<std::string>();
            u.label_id = j.at("label_id").get<int>();
            u.token_ids = j.at("token_ids").get<std::vector<int>>();
            u.attention_mask = j.at("mask").get<std::vector<int>>();
            out.push_back(std::move(u));
        } catch (const json::exception& e) {
            throw DataError("bad record in " + path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

void write_cache(const PreparedData& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json label_sets = json::array();
    json counts = json::array();
    for (const auto& task : data.tasks) {
        label_sets.push_back(task.label_set);
        counts.push_back({{"train", task.train.size()}, {"val", task.val.size()}, {"test", task.test.size()}});
        const auto task_dir = dir / task_dir_name(task.task_index);
        std::filesystem::create_directories(task_dir);
        write_split(task_dir / "train.jsonl", task.train);
        write_split(task_dir / "val.jsonl", task.val);
        write_split(task_dir / "test.jsonl", task.test);
    }
    json manifest{{"format", kCacheFormat},
                  {"seed", data.options.seed},
                  {"tasks", data.options.tasks},
                  {"max_length", data.options.max_length},
                  {"min_freq", data.options.min_freq},
                  {"subset_per_class", data.options.subset_per_class ? json(*data.options.subset_per_class) : json()},
                  {"label_sets", label_sets},
                  {"counts", counts},
                  {"num_labels", data.labels.size()},
                  {"vocab_size", data.vocab.size()},
                  {"vocab_hash", data.vocab.hash()}};
    write_text(dir / "vocab.json", json(data.vocab.tokens()).dump() + "\n");
    write_text(dir / "labels.json", json(data.labels.names()).dump(1) + "\n");
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

PreparedData read_cache(const std::filesystem::path& dir) {
    const json manifest = read_json(dir / "manifest.json");
    PreparedData out;
    try {
        if (manifest.at("format").get<int>() != kCacheFormat) {
            throw DataError("unsupported dataset cache format in " + dir.string());
        }
        out.options.seed = manifest.at("seed").get<std::uint64_t>();
        out.options.tasks = manifest.at("tasks").get<std::size_t>();
        out.options.max_length = manifest.at("max_length").get<std::size_t>();
        out.options.min_freq = manifest.at("min_freq").get<std::size_t>();
        if (!manifest.at("subset_per_class").is_null()) {
            out.options.subset_per_class = manifest.at("subset_per_class").get<std::size_t>();
        }
        out.vocab = Vocabulary::from_tokens(read_json(dir / "vocab.json").get<std::vector<std::string>>());
        out.labels = LabelEncoder::from_names(read_json(dir / "labels.json").get<std::vector<std::string>>());
        if (out.vocab.hash() != manifest.at("vocab_hash").get<std::string>()) {
            throw DataError("vocabulary does not match manifest hash in " + dir.string());
        }
        const auto& label_sets = manifest.at("label_sets");
        for (std::size_t t = 0; t < out.options.tasks; ++t) {
            TaskDataset task;
            task.task_index = t + 1;
            task.label_set = label_sets.at(t).get<std::vector<int>>();
            const auto task_dir = dir / task_dir_name(task.task_index);
            task.train = read_split(task_dir / "train.jsonl");
            task.val = read_split(task_dir / "val.jsonl");
            task.test = read_split(task_dir / "test.jsonl");
            out.tasks.push_back(std::move(task));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    return out;
}

}  // namespace forgetbench::data
