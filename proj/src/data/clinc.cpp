#include <fstream>
#include <sstream>

#include <json.hpp>

#include "forgetbench/data.hpp"
#include "forgetbench/error.hpp"

namespace forgetbench::data {

namespace {

using nlohmann::json;

std::vector<LabeledText> read_pairs(const json& root, const char* key) {
    if (!root.contains(key)) {
        throw DataError(std::string("CLINC150 file lacks key '") + key + "'");
    }
    const json& list = root.at(key);
    if (!list.is_array()) {
        throw DataError(std::string("'") + key + "' must be a list");
    }
    std::vector<LabeledText> out;
    out.reserve(list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
        const json& pair = list[i];
        if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string()) {
            throw DataError(std::string("'") + key + "' entry " + std::to_string(i) +
                            " is not a [text, intent] pair");
        }
        out.push_back(LabeledText{pair[0].get<std::string>(), pair[1].get<std::string>()});
    }
    return out;
}

void check_count(std::vector<std::string>& warnings, const char* split, std::size_t got, std::size_t expected) {
    if (got != expected) {
        warnings.push_back(std::string(split) + " split has " + std::to_string(got) +
                           " in-scope utterances, the full dataset has " + std::to_string(expected));
    }
}

}  // namespace

RawSplits parse_clinc150(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("malformed CLINC150 JSON: ") + e.what());
    }
    if (!root.is_object()) {
        throw DataError("CLINC150 file must be a JSON object");
    }
    RawSplits out;
    out.train = read_pairs(root, "train");
    out.val = read_pairs(root, "val");
    out.test = read_pairs(root, "test");
    out.oos_dropped_train = read_pairs(root, "oos_train").size();
    out.oos_dropped_val = read_pairs(root, "oos_val").size();
    out.oos_dropped_test = read_pairs(root, "oos_test").size();
    check_count(out.warnings, "train", out.train.size(), kClincTrainSize);
    check_count(out.warnings, "val", out.val.size(), kClincValSize);
    check_count(out.warnings, "test", out.test.size(), kClincTestSize);
    return out;
}

RawSplits load_clinc150(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_clinc150(buffer.str());
}

}  // namespace forgetbench::data
