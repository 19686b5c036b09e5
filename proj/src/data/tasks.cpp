#include <algorithm>
#include <map>

#include "forgetbench/data.hpp"
#include "forgetbench/error.hpp"
#include "forgetbench/rng.hpp"

namespace forgetbench::data {

std::vector<std::vector<int>> partition_labels(std::size_t num_labels, std::size_t tasks, std::uint64_t seed) {
    if (tasks == 0 || num_labels == 0 || num_labels % tasks != 0) {
        throw ConfigError(std::to_string(tasks) + " tasks do not divide " + std::to_string(num_labels) + " labels");
    }
    std::vector<int> order(num_labels);
    for (std::size_t i = 0; i < num_labels; ++i) {
        order[i] = static_cast<int>(i);
    }
    Rng rng(Rng::derive(seed, {0x7a5c}));
    rng.shuffle(order);
    const std::size_t per_task = num_labels / tasks;
    std::vector<std::vector<int>> out(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
        out[t].assign(order.begin() + static_cast<std::ptrdiff_t>(t * per_task),
                      order.begin() + static_cast<std::ptrdiff_t>((t + 1) * per_task));
        std::sort(out[t].begin(), out[t].end());
    }
    return out;
}

std::vector<TaskDataset> construct_tasks(const EncodedSplits& splits, std::size_t num_labels, std::size_t tasks,
                                         std::uint64_t seed) {
    const auto groups = partition_labels(num_labels, tasks, seed);
    std::vector<int> task_of(num_labels);
    for (std::size_t t = 0; t < groups.size(); ++t) {
        for (int label : groups[t]) {
            task_of[static_cast<std::size_t>(label)] = static_cast<int>(t);
        }
    }
    std::vector<TaskDataset> out(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
        out[t].task_index = t + 1;
        out[t].label_set = groups[t];
    }
    auto distribute = [&](const std::vector<Utterance>& items, std::vector<Utterance> TaskDataset::*split) {
        for (const Utterance& u : items) {
            if (u.label_id < 0 || static_cast<std::size_t>(u.label_id) >= num_labels) {
                throw DataError("label id " + std::to_string(u.label_id) + " outside " + std::to_string(num_labels) +
                                " labels");
            }
            (out[static_cast<std::size_t>(task_of[static_cast<std::size_t>(u.label_id)])].*split).push_back(u);
        }
    };
    distribute(splits.train, &TaskDataset::train);
    distribute(splits.val, &TaskDataset::val);
    distribute(splits.test, &TaskDataset::test);
    return out;
}

std::vector<Utterance> subsample_per_class(const std::vector<Utterance>& items, std::size_t per_class,
                                           std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < items.size(); ++i) {
        by_label[items[i].label_id].push_back(i);
    }
    std::vector<bool> keep(items.size(), false);
    for (auto& [label, indices] : by_label) {
        Rng rng(Rng::derive(seed, {0x5b5e7, static_cast<std::uint64_t>(label)}));
        rng.shuffle(indices);
        for (std::size_t i = 0; i < std::min(per_class, indices.size()); ++i) {
            keep[indices[i]] = true;
        }
    }
    std::vector<Utterance> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (keep[i]) {
            out.push_back(items[i]);
        }
    }
    return out;
}

PreparedData prepare(const RawSplits& raw, const PrepareOptions& options) {
    if (options.max_length == 0) {
        throw ConfigError("max_length must be at least 1");
    }
    if (options.min_freq == 0) {
        throw ConfigError("min_freq must be at least 1");
    }
    std::vector<std::string> names;
    for (const auto* split : {&raw.train, &raw.val, &raw.test}) {
        for (const auto& item : *split) {
            names.push_back(item.intent);
        }
    }
    PreparedData out;
    out.options = options;
    out.warnings = raw.warnings;
    out.labels = LabelEncoder::fit(names);

    auto clean = [&](const std::vector<LabeledText>& items) {
        std::vector<Utterance> result;
        result.reserve(items.size());
        for (const auto& item : items) {
            Utterance u;
            u.text = preprocess(item.text);
            u.label_id = out.labels.encode(item.intent);
            result.push_back(std::move(u));
        }
        return result;
    };
    EncodedSplits splits{clean(raw.train), clean(raw.val), clean(raw.test)};
    if (options.subset_per_class) {
        splits.train = subsample_per_class(splits.train, *options.subset_per_class, options.seed);
    }

    std::vector<std::string> train_texts;
    train_texts.reserve(splits.train.size());
    for (const auto& u : splits.train) {
        train_texts.push_back(u.text);
    }
    out.vocab = Vocabulary::build(train_texts, options.min_freq);
    for (auto* split : {&splits.train, &splits.val, &splits.test}) {
        for (auto& u : *split) {
            auto encoded = tokenize(u.text, out.vocab, options.max_length);
            u.token_ids = std::move(encoded.token_ids);
            u.attention_mask = std::move(encoded.attention_mask);
        }
    }
    out.tasks = construct_tasks(splits, out.labels.size(), options.tasks, options.seed);
    return out;
}

}  // namespace forgetbench::data
