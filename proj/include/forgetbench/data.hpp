#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace forgetbench::data {

inline constexpr std::size_t kDefaultMaxLength = 64;

// (text, intent name)
struct LabeledText {
    std::string text;
    std::string intent;
};

// In-scope CLINC150 splits. Out-of-scope entries are counted and dropped.
struct RawSplits {
    std::vector<LabeledText> train;
    std::vector<LabeledText> val;
    std::vector<LabeledText> test;
    std::size_t oos_dropped_train = 0;
    std::size_t oos_dropped_val = 0;
    std::size_t oos_dropped_test = 0;
    // Count mismatches against the CLINC150 15000/3000/4500 sizes. Subsets and
    // fixtures load fine but carry a warning.
    std::vector<std::string> warnings;
};

inline constexpr std::size_t kClincTrainSize = 15000;
inline constexpr std::size_t kClincValSize = 3000;
inline constexpr std::size_t kClincTestSize = 4500;

// Parses the CLINC150 data_full.json layout: keys train/val/test and
// oos_train/oos_val/oos_test, each a list of [text, intent] pairs. Throws
// DataError on missing keys or malformed pairs.
RawSplits parse_clinc150(std::string_view json_text);
RawSplits load_clinc150(const std::filesystem::path& path);

// Lowercase, strip http(s):// and www. URLs, collapse whitespace, trim.
std::string preprocess(std::string_view text);

std::vector<std::string> split_whitespace(std::string_view text);

class Vocabulary {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kUnkToken = "<unk>";

    // Whitespace tokens with count >= min_freq, ordered by count descending then
    // lexicographically, after <pad> and <unk>. Throws DataError on an empty
    // corpus.
    static Vocabulary build(std::span<const std::string> texts, std::size_t min_freq);
    // Rebuilds from tokens in id order (ids 0 and 1 must be pad and unk).
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int pad_id() const { return kPadId; }
    int unk_id() const { return kUnkId; }
    std::size_t size() const { return tokens_.size(); }
    int id(std::string_view token) const;
    const std::vector<std::string>& tokens() const { return tokens_; }
    // FNV-1a over the tokens in id order, as 16 hex digits.
    std::string hash() const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

struct EncodedText {
    std::vector<int> token_ids;
    std::vector<int> attention_mask;
};

// Whitespace split, vocabulary lookup (unknown -> unk), truncate and pad to
// max_length. An empty text becomes a single unk token so every utterance has
// at least one real position.
EncodedText tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_length = kDefaultMaxLength);

// Global intent-name -> id map, ids dense in sorted-name order.
class LabelEncoder {
public:
    static LabelEncoder fit(std::span<const std::string> names);
    static LabelEncoder from_names(std::vector<std::string> sorted_names);

    int encode(const std::string& name) const;  // DataError for unknown names
    const std::string& decode(int id) const;
    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

private:
    std::vector<std::string> names_;
    std::map<std::string, int> ids_;
};

struct Utterance {
    std::string text;
    int label_id = 0;
    std::vector<int> token_ids;
    std::vector<int> attention_mask;
};

struct TaskDataset {
    std::size_t task_index = 0;  // 1-based
    std::vector<int> label_set;  // ascending
    std::vector<Utterance> train;
    std::vector<Utterance> val;
    std::vector<Utterance> test;
};

struct EncodedSplits {
    std::vector<Utterance> train;
    std::vector<Utterance> val;
    std::vector<Utterance> test;
};

// Seeded shuffle of label ids 0..num_labels-1 chunked into `tasks` groups, each
// sorted ascending. Throws ConfigError if tasks does not divide num_labels.
std::vector<std::vector<int>> partition_labels(std::size_t num_labels, std::size_t tasks, std::uint64_t seed);

// Filters every split to each task's label set, preserving order.
std::vector<TaskDataset> construct_tasks(const EncodedSplits& splits, std::size_t num_labels, std::size_t tasks,
                                         std::uint64_t seed);

// Keeps at most `per_class` training utterances per label, chosen by a seeded
// shuffle; the survivors keep their original order.
std::vector<Utterance> subsample_per_class(const std::vector<Utterance>& items, std::size_t per_class,
                                           std::uint64_t seed);

struct PrepareOptions {
    std::uint64_t seed = 42;
    std::size_t tasks = 10;
    std::size_t max_length = kDefaultMaxLength;
    std::size_t min_freq = 1;
    std::optional<std::size_t> subset_per_class;
};

// Everything a training run consumes.
struct PreparedData {
    PrepareOptions options;
    Vocabulary vocab;
    LabelEncoder labels;
    std::vector<TaskDataset> tasks;
    std::vector<std::string> warnings;
};

// Raw splits -> preprocessing -> label encoding -> vocabulary (from the training
// split that will be used) -> tokenisation -> tasks.
PreparedData prepare(const RawSplits& raw, const PrepareOptions& options);

// Dataset cache layout under `dir`:
//   manifest.json   {format, seed, tasks, max_length, min_freq, subset_per_class,
//                    label_sets, counts, vocab_size, vocab_hash}
//   vocab.json      tokens in id order
//   labels.json     intent names in id order
//   task_NN/{train,val,test}.jsonl, one {text, label_id, token_ids, mask} per line
void write_cache(const PreparedData& data, const std::filesystem::path& dir);
PreparedData read_cache(const std::filesystem::path& dir);

// FNV-1a 64 of a byte string, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace forgetbench::data
