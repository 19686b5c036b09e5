#include <algorithm>
#include <cctype>
#include <cstdio>
#include <unordered_map>

#include "forgetbench/data.hpp"
#include "forgetbench/error.hpp"

namespace forgetbench::data {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool starts_with_at(std::string_view s, std::size_t pos, std::string_view prefix) {
    return s.substr(pos, prefix.size()) == prefix;
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string preprocess(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) {
        return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    });
    // URLs run from the scheme or "www." to the next whitespace.
    std::string no_urls;
    no_urls.reserve(lower.size());
    for (std::size_t i = 0; i < lower.size();) {
        if (starts_with_at(lower, i, "http://") || starts_with_at(lower, i, "https://") ||
            starts_with_at(lower, i, "www.")) {
            while (i < lower.size() && !is_space(lower[i])) {
                ++i;
            }
            no_urls.push_back(' ');
            continue;
        }
        no_urls.push_back(lower[i]);
        ++i;
    }
    std::string out;
    out.reserve(no_urls.size());
    for (const std::string& token : split_whitespace(no_urls)) {
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += token;
    }
    return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) {
            ++i;
        }
        const std::size_t start = i;
        while (i < text.size() && !is_space(text[i])) {
            ++i;
        }
        if (i > start) {
            out.emplace_back(text.substr(start, i - start));
        }
    }
    return out;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t min_freq) {
    if (texts.empty()) {
        throw DataError("cannot build a vocabulary from an empty corpus");
    }
    std::unordered_map<std::string, std::size_t> counts;
    for (const std::string& text : texts) {
        for (std::string& token : split_whitespace(text)) {
            ++counts[std::move(token)];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [token, count] : counts) {
        if (count >= min_freq && token != kPadToken && token != kUnkToken) {
            kept.emplace_back(token, count);
        }
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens{kPadToken, kUnkToken};
    for (auto& [token, count] : kept) {
        tokens.push_back(std::move(token));
    }
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
        throw DataError("vocabulary must start with <pad> and <unk>");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw DataError("duplicate vocabulary token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

std::string Vocabulary::hash() const {
    std::string joined;
    for (const std::string& t : tokens_) {
        joined += t;
        joined.push_back('\n');
    }
    return fnv1a_hex(joined);
}

EncodedText tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_length) {
    EncodedText out;
    out.token_ids.assign(max_length, vocab.pad_id());
    out.attention_mask.assign(max_length, 0);
    const auto tokens = split_whitespace(text);
    if (tokens.empty()) {
        out.token_ids[0] = vocab.unk_id();
        out.attention_mask[0] = 1;
        return out;
    }
    const std::size_t n = std::min(tokens.size(), max_length);
    for (std::size_t i = 0; i < n; ++i) {
        out.token_ids[i] = vocab.id(tokens[i]);
        out.attention_mask[i] = 1;
    }
    return out;
}

LabelEncoder LabelEncoder::fit(std::span<const std::string> names) {
    std::vector<std::string> sorted(names.begin(), names.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    return from_names(std::move(sorted));
}

LabelEncoder LabelEncoder::from_names(std::vector<std::string> sorted_names) {
    LabelEncoder enc;
    enc.names_ = std::move(sorted_names);
    for (std::size_t i = 0; i < enc.names_.size(); ++i) {
        if (i > 0 && !(enc.names_[i - 1] < enc.names_[i])) {
            throw DataError("label names must be sorted and unique");
        }
        enc.ids_.emplace(enc.names_[i], static_cast<int>(i));
    }
    return enc;
}

int LabelEncoder::encode(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) {
        throw DataError("unknown intent '" + name + "'");
    }
    return it->second;
}

const std::string& LabelEncoder::decode(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
        throw IndexError("label id " + std::to_string(id) + " out of range");
    }
    return names_[static_cast<std::size_t>(id)];
}

}  // namespace forgetbench::data
