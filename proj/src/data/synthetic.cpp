#include "forgetbench/synthetic.hpp"

#include <array>
#include <cmath>
#include <set>
#include <vector>

#include <json.hpp>

#include "forgetbench/error.hpp"
#include "forgetbench/rng.hpp"

namespace forgetbench::data {

namespace {

constexpr std::array kFunctionWords = {
    "i",     "want", "to",    "the",  "a",     "my",    "please", "can",   "you",  "what", "is",    "how",
    "do",    "need", "help",  "me",   "with",  "for",   "on",     "of",    "in",   "tell", "about", "could",
    "would", "like", "know",  "get",  "it",    "this",  "that",   "are",   "be",   "will", "there", "any",
    "some",  "now",  "today", "just", "much",  "when",  "where",  "which", "from", "at",   "up",    "have",
    "did",   "does", "let",   "find", "show",  "give",  "make",   "an",    "your", "our",  "right", "again"};

constexpr std::array kDomainNames = {"banking", "credit_cards", "kitchen_and_dining", "home", "auto_and_commute",
                                     "travel",  "utility",      "work",               "small_talk", "meta"};

constexpr std::array kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                "br", "cl", "dr", "gr", "pl", "st", "tr", "sh", "ch", "th"};
constexpr std::array kVowels = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
constexpr std::array kCodas = {"", "", "n", "r", "s", "t", "l", "m", "k"};

class WordFactory {
public:
    explicit WordFactory(Rng& rng) : rng_(rng) {
        for (const char* w : kFunctionWords) {
            used_.insert(w);
        }
    }

    std::string fresh(std::size_t min_syllables, std::size_t max_syllables) {
        for (;;) {
            const std::size_t syllables = min_syllables + rng_.below(max_syllables - min_syllables + 1);
            std::string word;
            for (std::size_t s = 0; s < syllables; ++s) {
                word += kOnsets[rng_.below(kOnsets.size())];
                word += kVowels[rng_.below(kVowels.size())];
                if (s + 1 == syllables) {
                    word += kCodas[rng_.below(kCodas.size())];
                }
            }
            if (used_.insert(word).second) {
                return word;
            }
        }
    }

private:
    Rng& rng_;
    std::set<std::string> used_;
};

// Zipf-like pick from a list: index ~ floor(n * u^2) favours the head.
template <typename List>
const auto& pick_skewed(Rng& rng, const List& items) {
    const double u = rng.uniform();
    const auto index = static_cast<std::size_t>(static_cast<double>(items.size()) * u * u);
    return items[std::min(index, items.size() - 1)];
}

template <typename List>
const auto& pick(Rng& rng, const List& items) {
    return items[rng.below(items.size())];
}

struct Intent {
    std::string name;
    std::size_t domain = 0;
    std::vector<std::string> keywords;
};

}  // namespace

std::string generate_clinc_like_json(const SyntheticCorpusOptions& options) {
    if (options.domains == 0 || options.intents_per_domain == 0) {
        throw ConfigError("synthetic corpus needs at least one domain and one intent per domain");
    }
    Rng rng(Rng::derive(options.seed, {0xc11c}));
    WordFactory words(rng);

    std::vector<std::vector<std::string>> domain_words(options.domains);
    for (auto& list : domain_words) {
        for (int i = 0; i < 30; ++i) {
            list.push_back(words.fresh(2, 3));
        }
    }
    std::vector<std::string> rare_words;
    for (int i = 0; i < 6500; ++i) {
        rare_words.push_back(words.fresh(2, 4));
    }

    std::vector<Intent> intents;
    for (std::size_t d = 0; d < options.domains; ++d) {
        const std::string domain =
            d < kDomainNames.size() ? kDomainNames[d] : std::string("domain") + std::to_string(d);
        for (std::size_t i = 0; i < options.intents_per_domain; ++i) {
            Intent intent;
            intent.name = domain + "_" + words.fresh(2, 2);
            intent.domain = d;
            for (int k = 0; k < 10; ++k) {
                intent.keywords.push_back(words.fresh(1, 3));
            }
            intents.push_back(std::move(intent));
        }
    }

    auto utterance = [&](const Intent& intent) {
        std::vector<std::string> tokens;
        const std::size_t keyword_count = 1 + rng.below(3);
        for (std::size_t k = 0; k < keyword_count; ++k) {
            const Intent* source = &intent;
            if (rng.uniform() < options.confusion) {
                const std::size_t base = intent.domain * options.intents_per_domain;
                source = &intents[base + rng.below(options.intents_per_domain)];
            }
            tokens.push_back(pick_skewed(rng, source->keywords));
        }
        const std::size_t domain_count = rng.below(3);
        for (std::size_t k = 0; k < domain_count; ++k) {
            tokens.push_back(pick(rng, domain_words[intent.domain]));
        }
        if (rng.uniform() < 0.45) {
            tokens.push_back(pick_skewed(rng, rare_words));
        }
        const std::size_t filler = 2 + rng.below(6);
        for (std::size_t k = 0; k < filler; ++k) {
            tokens.push_back(pick_skewed(rng, kFunctionWords));
        }
        rng.shuffle(tokens);
        std::string text;
        for (const auto& t : tokens) {
            if (!text.empty()) {
                text.push_back(' ');
            }
            text += t;
        }
        return text;
    };
    auto out_of_scope = [&]() {
        std::vector<std::string> tokens;
        const std::size_t n = 3 + rng.below(6);
        for (std::size_t k = 0; k < n; ++k) {
            tokens.push_back(rng.uniform() < 0.5 ? std::string(pick_skewed(rng, kFunctionWords))
                                                 : pick(rng, rare_words));
        }
        std::string text;
        for (const auto& t : tokens) {
            if (!text.empty()) {
                text.push_back(' ');
            }
            text += t;
        }
        return text;
    };

    using nlohmann::json;
    json root = json::object();
    auto fill = [&](const char* key, std::size_t per_intent) {
        json list = json::array();
        for (const Intent& intent : intents) {
            for (std::size_t i = 0; i < per_intent; ++i) {
                list.push_back(json::array({utterance(intent), intent.name}));
            }
        }
        root[key] = std::move(list);
    };
    auto fill_oos = [&](const char* key, std::size_t count) {
        json list = json::array();
        for (std::size_t i = 0; i < count; ++i) {
            list.push_back(json::array({out_of_scope(), "oos"}));
        }
        root[key] = std::move(list);
    };
    fill("train", options.train_per_intent);
    fill("val", options.val_per_intent);
    fill("test", options.test_per_intent);
    fill_oos("oos_train", options.oos_train);
    fill_oos("oos_val", options.oos_val);
    fill_oos("oos_test", options.oos_test);
    return root.dump() + "\n";
}

}  // namespace forgetbench::data
