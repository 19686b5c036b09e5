#pragma once

#include <cstdint>
#include <string>

namespace forgetbench::data {

// Shape of a generated corpus in the CLINC150 data_full.json layout. The
// defaults mirror the CLINC150 split sizes: 150 intents in 10 domains with
// 100/20/30 utterances each, plus 100/100/1000 out-of-scope utterances.
struct SyntheticCorpusOptions {
    std::uint64_t seed = 7;
    std::size_t domains = 10;
    std::size_t intents_per_domain = 15;
    std::size_t train_per_intent = 100;
    std::size_t val_per_intent = 20;
    std::size_t test_per_intent = 30;
    std::size_t oos_train = 100;
    std::size_t oos_val = 100;
    std::size_t oos_test = 1000;
    // Probability that a keyword is swapped for one of a sibling intent in the
    // same domain; caps the attainable accuracy below 1.
    double confusion = 0.08;
};

// Short utterances built from English function words, per-domain words,
// per-intent keywords and a long tail of rare words. Deterministic in `seed`.
std::string generate_clinc_like_json(const SyntheticCorpusOptions& options);

}  // namespace forgetbench::data
