#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "forgetbench/models.hpp"
#include "forgetbench/ops.hpp"
#include "forgetbench/strategies.hpp"
#include "forgetbench/trainer.hpp"
#include "oracles.hpp"

namespace fbtest {

struct CheckResult {
    bool ok = true;
    std::string detail;

    void fail(const std::string& why) {
        if (ok) detail = why;
        ok = false;
    }
};

inline forgetbench::models::ModelConfig toy_config(forgetbench::models::Architecture arch, std::size_t vocab,
                                                    std::size_t classes) {
    forgetbench::models::ModelConfig c;
    c.architecture = arch;
    c.vocab_size = vocab;
    c.embed_dim = 8;
    c.hidden_dim = 16;
    c.num_classes = classes;
    c.num_layers = 1;
    c.num_heads = 2;
    c.dropout_p = 0.1;
    return c;
}

// Cross-entropy from raw logits by log-sum-exp, independent of the op.
inline double cross_entropy_ref(std::span<const double> z, int label) {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    return mx + std::log(s) - z[static_cast<std::size_t>(label)];
}

inline double loss_ref(const forgetbench::models::Model& m, const forgetbench::strategies::Sample& s) {
    Tape tape = Tape::inference();
    const Tensor z = m.forward(tape, s.token_ids, s.attention_mask, {});
    return cross_entropy_ref(z.data(), s.label);
}

// Random buffer of earlier-task items plus a current-task batch on a toy ANN;
// mir_select must return the k items with the largest brute-force loss rise.
inline CheckResult check_mir_brute_force(int seed, std::size_t earlier_items, std::size_t k) {
    namespace st = forgetbench::strategies;
    namespace models = forgetbench::models;
    CheckResult res;
    const std::size_t vocab = 12, classes = 6;
    const auto model = models::build_model(toy_config(models::Architecture::ann, vocab, classes), 50 + seed);
    Rng rng(60 + seed);
    std::vector<forgetbench::data::Utterance> pool;
    auto random_utt = [&](int label) {
        std::vector<int> ids;
        const std::size_t len = 1 + rng.below(5);
        for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<int>(2 + rng.below(vocab - 2)));
        return make_utterance(ids, label);
    };
    st::ReplayBuffer buffer(1000, 1);
    for (std::size_t i = 0; i < earlier_items; ++i) {
        pool.push_back(random_utt(static_cast<int>(rng.below(3))));
    }
    for (std::size_t i = 0; i < 3; ++i) {
        pool.push_back(random_utt(static_cast<int>(3 + rng.below(3))));
    }
    for (std::size_t i = 0; i < pool.size(); ++i) {
        buffer.add(st::Sample{pool[i].token_ids, pool[i].attention_mask, pool[i].label_id}, i < earlier_items ? 1 : 2);
    }
    std::vector<forgetbench::data::Utterance> batch_utts;
    for (int i = 0; i < 4; ++i) batch_utts.push_back(random_utt(static_cast<int>(3 + rng.below(3))));
    const auto batch = forgetbench::trainer::as_samples(batch_utts);

    // Brute force on separate copies: theta' = theta - eta * grad of the mean loss.
    const double eta = 0.5;
    const auto before_model = model->clone();
    const auto after_model = model->clone();
    {
        Tape tape;
        std::vector<Tensor> terms;
        for (const auto& s : batch) {
            terms.push_back(forgetbench::ops::softmax_cross_entropy(
                tape, after_model->forward(tape, s.token_ids, s.attention_mask, {}), static_cast<std::size_t>(s.label)));
        }
        tape.backward(forgetbench::ops::scale(tape, forgetbench::ops::add_n(tape, terms), 1.0 / batch.size()));
        for (auto& p : after_model->parameters()) {
            auto v = p.value.mutable_data();
            const auto g = p.value.grad();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * g[i];
        }
    }
    struct Scored {
        std::size_t index;
        double r;
    };
    std::vector<Scored> brute;
    for (std::size_t i = 0; i < buffer.items().size(); ++i) {
        const auto& item = buffer.items()[i];
        if (item.task_index >= 2) continue;
        brute.push_back({i, loss_ref(*after_model, item.sample()) - loss_ref(*before_model, item.sample())});
    }
    std::sort(brute.begin(), brute.end(), [&](const Scored& a, const Scored& b) {
        return a.r != b.r ? a.r > b.r : buffer.items()[a.index].sequence < buffer.items()[b.index].sequence;
    });

    const auto params_before = models::named_parameters(*model);
    std::vector<std::vector<double>> values_before;
    for (const auto& [name, t] : params_before) values_before.emplace_back(t.data().begin(), t.data().end());
    st::MirConfig cfg;
    cfg.eta_virtual = eta;
    cfg.k = k;
    Rng mir_rng(1);
    const auto chosen = st::mir_select(*model, batch, buffer, 2, cfg, nullptr, mir_rng);

    const std::size_t expect_n = std::min(k, brute.size());
    if (chosen.size() != expect_n) {
        res.fail("selected " + std::to_string(chosen.size()) + " items, expected " + std::to_string(expect_n));
        return res;
    }
    for (std::size_t i = 0; i < expect_n; ++i) {
        if (chosen[i].index != brute[i].index) {
            std::ostringstream os;
            os << "rank " << i << ": got item " << chosen[i].index << ", brute force " << brute[i].index;
            res.fail(os.str());
        }
        if (std::abs(chosen[i].score - brute[i].r) > 1e-9 * std::max(1.0, std::abs(brute[i].r))) {
            res.fail("score mismatch at rank " + std::to_string(i));
        }
    }
    for (std::size_t i = expect_n; i < brute.size(); ++i) {
        if (brute[i].r > chosen.back().score) res.fail("an unselected candidate scores higher");
    }
    std::size_t p = 0;
    for (const auto& param : model->parameters()) {
        const auto v = param.value.data();
        if (!std::equal(v.begin(), v.end(), values_before[p].begin())) res.fail("parameters not restored");
        if (param.value.has_grad()) {
            const auto g = param.value.grad();
            if (std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; })) res.fail("gradient left behind");
        }
        ++p;
    }
    return res;
}

// alpha = 0 and a teacher identical to the student both leave the task loss
// unchanged, bit for bit; any other teacher adds a nonnegative term.
inline CheckResult check_lwf_identities(int seed) {
    namespace st = forgetbench::strategies;
    namespace models = forgetbench::models;
    CheckResult res;
    const auto model = models::build_model(toy_config(models::Architecture::ann, 12, 6), 70 + seed);
    const auto other = models::build_model(toy_config(models::Architecture::ann, 12, 6), 170 + seed);
    const st::TeacherSnapshot same(*model, 1);
    const st::TeacherSnapshot different(*other, 1);
    Rng rng(80 + seed);
    std::vector<forgetbench::data::Utterance> utts;
    for (int i = 0; i < 5; ++i) {
        utts.push_back(make_utterance({static_cast<int>(2 + rng.below(10)), static_cast<int>(2 + rng.below(10))},
                                      static_cast<int>(rng.below(6))));
    }
    const auto batch = forgetbench::trainer::as_samples(utts);
    for (double temperature : {0.5, 1.0, 2.0, 4.0}) {
        for (double alpha : {0.0, 0.3, 1.0, 2.5}) {
            for (const st::TeacherSnapshot* teacher : {&same, &different}) {
                Tape tape;
                std::vector<Tensor> logits;
                const Tensor task = st::batch_loss(tape, *model, batch, {}, &logits);
                std::vector<Tensor> old;
                for (const auto& s : batch) old.push_back(teacher->logits(s, nullptr));
                const Tensor total = st::lwf_loss(tape, task, logits, old, temperature, alpha);
                const bool identity = alpha == 0.0 || teacher == &same;
                if (identity && total.item() != task.item()) {
                    std::ostringstream os;
                    os << "T=" << temperature << " alpha=" << alpha << ": total " << total.item() << " != task "
                       << task.item();
                    res.fail(os.str());
                }
                if (!identity && !(total.item() > task.item())) res.fail("distillation term not positive");
            }
        }
    }
    return res;
}

// Cumulative masks never decrease over five tasks, and units whose mask has
// reached exactly 1 keep their incoming weights bit-identical through later
// tasks of real training.
inline CheckResult check_hat_protection(int seed) {
    namespace st = forgetbench::strategies;
    namespace models = forgetbench::models;
    CheckResult res;
    {
        st::HatState hat({{"a", 7}, {"b", 3}}, 50.0, 90 + seed);
        std::vector<std::vector<double>> prev = hat.cumulative_masks();
        for (std::size_t t = 1; t <= 5; ++t) {
            hat.embeddings(t);
            hat.cumulate(t);
            const auto& now = hat.cumulative_masks();
            for (std::size_t l = 0; l < now.size(); ++l) {
                for (std::size_t i = 0; i < now[l].size(); ++i) {
                    if (now[l][i] < prev[l][i]) res.fail("cumulative mask decreased at task " + std::to_string(t));
                }
            }
            prev = now;
        }
    }

    const auto data = separable_fixture(3, 3, 8, 4, 5 + seed);
    auto cfg = toy_config(models::Architecture::ann, data.vocab.size(), 9);
    const auto model = models::build_model(cfg, 95 + seed);
    st::StrategyConfig sc;
    st::Learner learner(*model, st::StrategySet{false, false, true}, sc, forgetbench::OptimizerKind::adam, 1e-2,
                        97 + seed);
    Rng drop(1), mir(2);
    std::vector<double> weight_rows, bias_rows;
    std::vector<std::size_t> protected_units;
    for (std::size_t t = 1; t <= 3; ++t) {
        const auto& task = data.tasks[t - 1];
        learner.begin_task(t, task.label_set);
        if (t == 2) {
            // Force full protection on every other unit on top of what task 1 earned.
            auto masks = learner.hat()->cumulative_masks();
            for (std::size_t i = 0; i < masks[0].size(); i += 2) masks[0][i] = 1.0;
            learner.hat()->set_cumulative_masks(masks);
            for (std::size_t i = 0; i < masks[0].size(); ++i) {
                if (masks[0][i] == 1.0) protected_units.push_back(i);
            }
            const auto& w = model->parameters()[1].value;
            const auto& b = model->parameters()[2].value;
            for (std::size_t u : protected_units) {
                for (std::size_t j = 0; j < w.dim(1); ++j) weight_rows.push_back(w.at(u, j));
                bias_rows.push_back(b.data()[u]);
            }
        }
        const auto samples = forgetbench::trainer::as_samples(task.train);
        for (int epoch = 0; epoch < 3; ++epoch) {
            for (std::size_t start = 0; start < samples.size(); start += 8) {
                const std::size_t end = std::min(samples.size(), start + 8);
                learner.step(std::span(samples).subspan(start, end - start), drop, mir);
            }
        }
        learner.end_task();
    }
    const auto& w = model->parameters()[1].value;
    const auto& b = model->parameters()[2].value;
    std::size_t k = 0;
    for (std::size_t n = 0; n < protected_units.size(); ++n) {
        const std::size_t u = protected_units[n];
        for (std::size_t j = 0; j < w.dim(1); ++j) {
            if (w.at(u, j) != weight_rows[k++]) res.fail("protected weight of unit " + std::to_string(u) + " moved");
        }
        if (b.data()[u] != bias_rows[n]) res.fail("protected bias of unit " + std::to_string(u) + " moved");
    }
    if (protected_units.empty()) res.fail("no protected unit");
    return res;
}

}  // namespace fbtest
