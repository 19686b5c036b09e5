#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "forgetbench/error.hpp"
#include "forgetbench/ops.hpp"
#include "forgetbench/optim.hpp"
#include "forgetbench/strategies.hpp"
#include "forgetbench/trainer.hpp"
#include "oracles.hpp"
#include "strategy_checks.hpp"

using namespace forgetbench;
using namespace forgetbench::strategies;
using models::Architecture;

namespace {

std::vector<std::vector<double>> grads_of(const models::Model& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters()) {
        if (p.value.has_grad()) {
            out.emplace_back(p.value.grad().begin(), p.value.grad().end());
        } else {
            out.emplace_back(p.value.numel(), 0.0);
        }
    }
    return out;
}

// Elementwise application of each parameter's rule, written out directly.
std::vector<std::vector<double>> apply_rule(const models::Model& m, std::vector<std::vector<double>> grads,
                                            const std::vector<std::vector<double>>& masks) {
    for (std::size_t p = 0; p < grads.size(); ++p) {
        const auto& rule = m.parameters()[p].rule;
        if (rule.out_layer < 0) continue;
        const auto& t = m.parameters()[p].value;
        const std::size_t cols = t.rank() == 2 ? t.dim(1) : 1;
        const auto& mo = masks[static_cast<std::size_t>(rule.out_layer)];
        for (std::size_t e = 0; e < grads[p].size(); ++e) {
            const std::size_t i = e / cols, j = e % cols;
            double m_out = mo[i % mo.size()];
            if (rule.in_layer >= 0) {
                m_out = std::min(m_out, masks[static_cast<std::size_t>(rule.in_layer)][j]);
            }
            grads[p][e] *= 1.0 - m_out;
        }
    }
    return grads;
}

std::vector<std::vector<double>> values_of(const models::Model& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters()) out.emplace_back(p.value.data().begin(), p.value.data().end());
    return out;
}

void train_task(Learner& learner, const data::TaskDataset& task, std::size_t epochs, Rng& drop, Rng& mir,
                std::size_t batch = 8) {
    const auto samples = trainer::as_samples(task.train);
    for (std::size_t e = 0; e < epochs; ++e) {
        for (std::size_t s = 0; s < samples.size(); s += batch) {
            learner.step(std::span(samples).subspan(s, std::min(batch, samples.size() - s)), drop, mir);
        }
    }
}

}  // namespace

// ------------------------------------------------------------------ replay

TEST(ReplayBuffer, UnderfullKeepsEverything) {
    ReplayBuffer buf(100, 1);
    const std::vector<int> ids = {2}, mask = {1};
    for (int i = 0; i < 50; ++i) buf.add(Sample{ids, mask, i}, 1);
    ASSERT_EQ(buf.size(), 50u);
    EXPECT_EQ(buf.seen_count(), 50u);
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(buf.items()[static_cast<std::size_t>(i)].label, i);
        EXPECT_EQ(buf.items()[static_cast<std::size_t>(i)].sequence, static_cast<std::uint64_t>(i));
    }
}

TEST(ReplayBuffer, SeenCountAndCapacity) {
    ReplayBuffer buf(7, 3);
    const std::vector<int> ids = {2}, mask = {1};
    for (int i = 0; i < 1234; ++i) buf.add(Sample{ids, mask, i}, 1 + i / 500);
    EXPECT_EQ(buf.size(), 7u);
    EXPECT_EQ(buf.seen_count(), 1234u);
    EXPECT_THROW(ReplayBuffer(0, 1), ConfigError);
}

// Capacity 1: the surviving item is uniform over the stream. Chi-square with
// 9 degrees of freedom; 21.666 is the 0.99 quantile (p > 0.01).
TEST(ReplayBuffer, ReservoirIsUniform) {
    const int n = 10, trials = 100000;
    std::vector<int> counts(n, 0);
    const std::vector<int> ids = {2}, mask = {1};
    for (int t = 0; t < trials; ++t) {
        ReplayBuffer buf(1, static_cast<std::uint64_t>(t) * 7919 + 1);
        for (int i = 0; i < n; ++i) buf.add(Sample{ids, mask, i}, 1);
        ++counts[static_cast<std::size_t>(buf.items()[0].label)];
    }
    const double expected = static_cast<double>(trials) / n;
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, 21.666);
}

// ------------------------------------------------------------------ MIR

TEST(Mir, ThreeItemToyMatchesBruteForce) {
    for (int seed = 0; seed < 10; ++seed) {
        for (std::size_t k : {1u, 2u, 3u}) {
            const auto r = fbtest::check_mir_brute_force(seed, 3, k);
            EXPECT_TRUE(r.ok) << "seed " << seed << " k " << k << ": " << r.detail;
        }
    }
}

TEST(Mir, SelectedScoresDominateUnselected) {
    for (int seed = 0; seed < 10; ++seed) {
        const auto r = fbtest::check_mir_brute_force(seed, 25, 6);
        EXPECT_TRUE(r.ok) << "seed " << seed << ": " << r.detail;
    }
}

TEST(Mir, KAtLeastCandidatesReturnsAllSorted) {
    const auto r = fbtest::check_mir_brute_force(3, 5, 50);
    EXPECT_TRUE(r.ok) << r.detail;
}

TEST(Mir, EmptyOrCurrentTaskOnlyBufferSelectsNothing) {
    const auto model = models::build_model(fbtest::toy_config(Architecture::ann, 12, 6), 1);
    const auto u = fbtest::make_utterance({3, 4}, 1);
    const std::vector<Sample> batch = {Sample{u.token_ids, u.attention_mask, u.label_id}};
    ReplayBuffer buf(10, 1);
    Rng rng(1);
    EXPECT_TRUE(mir_select(*model, batch, buf, 1, {}, nullptr, rng).empty());
    buf.add(batch[0], 1);
    EXPECT_TRUE(mir_select(*model, batch, buf, 1, {}, nullptr, rng).empty());
    EXPECT_EQ(mir_select(*model, batch, buf, 2, {}, nullptr, rng).size(), 1u);
}

TEST(Mir, CandidateSubsampleIsSeeded) {
    const auto model = models::build_model(fbtest::toy_config(Architecture::ann, 12, 6), 1);
    ReplayBuffer buf(100, 1);
    std::vector<data::Utterance> utts;
    for (int i = 0; i < 40; ++i) utts.push_back(fbtest::make_utterance({2 + i % 10, 3 + i % 7}, i % 3));
    for (const auto& s : trainer::as_samples(utts)) buf.add(s, 1);
    const auto batch = trainer::as_samples(std::span(utts).subspan(0, 4));
    MirConfig cfg;
    cfg.k = 5;
    cfg.n_candidates = 10;
    Rng a(9), b(9);
    const auto x = mir_select(*model, batch, buf, 2, cfg, nullptr, a);
    const auto y = mir_select(*model, batch, buf, 2, cfg, nullptr, b);
    ASSERT_EQ(x.size(), 5u);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(x[i].index, y[i].index);
        EXPECT_EQ(x[i].score, y[i].score);
    }
}

// ------------------------------------------------------------------ LwF

TEST(Lwf, IdentitiesAreExact) {
    for (int seed = 0; seed < 5; ++seed) {
        const auto r = fbtest::check_lwf_identities(seed);
        EXPECT_TRUE(r.ok) << "seed " << seed << ": " << r.detail;
    }
}

// z_old = e_0, z_new = e_1 over 150 logits, T = 2. With Z = e^0.5 + 149 the
// two softened distributions differ only in positions 0 and 1, and
// KL = 0.5 (e^0.5 - 1) / Z.
TEST(Lwf, OneHundredFiftyLogitExample) {
    std::vector<double> old_z(150, 0.0), new_z(150, 0.0);
    old_z[0] = 1.0;
    new_z[1] = 1.0;
    const double e = std::exp(0.5);
    const double kl = 0.5 * (e - 1.0) / (e + 149.0);
    Tape tape;
    const Tensor task = Tensor::scalar(0.7);
    const std::vector<Tensor> fresh = {Tensor::vector(new_z, true)};
    const std::vector<Tensor> old = {Tensor::vector(old_z)};
    const Tensor loss = lwf_loss(tape, task, fresh, old, 2.0, 1.0);
    EXPECT_NEAR(loss.item(), 0.7 + 4.0 * kl, 1e-12);

    // Two logits: 4 * 0.5 * tanh(0.25).
    Tape t2;
    const std::vector<Tensor> fresh2 = {Tensor::vector({0.0, 1.0}, true)};
    const std::vector<Tensor> old2 = {Tensor::vector({1.0, 0.0})};
    EXPECT_NEAR(lwf_loss(t2, Tensor::scalar(0.0), fresh2, old2, 2.0, 1.0).item(), 0.48984, 1e-5);
}

TEST(Lwf, GradientOnlyReachesStudent) {
    Tape tape;
    Tensor fresh = Tensor::vector({0.3, -0.2, 0.5}, true);
    Tensor old = Tensor::vector({0.1, 0.4, -0.3}, true);
    const std::vector<Tensor> f = {fresh}, o = {old};
    tape.backward(lwf_loss(tape, Tensor::scalar(0.0), f, o, 2.0, 1.0));
    EXPECT_TRUE(fresh.has_grad());
    EXPECT_FALSE(old.has_grad());
}

TEST(Lwf, SeenClassRestriction) {
    std::vector<double> old_z = {1.0, 0.0, 5.0}, new_z = {0.0, 1.0, -5.0};
    const std::vector<std::size_t> classes = {0, 1};
    Tape tape;
    const std::vector<Tensor> f = {Tensor::vector(new_z, true)}, o = {Tensor::vector(old_z)};
    // Restricted to the first two logits this is the two-logit example.
    EXPECT_NEAR(lwf_loss(tape, Tensor::scalar(0.0), f, o, 2.0, 1.0, classes).item(), 2.0 * std::tanh(0.25), 1e-12);
}

TEST(Lwf, Errors) {
    Tape tape;
    const std::vector<Tensor> f = {Tensor::vector({0.0, 1.0}, true)}, o = {Tensor::vector({1.0, 0.0})};
    EXPECT_THROW(lwf_loss(tape, Tensor::scalar(0.0), f, o, 0.0, 1.0), ConfigError);
    EXPECT_THROW(lwf_loss(tape, Tensor::scalar(0.0), f, o, -1.0, 1.0), ConfigError);
    EXPECT_THROW(lwf_loss(tape, Tensor::scalar(0.0), f, o, 2.0, -0.1), ConfigError);
    const std::vector<Tensor> none;
    EXPECT_THROW(lwf_loss(tape, Tensor::scalar(0.0), f, none, 2.0, 1.0), ShapeError);
}

// ------------------------------------------------------------------ HAT

TEST(Hat, GateExamples) {
    const std::vector<double> zero = {0.0, 0.0, 0.0};
    for (double g : hat_gates(zero, 50.0)) EXPECT_EQ(g, 0.5);
    const std::vector<double> sat = {0.1, -0.1};
    const auto a = hat_gates(sat, 400.0);
    EXPECT_NEAR(a[0], 1.0, 1e-9);
    EXPECT_NEAR(a[1], 0.0, 1e-9);
    const std::vector<double> half = {0.5};
    EXPECT_NEAR(hat_gates(half, 1.0)[0], 0.62246, 1e-5);
}

TEST(Hat, CumulateIsElementwiseMax) {
    HatState hat({{"x", 2}}, 1.0, 1);
    // Embeddings giving gates 0.2, 0.9 and then 0.7, 0.1.
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    hat.set_embeddings(1, {{logit(0.2), logit(0.9)}});
    hat.set_embeddings(2, {{logit(0.7), logit(0.1)}});
    hat.cumulate(1);
    EXPECT_NEAR(hat.cumulative_masks()[0][0], 0.2, 1e-12);
    EXPECT_NEAR(hat.cumulative_masks()[0][1], 0.9, 1e-12);
    hat.cumulate(2);
    EXPECT_NEAR(hat.cumulative_masks()[0][0], 0.7, 1e-12);
    EXPECT_NEAR(hat.cumulative_masks()[0][1], 0.9, 1e-12);
}

TEST(Hat, EmbeddingsSeededAndBounded) {
    HatState a({{"x", 50}}, 50.0, 3), b({{"x", 50}}, 50.0, 3);
    const auto& ea = a.embeddings(4)[0];
    const auto& eb = b.embeddings(4)[0];
    EXPECT_TRUE(std::equal(ea.data().begin(), ea.data().end(), eb.data().begin()));
    EXPECT_TRUE(ea.requires_grad());
    for (double v : ea.data()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LT(v, 1.0);
    }
    const auto& other = a.embeddings(5)[0];
    EXPECT_FALSE(std::equal(ea.data().begin(), ea.data().end(), other.data().begin()));
}

TEST(Hat, MonotoneMasksAndFullProtection) {
    for (int seed = 0; seed < 3; ++seed) {
        const auto r = fbtest::check_hat_protection(seed);
        EXPECT_TRUE(r.ok) << "seed " << seed << ": " << r.detail;
    }
}

TEST(Hat, ScaleGradientsMatchesRuleOracle) {
    for (Architecture arch : {Architecture::ann, Architecture::gru, Architecture::transformer}) {
        for (int seed = 0; seed < 5; ++seed) {
            const auto m = models::build_model(fbtest::toy_config(arch, 12, 6), 10 + seed);
            {
                Tape tape;
                const std::vector<int> ids = {3, 5, 7}, mask = {1, 1, 1};
                tape.backward(ops::softmax_cross_entropy(tape, m->forward(tape, ids, mask, {}), 2));
            }
            Rng rng(20 + seed);
            std::vector<std::vector<double>> masks;
            for (const auto& l : m->maskable_layers()) {
                std::vector<double> v(l.width);
                for (double& x : v) {
                    const double u = rng.uniform();
                    x = u < 0.2 ? 0.0 : (u < 0.4 ? 1.0 : rng.uniform());
                }
                masks.push_back(v);
            }
            const auto expected = apply_rule(*m, grads_of(*m), masks);
            hat_scale_gradients(*m, masks);
            const auto got = grads_of(*m);
            for (std::size_t p = 0; p < got.size(); ++p) {
                EXPECT_EQ(got[p], expected[p]) << to_string(arch) << " " << m->parameters()[p].name;
            }
        }
    }
}

TEST(Hat, ZeroMasksLeaveGradientsAndOnesZeroThem) {
    const auto m = models::build_model(fbtest::toy_config(Architecture::ann, 12, 6), 1);
    {
        Tape tape;
        const std::vector<int> ids = {3, 5}, mask = {1, 1};
        tape.backward(ops::softmax_cross_entropy(tape, m->forward(tape, ids, mask, {}), 2));
    }
    const auto before = grads_of(*m);
    hat_scale_gradients(*m, {std::vector<double>(16, 0.0)});
    EXPECT_EQ(grads_of(*m), before);
    hat_scale_gradients(*m, {std::vector<double>(16, 1.0)});
    for (double g : m->parameters()[1].value.grad()) EXPECT_EQ(g, 0.0);
    for (double g : m->parameters()[2].value.grad()) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(grads_of(*m)[3], before[3]);
}

// ------------------------------------------------------------------ composition

TEST(StrategySet, ParseAndName) {
    const std::vector<std::string> mixed = {"HAT", "mir"};
    EXPECT_EQ(StrategySet::parse(mixed).name(), "mir+hat");
    EXPECT_EQ(StrategySet::parse("naive"), StrategySet{});
    EXPECT_EQ(StrategySet::parse(std::vector<std::string>{}), StrategySet{});
    EXPECT_EQ(StrategySet::parse("lwf,mir").name(), "mir+lwf");
    EXPECT_EQ(StrategySet::all().size(), 8u);
    EXPECT_EQ(StrategySet::all().front().name(), "naive");
    EXPECT_THROW(StrategySet::parse("ewc"), ConfigError);
    EXPECT_THROW(StrategySet::parse("mir+mir"), ConfigError);
    EXPECT_THROW(StrategySet::parse("naive+hat"), ConfigError);
    try {
        StrategySet::parse("packnet");
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("mir, lwf, hat"), std::string::npos);
    }
}

TEST(StrategyConfig, Validation) {
    StrategyConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lwf_temperature = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.hat_scale = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lwf_alpha = -0.5;
    EXPECT_THROW(c.validate(), ConfigError);
}

// With no strategy the learner is plain fine-tuning: same dropout stream, mean
// cross-entropy and a fresh Adam per task, written here by hand.
TEST(Composition, EmptySetIsNaiveTrajectory) {
    const auto data = fbtest::separable_fixture(2, 3, 6, 2, 4);
    const auto cfg = fbtest::toy_config(Architecture::ann, data.vocab.size(), 6);
    const auto a = models::build_model(cfg, 5);
    const auto b = models::build_model(cfg, 5);
    Learner learner(*a, {}, {}, OptimizerKind::adam, 1e-2, 7);
    Rng drop_a(11), drop_b(11), mir(1);
    for (std::size_t t = 1; t <= 2; ++t) {
        const auto& task = data.tasks[t - 1];
        learner.begin_task(t, task.label_set);
        auto opt = make_optimizer(OptimizerKind::adam, 1e-2);
        const auto samples = trainer::as_samples(task.train);
        for (std::size_t s = 0; s < samples.size(); s += 4) {
            const auto batch = std::span(samples).subspan(s, std::min<std::size_t>(4, samples.size() - s));
            learner.step(batch, drop_a, mir);

            auto params = b->parameter_tensors();
            for (auto& p : params) p.zero_grad();
            Tape tape;
            models::ForwardOptions o;
            o.training = true;
            o.dropout_rng = &drop_b;
            std::vector<Tensor> terms;
            for (const auto& x : batch) {
                terms.push_back(ops::softmax_cross_entropy(tape, b->forward(tape, x.token_ids, x.attention_mask, o),
                                                           static_cast<std::size_t>(x.label)));
            }
            tape.backward(ops::scale(tape, ops::add_n(tape, terms), 1.0 / static_cast<double>(batch.size())));
            opt->step(params);
            ASSERT_EQ(values_of(*a), values_of(*b)) << "task " << t << " step " << s;
        }
        learner.end_task();
    }
    EXPECT_TRUE(learner.buffer().empty());
    EXPECT_EQ(learner.teacher(), nullptr);
}

TEST(Composition, MirOnFirstTaskEqualsNaive) {
    const auto data = fbtest::separable_fixture(2, 3, 8, 2, 4);
    const auto cfg = fbtest::toy_config(Architecture::gru, data.vocab.size(), 6);
    const auto a = models::build_model(cfg, 5);
    const auto b = models::build_model(cfg, 5);
    Learner mir_learner(*a, StrategySet{true, false, false}, {}, OptimizerKind::adam, 1e-2, 7);
    Learner naive(*b, {}, {}, OptimizerKind::adam, 1e-2, 7);
    mir_learner.begin_task(1, data.tasks[0].label_set);
    naive.begin_task(1, data.tasks[0].label_set);
    Rng d1(3), d2(3), m1(4), m2(4);
    const auto samples = trainer::as_samples(data.tasks[0].train);
    for (int epoch = 0; epoch < 3; ++epoch) {
        for (std::size_t s = 0; s < samples.size(); s += 5) {
            const auto batch = std::span(samples).subspan(s, std::min<std::size_t>(5, samples.size() - s));
            const auto ra = mir_learner.step(batch, d1, m1);
            const auto rb = naive.step(batch, d2, m2);
            EXPECT_EQ(ra.replayed, 0u);
            EXPECT_EQ(ra.loss, rb.loss);
        }
    }
    EXPECT_EQ(values_of(*a), values_of(*b));
    EXPECT_EQ(mir_learner.buffer().seen_count(), 3 * samples.size());
}

// One step of MIR + LwF + HAT on task 2 against separately computed pieces:
// the replay choice, the task loss, the distillation term, and the masked
// gradient.
TEST(Composition, FullStepDecomposes) {
    const auto data = fbtest::separable_fixture(2, 3, 8, 2, 6);
    const auto cfg = fbtest::toy_config(Architecture::ann, data.vocab.size(), 6);
    const auto ma = models::build_model(cfg, 8);
    const auto mb = models::build_model(cfg, 8);
    StrategyConfig sc;
    sc.mir.k = 3;
    sc.lwf_alpha = 0.7;
    sc.lwf_temperature = 3.0;
    const StrategySet all{true, true, true};
    Learner la(*ma, all, sc, OptimizerKind::adam, 1e-2, 9);
    Learner lb(*mb, all, sc, OptimizerKind::adam, 1e-2, 9);
    for (Learner* l : {&la, &lb}) {
        Rng drop(1), mir(2);
        l->begin_task(1, data.tasks[0].label_set);
        train_task(*l, data.tasks[0], 2, drop, mir);
        l->end_task();
        l->begin_task(2, data.tasks[1].label_set);
    }
    ASSERT_EQ(values_of(*ma), values_of(*mb));

    const auto batch_all = trainer::as_samples(data.tasks[1].train);
    const auto batch = std::span(batch_all).subspan(0, 6);
    Rng drop_a(5), mir_a(6), drop_b(5), mir_b(6);
    const auto result = la.step(batch, drop_a, mir_a);

    // Replay choice.
    const auto gates = lb.hat()->gate_values(2);
    const auto chosen = mir_select(*mb, batch, lb.buffer(), 2, sc.mir, &gates, mir_b);
    ASSERT_EQ(chosen.size(), 3u);
    EXPECT_EQ(result.replayed, 3u);
    std::vector<Sample> samples(batch.begin(), batch.end());
    for (const auto& c : chosen) samples.push_back(lb.buffer().items()[c.index].sample());

    // Task loss and raw gradient with constant gates of the same value.
    for (auto& p : mb->parameters()) p.value.zero_grad();
    Tape tape;
    models::ForwardOptions o;
    o.training = true;
    o.dropout_rng = &drop_b;
    o.gates = &gates;
    std::vector<Tensor> logits;
    double task = 0.0;
    std::vector<Tensor> terms;
    for (const auto& s : samples) {
        logits.push_back(mb->forward(tape, s.token_ids, s.attention_mask, o));
        terms.push_back(ops::softmax_cross_entropy(tape, logits.back(), static_cast<std::size_t>(s.label)));
        task += fbtest::cross_entropy_ref(logits.back().data(), s.label);
    }
    task /= static_cast<double>(samples.size());
    EXPECT_NEAR(result.task_loss, task, 1e-12);

    // Distillation term by direct arithmetic on the logits.
    double distill = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto old = lb.teacher()->logits(samples[i], &gates);
        const auto zn = logits[i].data();
        const auto zo = old.data();
        const double T = sc.lwf_temperature;
        double mo = -1e300, mn = -1e300;
        for (std::size_t c = 0; c < zn.size(); ++c) {
            mo = std::max(mo, zo[c] / T);
            mn = std::max(mn, zn[c] / T);
        }
        double so = 0.0, sn = 0.0;
        for (std::size_t c = 0; c < zn.size(); ++c) {
            so += std::exp(zo[c] / T - mo);
            sn += std::exp(zn[c] / T - mn);
        }
        double kl = 0.0;
        for (std::size_t c = 0; c < zn.size(); ++c) {
            const double lp = zo[c] / T - mo - std::log(so);
            const double lq = zn[c] / T - mn - std::log(sn);
            kl += std::exp(lp) * (lp - lq);
        }
        distill += T * T * kl;
    }
    distill /= static_cast<double>(samples.size());
    EXPECT_NEAR(result.loss, task + sc.lwf_alpha * distill, 1e-12);

    // Masked gradient: the learner's stored gradients against the rule applied
    // to the unmasked gradient of the same loss.
    std::vector<Tensor> old_logits;
    for (const auto& s : samples) old_logits.push_back(lb.teacher()->logits(s, &gates));
    const Tensor task_t = ops::scale(tape, ops::add_n(tape, terms), 1.0 / static_cast<double>(samples.size()));
    tape.backward(lwf_loss(tape, task_t, logits, old_logits, sc.lwf_temperature, sc.lwf_alpha));
    const auto expected = apply_rule(*mb, grads_of(*mb), lb.hat()->cumulative_masks());
    const auto got = grads_of(*ma);
    for (std::size_t p = 0; p < got.size(); ++p) {
        ASSERT_EQ(got[p].size(), expected[p].size());
        for (std::size_t i = 0; i < got[p].size(); ++i) {
            EXPECT_NEAR(got[p][i], expected[p][i], 1e-12) << ma->parameters()[p].name << "[" << i << "]";
        }
    }
    // Buffer grew by the original batch only.
    EXPECT_EQ(la.buffer().seen_count(), lb.buffer().seen_count() + batch.size());
}

TEST(Learner, StepBeforeBeginTaskIsStateError) {
    const auto m = models::build_model(fbtest::toy_config(Architecture::ann, 12, 6), 1);
    Learner l(*m, {}, {}, OptimizerKind::adam, 1e-3, 1);
    const auto u = fbtest::make_utterance({3}, 1);
    const std::vector<Sample> batch = {Sample{u.token_ids, u.attention_mask, 1}};
    Rng a(1), b(2);
    EXPECT_THROW(l.step(batch, a, b), StateError);
    l.begin_task(1, {0, 1});
    EXPECT_THROW(l.step(std::span<const Sample>(), a, b), DataError);
    EXPECT_THROW(l.begin_task(0, {}), ConfigError);
}

TEST(Learner, EndTaskRecordsSeenClassesAndTeacher) {
    const auto data = fbtest::separable_fixture(2, 3, 4, 2, 1);
    const auto m = models::build_model(fbtest::toy_config(Architecture::ann, data.vocab.size(), 6), 1);
    Learner l(*m, StrategySet{false, true, true}, {}, OptimizerKind::adam, 1e-3, 1);
    Rng drop(1), mir(1);
    l.begin_task(1, data.tasks[0].label_set);
    train_task(l, data.tasks[0], 1, drop, mir);
    l.end_task();
    EXPECT_EQ(l.seen_classes(), data.tasks[0].label_set);
    ASSERT_NE(l.teacher(), nullptr);
    EXPECT_EQ(l.teacher()->snapshot_task(), 1u);
    EXPECT_TRUE(l.eval_gates(1).has_value());
    for (double v : l.hat()->cumulative_masks()[0]) {
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
