#include <cmath>

#include "forgetbench/error.hpp"
#include "forgetbench/models.hpp"
#include "forgetbench/ops.hpp"

namespace forgetbench::models {

namespace {

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

void check_sequence(std::span<const int> ids, std::span<const int> mask) {
    if (ids.size() != mask.size()) {
        throw ShapeError("token ids and attention mask differ in length");
    }
    bool any = false;
    for (int m : mask) {
        if (m != 0 && m != 1) {
            throw ShapeError("attention mask entries must be 0 or 1");
        }
        any = any || m == 1;
    }
    if (!any) {
        throw StateError("input sequence is all padding");
    }
}

Tensor apply_gate(Tape& tape, const Tensor& x, const Tensor* gate) {
    return gate == nullptr ? x : ops::mul_rows(tape, x, *gate);
}

}  // namespace

// ---------------------------------------------------------------- ANN

// Parameter order: embedding, hidden weight, hidden bias, output weight, output bias.
AnnModel::AnnModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(seed);
    const std::size_t e = config.embed_dim, h = config.hidden_dim, c = config.num_classes;
    num_classes_ = c;
    add_maskable("hidden", h);
    add_parameter("embedding", {config.vocab_size, e}, fan_in_bound(e), rng);
    add_parameter("hidden.weight", {h, e}, fan_in_bound(e), rng, {0, -1});
    add_parameter("hidden.bias", {h}, fan_in_bound(e), rng, {0, -1});
    add_parameter("output.weight", {c, h}, fan_in_bound(h), rng);
    add_parameter("output.bias", {c}, fan_in_bound(h), rng);
}

Tensor AnnModel::forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                         const ForwardOptions& options) const {
    check_sequence(token_ids, attention_mask);
    check_gates(options);
    const Tensor embedded = ops::embedding_lookup(tape, param(0), token_ids);
    const Tensor pooled = ops::masked_mean_pool(tape, embedded, attention_mask);
    Tensor hidden = ops::relu(tape, ops::linear(tape, pooled, param(1), param(2)));
    hidden = ops::dropout(tape, hidden, config_.dropout_p, options.training, options.dropout_rng);
    hidden = apply_gate(tape, hidden, gate(options, 0));
    return ops::linear(tape, hidden, param(3), param(4));
}

std::unique_ptr<Model> AnnModel::clone() const {
    auto copy = std::make_unique<AnnModel>(*this);
    copy->deep_copy_parameters();
    return copy;
}

// ---------------------------------------------------------------- GRU

// Parameter order: embedding, gru.weight_x, gru.weight_h, gru.bias, output weight, output bias.
GruModel::GruModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(seed);
    const std::size_t e = config.embed_dim, h = config.hidden_dim, c = config.num_classes;
    num_classes_ = c;
    add_maskable("final_state", h);
    add_parameter("embedding", {config.vocab_size, e}, fan_in_bound(e), rng);
    // Rows of the stacked gate matrices map to hidden unit (row mod h).
    add_parameter("gru.weight_x", {3 * h, e}, fan_in_bound(h), rng, {0, -1});
    add_parameter("gru.weight_h", {3 * h, h}, fan_in_bound(h), rng, {0, 0});
    add_parameter("gru.bias", {3 * h}, fan_in_bound(h), rng, {0, -1});
    add_parameter("output.weight", {c, h}, fan_in_bound(h), rng);
    add_parameter("output.bias", {c}, fan_in_bound(h), rng);
}

Tensor GruModel::forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                         const ForwardOptions& options) const {
    check_sequence(token_ids, attention_mask);
    check_gates(options);
    Tensor state = Tensor::zeros({config_.hidden_dim});
    for (std::size_t t = 0; t < token_ids.size(); ++t) {
        if (attention_mask[t] == 0) {
            continue;
        }
        const Tensor x = ops::embedding_lookup(tape, param(0), token_ids.subspan(t, 1));
        state = ops::gru_cell(tape, x, state, param(1), param(2), param(3));
    }
    const Tensor feature = apply_gate(tape, state, gate(options, 0));
    return ops::linear(tape, feature, param(4), param(5));
}

std::unique_ptr<Model> GruModel::clone() const {
    auto copy = std::make_unique<GruModel>(*this);
    copy->deep_copy_parameters();
    return copy;
}

// ---------------------------------------------------------------- Transformer

// Parameter order: embedding; per block (ln1.gain, ln1.offset, wq, bq, wk, bk,
// wv, bv, wo, bo, ln2.gain, ln2.offset, ffn.w1, ffn.b1, ffn.w2, ffn.b2); final
// norm gain and offset; output weight and bias.
//
// Gradient rules: everything that writes into the residual stream is indexed by
// the pooled-feature units (the last maskable layer), the first feed-forward
// projection by its block's hidden units.
TransformerModel::TransformerModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.embed_dim, c = config.num_classes, ff = 4 * d;
    num_classes_ = c;
    const int pooled = static_cast<int>(config.num_layers);
    for (std::size_t b = 0; b < config.num_layers; ++b) {
        add_maskable("block" + std::to_string(b) + ".ffn", ff);
    }
    add_maskable("pooled", d);

    const double bd = fan_in_bound(d);
    add_parameter("embedding", {config.vocab_size, d}, bd, rng);
    for (std::size_t b = 0; b < config.num_layers; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        const int ffn = static_cast<int>(b);
        add_constant_parameter(p + "ln1.gain", {d}, 1.0);
        add_constant_parameter(p + "ln1.offset", {d}, 0.0);
        add_parameter(p + "attn.wq", {d, d}, bd, rng);
        add_parameter(p + "attn.bq", {d}, bd, rng);
        add_parameter(p + "attn.wk", {d, d}, bd, rng);
        add_parameter(p + "attn.bk", {d}, bd, rng);
        add_parameter(p + "attn.wv", {d, d}, bd, rng);
        add_parameter(p + "attn.bv", {d}, bd, rng);
        add_parameter(p + "attn.wo", {d, d}, bd, rng, {pooled, -1});
        add_parameter(p + "attn.bo", {d}, bd, rng, {pooled, -1});
        add_constant_parameter(p + "ln2.gain", {d}, 1.0);
        add_constant_parameter(p + "ln2.offset", {d}, 0.0);
        add_parameter(p + "ffn.w1", {ff, d}, bd, rng, {ffn, -1});
        add_parameter(p + "ffn.b1", {ff}, bd, rng, {ffn, -1});
        add_parameter(p + "ffn.w2", {d, ff}, fan_in_bound(ff), rng, {pooled, ffn});
        add_parameter(p + "ffn.b2", {d}, fan_in_bound(ff), rng, {pooled, -1});
    }
    add_constant_parameter("final_norm.gain", {d}, 1.0, {pooled, -1});
    add_constant_parameter("final_norm.offset", {d}, 0.0, {pooled, -1});
    add_parameter("output.weight", {c, d}, bd, rng);
    add_parameter("output.bias", {c}, bd, rng);
}

Tensor TransformerModel::forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                                 const ForwardOptions& options) const {
    check_sequence(token_ids, attention_mask);
    check_gates(options);
    const std::size_t d = config_.embed_dim;

    // Padded positions are excluded from attention keys and from pooling, so the
    // encoder runs on the unmasked positions only; each keeps its own position
    // index for the sinusoidal encoding.
    std::vector<int> ids;
    std::vector<double> positions;
    for (std::size_t t = 0; t < token_ids.size(); ++t) {
        if (attention_mask[t] == 1) {
            ids.push_back(token_ids[t]);
            const auto pe = positional_encoding(t, d);
            positions.insert(positions.end(), pe.begin(), pe.end());
        }
    }
    const std::size_t len = ids.size();
    const std::vector<int> all_valid(len, 1);
    const Tensor position_codes = Tensor::from({len, d}, std::move(positions));

    Tensor x = ops::add(tape, ops::embedding_lookup(tape, param(0), ids), position_codes);
    for (std::size_t b = 0; b < config_.num_layers; ++b) {
        const std::size_t base = 1 + b * kParamsPerBlock;
        const Tensor normed = ops::layer_norm(tape, x, param(base + 0), param(base + 1));
        const ops::AttentionWeights weights{param(base + 2), param(base + 3), param(base + 4), param(base + 5),
                                            param(base + 6), param(base + 7), param(base + 8), param(base + 9)};
        Tensor attended = ops::self_attention(tape, normed, all_valid, weights, config_.num_heads);
        attended = ops::dropout(tape, attended, config_.dropout_p, options.training, options.dropout_rng);
        x = ops::add(tape, x, attended);

        const Tensor normed2 = ops::layer_norm(tape, x, param(base + 10), param(base + 11));
        Tensor hidden = ops::relu(tape, ops::linear(tape, normed2, param(base + 12), param(base + 13)));
        hidden = ops::dropout(tape, hidden, config_.dropout_p, options.training, options.dropout_rng);
        hidden = apply_gate(tape, hidden, gate(options, b));
        Tensor projected = ops::linear(tape, hidden, param(base + 14), param(base + 15));
        projected = ops::dropout(tape, projected, config_.dropout_p, options.training, options.dropout_rng);
        x = ops::add(tape, x, projected);
    }
    const std::size_t tail = 1 + config_.num_layers * kParamsPerBlock;
    const Tensor normed = ops::layer_norm(tape, x, param(tail), param(tail + 1));
    Tensor pooled = ops::masked_mean_pool(tape, normed, all_valid);
    pooled = apply_gate(tape, pooled, gate(options, config_.num_layers));
    return ops::linear(tape, pooled, param(tail + 2), param(tail + 3));
}

std::unique_ptr<Model> TransformerModel::clone() const {
    auto copy = std::make_unique<TransformerModel>(*this);
    copy->deep_copy_parameters();
    return copy;
}

}  // namespace forgetbench::models
