#include "forgetbench/strategies.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "forgetbench/error.hpp"
#include "forgetbench/ops.hpp"

namespace forgetbench::strategies {

namespace {

// Stream identifiers for Rng::derive.
constexpr std::uint64_t kBufferStream = 0xb0ff;
constexpr std::uint64_t kHatStream = 0x4a7;

void zero_all(std::vector<Tensor>& tensors) {
    for (Tensor& t : tensors) {
        t.zero_grad();
    }
}

}  // namespace

Tensor batch_loss(Tape& tape, const models::Model& model, std::span<const Sample> batch,
                  const models::ForwardOptions& options, std::vector<Tensor>* logits) {
    if (batch.empty()) {
        throw DataError("cannot compute the loss of an empty batch");
    }
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const Sample& s : batch) {
        Tensor z = model.forward(tape, s.token_ids, s.attention_mask, options);
        if (s.label < 0) {
            throw IndexError("negative class label");
        }
        losses.push_back(ops::softmax_cross_entropy(tape, z, static_cast<std::size_t>(s.label)));
        if (logits != nullptr) {
            logits->push_back(std::move(z));
        }
    }
    const Tensor total = losses.size() == 1 ? losses.front() : ops::add_n(tape, losses);
    return ops::scale(tape, total, 1.0 / static_cast<double>(batch.size()));
}

double example_loss(const models::Model& model, const Sample& sample, const models::Gates* gates) {
    Tape tape = Tape::inference();
    models::ForwardOptions options;
    options.gates = gates;
    const Tensor z = model.forward(tape, sample.token_ids, sample.attention_mask, options);
    return ops::softmax_cross_entropy(tape, z, static_cast<std::size_t>(sample.label)).item();
}

// ------------------------------------------------------------------ replay

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
    if (capacity == 0) {
        throw ConfigError("replay buffer capacity must be at least 1");
    }
}

void ReplayBuffer::add(const Sample& sample, std::size_t task_index) {
    const std::uint64_t sequence = seen_++;
    ReplayItem item{{sample.token_ids.begin(), sample.token_ids.end()},
                    {sample.attention_mask.begin(), sample.attention_mask.end()},
                    sample.label,
                    task_index,
                    sequence};
    if (items_.size() < capacity_) {
        items_.push_back(std::move(item));
        return;
    }
    const std::uint64_t slot = rng_.below(seen_);
    if (slot < capacity_) {
        items_[slot] = std::move(item);
    }
}

void ReplayBuffer::restore(std::vector<ReplayItem> items, std::uint64_t seen_count) {
    if (items.size() > capacity_ || items.size() > seen_count) {
        throw DataError("replay buffer checkpoint holds more items than it can");
    }
    items_ = std::move(items);
    seen_ = seen_count;
}

std::vector<MirCandidate> mir_select(models::Model& model, std::span<const Sample> batch, const ReplayBuffer& buffer,
                                     std::size_t current_task, const MirConfig& config, const models::Gates* gates,
                                     Rng& rng) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < buffer.items().size(); ++i) {
        if (buffer.items()[i].task_index < current_task) {
            eligible.push_back(i);
        }
    }
    if (eligible.empty() || config.k == 0 || batch.empty()) {
        return {};
    }
    if (config.n_candidates != 0 && config.n_candidates < eligible.size()) {
        // Partial Fisher-Yates: the first n slots become a uniform sample
        // without replacement; restore buffer order afterwards.
        for (std::size_t i = 0; i < config.n_candidates; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(eligible.size() - i));
            std::swap(eligible[i], eligible[j]);
        }
        eligible.resize(config.n_candidates);
        std::sort(eligible.begin(), eligible.end());
    }

    std::vector<Tensor> params = model.parameter_tensors();
    std::vector<std::vector<double>> saved_grads(params.size());
    std::vector<bool> had_grad(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        had_grad[p] = params[p].has_grad();
        if (had_grad[p]) {
            saved_grads[p].assign(params[p].grad().begin(), params[p].grad().end());
        }
    }
    zero_all(params);

    models::ForwardOptions options;
    options.gates = gates;
    {
        Tape tape;
        const Tensor loss = batch_loss(tape, model, batch, options);
        tape.backward(loss);
    }

    std::vector<double> before(eligible.size());
    for (std::size_t c = 0; c < eligible.size(); ++c) {
        before[c] = example_loss(model, buffer.items()[eligible[c]].sample(), gates);
    }

    std::vector<std::vector<double>> saved_values(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].mutable_data();
        saved_values[p].assign(values.begin(), values.end());
        if (!params[p].has_grad()) {
            continue;
        }
        const auto grad = params[p].grad();
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] -= config.eta_virtual * grad[i];
        }
    }
    std::vector<MirCandidate> scored(eligible.size());
    try {
        for (std::size_t c = 0; c < eligible.size(); ++c) {
            const double after = example_loss(model, buffer.items()[eligible[c]].sample(), gates);
            scored[c] = MirCandidate{eligible[c], after - before[c]};
        }
    } catch (...) {
        for (std::size_t p = 0; p < params.size(); ++p) {
            std::copy(saved_values[p].begin(), saved_values[p].end(), params[p].mutable_data().begin());
        }
        throw;
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::copy(saved_values[p].begin(), saved_values[p].end(), params[p].mutable_data().begin());
        params[p].zero_grad();
        if (had_grad[p]) {
            auto g = params[p].mutable_grad();
            std::copy(saved_grads[p].begin(), saved_grads[p].end(), g.begin());
        }
    }

    const auto& items = buffer.items();
    std::stable_sort(scored.begin(), scored.end(), [&](const MirCandidate& a, const MirCandidate& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return items[a.index].sequence < items[b.index].sequence;
    });
    if (scored.size() > config.k) {
        scored.resize(config.k);
    }
    return scored;
}

// ------------------------------------------------------------------ LwF

TeacherSnapshot::TeacherSnapshot(const models::Model& model, std::size_t snapshot_task)
    : model_(model.clone()), snapshot_task_(snapshot_task) {
    for (auto& p : model_->parameters()) {
        p.value.zero_grad();
        p.value.set_requires_grad(false);
    }
}

Tensor TeacherSnapshot::logits(const Sample& sample, const models::Gates* gates) const {
    Tape tape = Tape::inference();
    models::ForwardOptions options;
    options.gates = gates;
    return model_->forward(tape, sample.token_ids, sample.attention_mask, options);
}

Tensor lwf_loss(Tape& tape, const Tensor& task_loss, std::span<const Tensor> logits_new,
                std::span<const Tensor> logits_old, double temperature, double alpha,
                std::span<const std::size_t> classes) {
    if (!(temperature > 0.0)) {
        throw ConfigError("distillation temperature must be positive");
    }
    if (!(alpha >= 0.0)) {
        throw ConfigError("alpha_lwf must be non-negative");
    }
    if (logits_new.size() != logits_old.size()) {
        throw ShapeError("student and teacher logit lists differ in length");
    }
    if (alpha == 0.0 || logits_new.empty()) {
        return task_loss;
    }
    std::vector<Tensor> terms;
    terms.reserve(logits_new.size());
    for (std::size_t b = 0; b < logits_new.size(); ++b) {
        if (classes.empty()) {
            terms.push_back(ops::kl_div_temperature(tape, logits_old[b], logits_new[b], temperature));
        } else {
            Tape scratch = Tape::inference();
            const Tensor old_sel = ops::index_select(scratch, logits_old[b], classes);
            const Tensor new_sel = ops::index_select(tape, logits_new[b], classes);
            terms.push_back(ops::kl_div_temperature(tape, old_sel, new_sel, temperature));
        }
    }
    const Tensor total = terms.size() == 1 ? terms.front() : ops::add_n(tape, terms);
    const double factor = alpha * temperature * temperature / static_cast<double>(terms.size());
    const Tensor distill = ops::scale(tape, total, factor);
    return ops::add(tape, task_loss, distill);
}

// ------------------------------------------------------------------ HAT

std::vector<double> hat_gates(std::span<const double> embedding, double scale) {
    std::vector<double> out(embedding.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 1.0 / (1.0 + std::exp(-scale * embedding[i]));
    }
    return out;
}

HatState::HatState(std::vector<models::MaskableLayer> layers, double scale, std::uint64_t seed)
    : layers_(std::move(layers)), scale_(scale), seed_(seed) {
    if (!(scale > 0.0)) {
        throw ConfigError("HAT scale s must be positive");
    }
    for (const auto& layer : layers_) {
        masks_.emplace_back(layer.width, 0.0);
    }
}

bool HatState::has_task(std::size_t task) const {
    return std::any_of(embeddings_.begin(), embeddings_.end(), [&](const auto& e) { return e.first == task; });
}

std::vector<Tensor>& HatState::embeddings(std::size_t task) {
    for (auto& [t, e] : embeddings_) {
        if (t == task) {
            return e;
        }
    }
    Rng rng(Rng::derive(seed_, {kHatStream, task}));
    std::vector<Tensor> created;
    for (const auto& layer : layers_) {
        std::vector<double> values(layer.width);
        for (double& v : values) {
            v = rng.uniform(-1.0, 1.0);
        }
        created.push_back(Tensor::vector(std::move(values), true));
    }
    embeddings_.emplace_back(task, std::move(created));
    return embeddings_.back().second;
}

const std::vector<Tensor>& HatState::embeddings(std::size_t task) const {
    for (const auto& [t, e] : embeddings_) {
        if (t == task) {
            return e;
        }
    }
    throw StateError("no HAT embeddings for task " + std::to_string(task));
}

models::Gates HatState::gates(Tape& tape, std::size_t task) {
    models::Gates out;
    for (const Tensor& e : embeddings(task)) {
        out.push_back(ops::sigmoid(tape, ops::scale(tape, e, scale_)));
    }
    return out;
}

models::Gates HatState::gate_values(std::size_t task) const {
    models::Gates out;
    for (const Tensor& e : embeddings(task)) {
        out.push_back(Tensor::vector(hat_gates(e.data(), scale_)));
    }
    return out;
}

void HatState::cumulate(std::size_t task) {
    const auto& e = embeddings(task);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto a = hat_gates(e[l].data(), scale_);
        for (std::size_t i = 0; i < a.size(); ++i) {
            masks_[l][i] = std::max(masks_[l][i], a[i]);
        }
    }
}

std::vector<std::size_t> HatState::tasks() const {
    std::vector<std::size_t> out;
    for (const auto& entry : embeddings_) {
        out.push_back(entry.first);
    }
    return out;
}

void HatState::set_embeddings(std::size_t task, std::vector<std::vector<double>> values) {
    if (values.size() != layers_.size()) {
        throw DataError("HAT checkpoint has the wrong number of layers");
    }
    std::vector<Tensor> restored;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        if (values[l].size() != layers_[l].width) {
            throw DataError("HAT checkpoint embedding for " + layers_[l].id + " has the wrong width");
        }
        restored.push_back(Tensor::vector(std::move(values[l]), true));
    }
    for (auto& [t, e] : embeddings_) {
        if (t == task) {
            e = std::move(restored);
            return;
        }
    }
    embeddings_.emplace_back(task, std::move(restored));
}

void HatState::set_cumulative_masks(std::vector<std::vector<double>> masks) {
    if (masks.size() != layers_.size()) {
        throw DataError("HAT checkpoint has the wrong number of mask layers");
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        if (masks[l].size() != layers_[l].width) {
            throw DataError("HAT checkpoint mask for " + layers_[l].id + " has the wrong width");
        }
    }
    masks_ = std::move(masks);
}

void hat_scale_gradients(models::Model& model, const std::vector<std::vector<double>>& masks) {
    const auto& layers = model.maskable_layers();
    if (masks.size() != layers.size()) {
        throw ShapeError("expected " + std::to_string(layers.size()) + " cumulative masks, got " +
                         std::to_string(masks.size()));
    }
    for (auto& p : model.parameters()) {
        const auto rule = p.rule;
        if (rule.out_layer < 0 || !p.value.has_grad()) {
            continue;
        }
        const auto& m_out = masks.at(static_cast<std::size_t>(rule.out_layer));
        const std::size_t width = m_out.size();
        auto g = p.value.mutable_grad();
        const std::size_t rows = p.value.dim(0);
        const std::size_t cols = p.value.rank() == 1 ? 1 : p.value.numel() / rows;
        const std::vector<double>* m_in = nullptr;
        if (rule.in_layer >= 0) {
            m_in = &masks.at(static_cast<std::size_t>(rule.in_layer));
            if (p.value.rank() != 2 || m_in->size() != cols) {
                throw ShapeError("parameter " + p.name + " columns do not match its input layer");
            }
        }
        for (std::size_t i = 0; i < rows; ++i) {
            const double mo = m_out[i % width];
            for (std::size_t j = 0; j < cols; ++j) {
                const double m = m_in == nullptr ? mo : std::min(mo, (*m_in)[j]);
                g[i * cols + j] *= 1.0 - m;
            }
        }
    }
}

// ------------------------------------------------------------------ composition

std::string StrategySet::name() const {
    if (empty()) {
        return "naive";
    }
    std::string out;
    auto append = [&](bool on, const char* n) {
        if (on) {
            out += out.empty() ? "" : "+";
            out += n;
        }
    };
    append(mir, "mir");
    append(lwf, "lwf");
    append(hat, "hat");
    return out;
}

StrategySet StrategySet::parse(std::span<const std::string> names) {
    StrategySet set;
    bool naive = false;
    for (const std::string& raw : names) {
        std::string n(raw);
        std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
        bool* flag = nullptr;
        if (n == "mir") {
            flag = &set.mir;
        } else if (n == "lwf") {
            flag = &set.lwf;
        } else if (n == "hat") {
            flag = &set.hat;
        } else if (n == "naive") {
            naive = true;
            continue;
        } else {
            throw ConfigError("unknown strategy '" + raw + "' (valid: naive, mir, lwf, hat)");
        }
        if (*flag) {
            throw ConfigError("strategy '" + raw + "' listed twice");
        }
        *flag = true;
    }
    if (naive && !set.empty()) {
        throw ConfigError("'naive' cannot be combined with other strategies");
    }
    return set;
}

StrategySet StrategySet::parse(const std::string& joined) {
    std::vector<std::string> parts;
    std::string current;
    for (char c : joined) {
        if (c == '+' || c == ',') {
            parts.push_back(current);
            current.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            current.push_back(c);
        }
    }
    parts.push_back(current);
    if (parts.size() == 1 && parts.front().empty()) {
        return {};
    }
    return parse(parts);
}

std::vector<StrategySet> StrategySet::all() {
    std::vector<StrategySet> out;
    for (int bits = 0; bits < 8; ++bits) {
        out.push_back(StrategySet{(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0});
    }
    return out;
}

void StrategyConfig::validate() const {
    if (buffer_capacity == 0) {
        throw ConfigError("buffer_capacity must be at least 1");
    }
    if (!(mir.eta_virtual > 0.0)) {
        throw ConfigError("eta_virtual must be positive");
    }
    if (!(lwf_temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (!(lwf_alpha >= 0.0)) {
        throw ConfigError("alpha_lwf must be non-negative");
    }
    if (!(hat_scale > 0.0)) {
        throw ConfigError("HAT scale s must be positive");
    }
}

Learner::Learner(models::Model& model, StrategySet strategies, StrategyConfig config, OptimizerKind optimizer,
                 double learning_rate, std::uint64_t seed)
    : model_(model),
      strategies_(strategies),
      config_(config),
      optimizer_kind_(optimizer),
      learning_rate_(learning_rate),
      seed_(seed),
      buffer_(config.buffer_capacity, Rng::derive(seed, {kBufferStream})) {
    config_.validate();
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
    if (strategies_.hat) {
        hat_.emplace(model.maskable_layers(), config_.hat_scale, seed);
    }
}

void Learner::begin_task(std::size_t task, std::vector<int> label_set) {
    if (task == 0) {
        throw ConfigError("task indices start at 1");
    }
    task_ = task;
    task_labels_ = std::move(label_set);
    optimizer_ = make_optimizer(optimizer_kind_, learning_rate_);
    buffer_.reseed(Rng::derive(seed_, {kBufferStream, task}));
    if (hat_) {
        hat_->embeddings(task);
    }
    for (Tensor& t : trainable()) {
        t.zero_grad();
    }
}

std::vector<Tensor> Learner::trainable() const {
    std::vector<Tensor> out = model_.parameter_tensors();
    if (hat_ && task_ != 0) {
        const auto& e = std::as_const(*hat_).embeddings(task_);
        out.insert(out.end(), e.begin(), e.end());
    }
    return out;
}

StepResult Learner::step(std::span<const Sample> batch, Rng& dropout_rng, Rng& mir_rng) {
    if (task_ == 0 || !optimizer_) {
        throw StateError("begin_task must be called before step");
    }
    if (batch.empty()) {
        throw DataError("empty training batch");
    }
    std::vector<Tensor> params = trainable();
    for (Tensor& t : params) {
        t.zero_grad();
    }

    std::optional<models::Gates> constant_gates;
    if (hat_) {
        constant_gates = hat_->gate_values(task_);
    }
    const models::Gates* fixed_gates = constant_gates ? &*constant_gates : nullptr;

    std::vector<Sample> samples(batch.begin(), batch.end());
    StepResult result;
    if (strategies_.mir && !buffer_.empty()) {
        const auto chosen = mir_select(model_, batch, buffer_, task_, config_.mir, fixed_gates, mir_rng);
        for (const auto& c : chosen) {
            samples.push_back(buffer_.items()[c.index].sample());
        }
        result.replayed = chosen.size();
    }

    Tape tape;
    models::Gates gates;
    models::ForwardOptions options;
    options.training = true;
    options.dropout_rng = &dropout_rng;
    if (hat_) {
        gates = hat_->gates(tape, task_);
        options.gates = &gates;
    }
    std::vector<Tensor> logits;
    const Tensor task_loss = batch_loss(tape, model_, samples, options, &logits);
    Tensor loss = task_loss;
    if (strategies_.lwf && teacher_) {
        std::vector<Tensor> old_logits;
        old_logits.reserve(samples.size());
        for (const Sample& s : samples) {
            old_logits.push_back(teacher_->logits(s, fixed_gates));
        }
        std::vector<std::size_t> classes;
        if (config_.lwf_seen_classes_only) {
            classes.assign(seen_classes_.begin(), seen_classes_.end());
        }
        loss = lwf_loss(tape, task_loss, logits, old_logits, config_.lwf_temperature, config_.lwf_alpha, classes);
    }
    result.task_loss = task_loss.item();
    result.loss = loss.item();

    tape.backward(loss);
    if (hat_) {
        hat_scale_gradients(model_, hat_->cumulative_masks());
    }
    optimizer_->step(params);

    if (strategies_.mir) {
        for (const Sample& s : batch) {
            buffer_.add(s, task_);
        }
    }
    return result;
}

void Learner::end_task() {
    if (task_ == 0) {
        throw StateError("end_task called before any task began");
    }
    if (strategies_.lwf) {
        teacher_ = std::make_unique<TeacherSnapshot>(model_, task_);
    }
    if (hat_) {
        hat_->cumulate(task_);
    }
    seen_classes_.insert(seen_classes_.end(), task_labels_.begin(), task_labels_.end());
    std::sort(seen_classes_.begin(), seen_classes_.end());
    seen_classes_.erase(std::unique(seen_classes_.begin(), seen_classes_.end()), seen_classes_.end());
}

std::optional<models::Gates> Learner::eval_gates(std::size_t task) const {
    if (!hat_) {
        return std::nullopt;
    }
    return hat_->gate_values(task);
}

double Learner::evaluation_loss(std::span<const Sample> samples) const {
    if (samples.empty()) {
        throw DataError("cannot compute the loss of an empty split");
    }
    std::optional<models::Gates> gates;
    if (hat_ && task_ != 0) {
        gates = hat_->gate_values(task_);
    }
    double total = 0.0;
    for (const Sample& s : samples) {
        total += example_loss(model_, s, gates ? &*gates : nullptr);
    }
    return total / static_cast<double>(samples.size());
}

void Learner::restore_teacher(const models::NamedTensors& params, std::size_t snapshot_task) {
    auto copy = model_.clone();
    models::load_parameters(*copy, params);
    teacher_ = std::make_unique<TeacherSnapshot>(*copy, snapshot_task);
}

}  // namespace forgetbench::strategies
