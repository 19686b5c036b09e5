#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetbench/models.hpp"
#include "forgetbench/optim.hpp"
#include "forgetbench/rng.hpp"
#include "forgetbench/tensor.hpp"

namespace forgetbench::strategies {

// One labelled example, viewed in place.
struct Sample {
    std::span<const int> token_ids;
    std::span<const int> attention_mask;
    int label = 0;
};

// Mean softmax cross-entropy of the batch. Per-example logits are appended to
// `logits` when it is non-null.
Tensor batch_loss(Tape& tape, const models::Model& model, std::span<const Sample> batch,
                  const models::ForwardOptions& options, std::vector<Tensor>* logits = nullptr);

// Cross-entropy of one example without recording gradients or dropout.
double example_loss(const models::Model& model, const Sample& sample, const models::Gates* gates);

// ------------------------------------------------------------------ replay

struct ReplayItem {
    std::vector<int> token_ids;
    std::vector<int> attention_mask;
    int label = 0;
    std::size_t task_index = 0;
    // Position in the stream of examples offered to the buffer; orders ties.
    std::uint64_t sequence = 0;

    Sample sample() const { return Sample{token_ids, attention_mask, label}; }
};

// Global reservoir over every training example offered to it. Once full, the
// n-th offered example replaces a uniformly chosen slot with probability
// capacity / n.
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, std::uint64_t seed);

    void add(const Sample& sample, std::size_t task_index);

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    std::uint64_t seen_count() const { return seen_; }
    const std::vector<ReplayItem>& items() const { return items_; }

    // Restarts the slot-choice stream; called at task boundaries so a run that
    // resumes from a task checkpoint draws the same slots.
    void reseed(std::uint64_t seed) { rng_ = Rng(seed); }
    // Restores checkpointed contents.
    void restore(std::vector<ReplayItem> items, std::uint64_t seen_count);

private:
    std::size_t capacity_;
    std::uint64_t seen_ = 0;
    std::vector<ReplayItem> items_;
    Rng rng_;
};

struct MirConfig {
    double eta_virtual = 1e-3;
    // Items replayed per step; 0 selects nothing.
    std::size_t k = 32;
    // Buffer items scored per step; 0 scores every eligible item.
    std::size_t n_candidates = 0;
};

struct MirCandidate {
    std::size_t index = 0;  // into ReplayBuffer::items()
    double score = 0.0;     // L(theta') - L(theta)
};

// Maximally interfered retrieval. Takes the gradient of the mean task loss on
// `batch` at the current parameters, evaluates every candidate's loss before
// and after the virtual step theta' = theta - eta_virtual * grad, and returns
// the k candidates whose loss rises most (ties: lower insertion sequence
// first), highest first. Candidates are the buffer items from tasks before
// `current_task`, subsampled uniformly to n_candidates when that is smaller.
// Parameters and gradients are left exactly as they were. No dropout is applied.
std::vector<MirCandidate> mir_select(models::Model& model, std::span<const Sample> batch, const ReplayBuffer& buffer,
                                     std::size_t current_task, const MirConfig& config, const models::Gates* gates,
                                     Rng& rng);

// ------------------------------------------------------------------ LwF

// Frozen copy of the model taken at a task boundary.
class TeacherSnapshot {
public:
    TeacherSnapshot(const models::Model& model, std::size_t snapshot_task);

    std::size_t snapshot_task() const { return snapshot_task_; }
    const models::Model& model() const { return *model_; }
    // Logits without dropout, recorded nowhere.
    Tensor logits(const Sample& sample, const models::Gates* gates) const;

private:
    std::unique_ptr<models::Model> model_;
    std::size_t snapshot_task_;
};

// task_loss + alpha * mean_b(T^2 * KL(softmax(old_b / T) || softmax(new_b / T))).
// Gradients reach only the new logits. With `classes` non-empty both logit
// vectors are restricted to those positions first. Throws ConfigError for
// T <= 0 or alpha < 0, ShapeError when the logit lists differ in length.
Tensor lwf_loss(Tape& tape, const Tensor& task_loss, std::span<const Tensor> logits_new,
                std::span<const Tensor> logits_old, double temperature, double alpha,
                std::span<const std::size_t> classes = {});

// ------------------------------------------------------------------ HAT

// sigmoid(s * e), elementwise.
std::vector<double> hat_gates(std::span<const double> embedding, double scale);

// Per-task gate embeddings and the running maximum of past gates, one vector
// per maskable layer of the model.
class HatState {
public:
    HatState(std::vector<models::MaskableLayer> layers, double scale, std::uint64_t seed);

    double scale() const { return scale_; }
    std::size_t num_layers() const { return layers_.size(); }
    const std::vector<models::MaskableLayer>& layers() const { return layers_; }

    bool has_task(std::size_t task) const;
    // Embeddings of `task`, drawn from U(-1, 1) on first use with a stream
    // derived from the seed and the task index. The tensors require gradients.
    std::vector<Tensor>& embeddings(std::size_t task);
    const std::vector<Tensor>& embeddings(std::size_t task) const;

    // Gates of `task` recorded on the tape, so the loss reaches the embeddings.
    models::Gates gates(Tape& tape, std::size_t task);
    // Constant gates of `task`.
    models::Gates gate_values(std::size_t task) const;

    // m = max(m, sigmoid(s * e_task)) for every layer. Masks start at 0.
    void cumulate(std::size_t task);
    const std::vector<std::vector<double>>& cumulative_masks() const { return masks_; }

    // Checkpoint access.
    std::vector<std::size_t> tasks() const;
    void set_embeddings(std::size_t task, std::vector<std::vector<double>> values);
    void set_cumulative_masks(std::vector<std::vector<double>> masks);

private:
    std::vector<models::MaskableLayer> layers_;
    double scale_;
    std::uint64_t seed_;
    std::vector<std::pair<std::size_t, std::vector<Tensor>>> embeddings_;
    std::vector<std::vector<double>> masks_;
};

// Attenuates stored gradients according to each parameter's GradientScaleRule:
// row i of a parameter tied to layer l is multiplied by 1 - m_l[i mod width];
// for a matrix whose columns are tied to layer l', element (i, j) by
// 1 - min(m_l[i mod width], m_l'[j]). Parameters without a rule are untouched.
void hat_scale_gradients(models::Model& model, const std::vector<std::vector<double>>& masks);

// ------------------------------------------------------------------ composition

struct StrategySet {
    bool mir = false;
    bool lwf = false;
    bool hat = false;

    bool empty() const { return !mir && !lwf && !hat; }
    // "naive" for the empty set, otherwise e.g. "mir+lwf+hat" in that order.
    std::string name() const;
    bool operator==(const StrategySet&) const = default;

    // Names are case-insensitive; "naive" alone means the empty set. Throws
    // ConfigError listing the valid names on anything else.
    static StrategySet parse(std::span<const std::string> names);
    static StrategySet parse(const std::string& joined);  // "mir+hat", "naive"
    // The eight subsets in a fixed order, naive first.
    static std::vector<StrategySet> all();
};

struct StrategyConfig {
    std::size_t buffer_capacity = 500;
    MirConfig mir;
    double lwf_temperature = 2.0;
    double lwf_alpha = 1.0;
    bool lwf_seen_classes_only = false;
    double hat_scale = 50.0;

    void validate() const;
};

struct StepResult {
    double loss = 0.0;
    double task_loss = 0.0;
    std::size_t replayed = 0;
};

// Owns the strategy state of one run and performs training steps in the order
// MIR retrieval, forward and task loss, distillation, gating, backward,
// gradient attenuation, optimizer update, buffer update.
class Learner {
public:
    Learner(models::Model& model, StrategySet strategies, StrategyConfig config, OptimizerKind optimizer,
            double learning_rate, std::uint64_t seed);

    const StrategySet& strategies() const { return strategies_; }
    const StrategyConfig& config() const { return config_; }
    models::Model& model() { return model_; }
    std::size_t current_task() const { return task_; }

    // Starts task `task` (1-based) with the given label set: fresh optimizer
    // state, gate embeddings for the task, buffer stream reseeded.
    void begin_task(std::size_t task, std::vector<int> label_set);
    // One update on the batch. `dropout_rng` drives dropout, `mir_rng` the
    // candidate subsample.
    StepResult step(std::span<const Sample> batch, Rng& dropout_rng, Rng& mir_rng);
    // Task boundary: refresh the teacher, accumulate gates, record the task's
    // labels as seen.
    void end_task();

    // Parameters the optimizer updates in the current task: the model's, then
    // the current gate embeddings.
    std::vector<Tensor> trainable() const;
    // Gates used to evaluate task `task`, or nothing when HAT is off.
    std::optional<models::Gates> eval_gates(std::size_t task) const;
    // Mean task loss without dropout under the current task's gates.
    double evaluation_loss(std::span<const Sample> samples) const;

    const ReplayBuffer& buffer() const { return buffer_; }
    ReplayBuffer& buffer() { return buffer_; }
    const TeacherSnapshot* teacher() const { return teacher_.get(); }
    const HatState* hat() const { return hat_ ? &*hat_ : nullptr; }
    HatState* hat() { return hat_ ? &*hat_ : nullptr; }
    const std::vector<int>& seen_classes() const { return seen_classes_; }

    // Checkpoint support: reinstall a teacher and the classes seen so far.
    void restore_teacher(const models::NamedTensors& params, std::size_t snapshot_task);
    void restore_seen_classes(std::vector<int> classes) { seen_classes_ = std::move(classes); }

private:
    models::Model& model_;
    StrategySet strategies_;
    StrategyConfig config_;
    OptimizerKind optimizer_kind_;
    double learning_rate_;
    std::uint64_t seed_;
    std::size_t task_ = 0;
    std::vector<int> task_labels_;
    // Labels of finished tasks, ascending.
    std::vector<int> seen_classes_;
    std::unique_ptr<Optimizer> optimizer_;
    ReplayBuffer buffer_;
    std::unique_ptr<TeacherSnapshot> teacher_;
    std::optional<HatState> hat_;
};

}  // namespace forgetbench::strategies
