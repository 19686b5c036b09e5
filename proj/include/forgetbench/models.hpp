#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "forgetbench/rng.hpp"
#include "forgetbench/tensor.hpp"

namespace forgetbench::models {

enum class Architecture { ann, gru, transformer };

std::string to_string(Architecture arch);
// Accepts "ann", "gru", "transformer" in any letter case.
Architecture parse_architecture(const std::string& name);

struct ModelConfig {
    Architecture architecture = Architecture::ann;
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 128;
    std::size_t hidden_dim = 256;
    std::size_t num_classes = 150;
    std::size_t num_layers = 2;  // Transformer blocks
    std::size_t num_heads = 4;   // Transformer heads
    double dropout_p = 0.1;

    // Throws ConfigError.
    void validate() const;
};

// A hidden activation vector that HAT may gate. The set is fixed when the
// model is built and never changes across tasks.
struct MaskableLayer {
    std::string id;
    std::size_t width = 0;
};

// How HAT attenuates the gradient of a parameter. A parameter whose first axis
// indexes the units of maskable layer `out_layer` gets row i scaled by
// 1 - m_out[i]; if `in_layer` is also set, element (i, j) of a matrix is scaled
// by 1 - min(m_out[i], m_in[j]). out_layer < 0 means never scaled.
struct GradientScaleRule {
    int out_layer = -1;
    int in_layer = -1;
};

struct Parameter {
    std::string name;
    Tensor value;
    GradientScaleRule rule;
};

// One gate vector per maskable layer, in maskable_layers() order.
using Gates = std::vector<Tensor>;

struct ForwardOptions {
    bool training = false;
    Rng* dropout_rng = nullptr;
    const Gates* gates = nullptr;
};

// A text classifier: token ids plus attention mask in, one logit per class out.
class Model {
public:
    virtual ~Model() = default;

    virtual Tensor forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                           const ForwardOptions& options) const = 0;

    // Deep copy; the clone shares no parameter storage with this model.
    virtual std::unique_ptr<Model> clone() const = 0;

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    // Handles aliasing the parameter storage, in parameters() order.
    std::vector<Tensor> parameter_tensors() const;
    std::size_t parameter_count() const;

    const std::vector<MaskableLayer>& maskable_layers() const { return maskable_; }
    std::size_t num_classes() const { return num_classes_; }

    // Copies values (not handles) from another model of identical layout.
    void copy_values_from(const Model& other);

protected:
    Tensor add_parameter(std::string name, Shape shape, double bound, Rng& rng, GradientScaleRule rule = {});
    Tensor add_constant_parameter(std::string name, Shape shape, double value, GradientScaleRule rule = {});
    void add_maskable(std::string id, std::size_t width);
    void deep_copy_parameters();
    const Tensor& param(std::size_t index) const { return params_[index].value; }
    void check_gates(const ForwardOptions& options) const;
    const Tensor* gate(const ForwardOptions& options, std::size_t layer) const;

    std::vector<Parameter> params_;
    std::vector<MaskableLayer> maskable_;
    std::size_t num_classes_ = 0;
};

// Embedding -> masked mean pool -> hidden linear -> ReLU -> dropout -> gate ->
// output linear. One maskable layer: the hidden activation.
class AnnModel final : public Model {
public:
    AnnModel(const ModelConfig& config, std::uint64_t seed);
    Tensor forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                   const ForwardOptions& options) const override;
    std::unique_ptr<Model> clone() const override;

private:
    ModelConfig config_;
};

// Embedding -> GRU over the unmasked positions -> gate on the last hidden
// state -> output linear. No dropout.
class GruModel final : public Model {
public:
    GruModel(const ModelConfig& config, std::uint64_t seed);
    Tensor forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                   const ForwardOptions& options) const override;
    std::unique_ptr<Model> clone() const override;

private:
    ModelConfig config_;
};

// Embedding + sinusoidal positions -> pre-norm encoder blocks (attention, then
// a x4 ReLU feed-forward whose hidden activation is gated) -> final layer norm
// -> masked mean pool -> gate -> output linear. Maskable layers: one per block
// feed-forward, then the pooled feature.
class TransformerModel final : public Model {
public:
    TransformerModel(const ModelConfig& config, std::uint64_t seed);
    Tensor forward(Tape& tape, std::span<const int> token_ids, std::span<const int> attention_mask,
                   const ForwardOptions& options) const override;
    std::unique_ptr<Model> clone() const override;

    static constexpr std::size_t kParamsPerBlock = 16;

private:
    ModelConfig config_;
};

// Parameters initialised uniformly in +-1/sqrt(fan_in) from `seed`; layer-norm
// gains start at 1 and offsets at 0.
std::unique_ptr<Model> build_model(const ModelConfig& config, std::uint64_t seed);

// Closed-form parameter count per architecture, independent of build_model:
//   ANN:         V*e + (h*e + h) + (C*h + C)
//   GRU:         V*e + 3h*(e + h + 1) + (C*h + C)
//   Transformer: V*e + layers*(4*(e*e + e) + 4e + (4e*e + 4e) + (e*4e + e)) + 2e + (C*e + C)
std::size_t expected_parameter_count(const ModelConfig& config);

// Sinusoidal encoding of one position, width d.
std::vector<double> positional_encoding(std::size_t position, std::size_t width);

// Binary tensor map, little-endian:
//   magic "FBTM", u32 version (1), u64 entry count, then per entry
//   u64 name length, name bytes, u64 rank, rank x u64 dims, numel x f64.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

NamedTensors named_parameters(const Model& model);
// Loads values by name; every model parameter must be present with its shape.
void load_parameters(Model& model, const NamedTensors& tensors);

}  // namespace forgetbench::models
