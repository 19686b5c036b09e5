#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

#include "forgetbench/error.hpp"
#include "forgetbench/models.hpp"

namespace forgetbench::models {

std::string to_string(Architecture arch) {
    switch (arch) {
    case Architecture::ann:
        return "ann";
    case Architecture::gru:
        return "gru";
    case Architecture::transformer:
        return "transformer";
    }
    return "unknown";
}

Architecture parse_architecture(const std::string& name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "ann") {
        return Architecture::ann;
    }
    if (lower == "gru") {
        return Architecture::gru;
    }
    if (lower == "transformer") {
        return Architecture::transformer;
    }
    throw ConfigError("unknown architecture '" + name + "' (valid: ann, gru, transformer)");
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* what) {
        if (v == 0) {
            throw ConfigError(std::string(what) + " must be at least 1");
        }
    };
    positive(vocab_size, "vocab_size");
    positive(embed_dim, "embed_dim");
    positive(hidden_dim, "hidden_dim");
    positive(num_classes, "num_classes");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw ConfigError("dropout_p must be in [0, 1)");
    }
    if (architecture == Architecture::transformer && embed_dim % num_heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
    }
}

std::vector<Tensor> Model::parameter_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
        out.push_back(p.value);
    }
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += p.value.numel();
    }
    return n;
}

void Model::copy_values_from(const Model& other) {
    if (other.params_.size() != params_.size()) {
        throw ShapeError("copy_values_from: parameter lists differ");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto src = other.params_[i].value.data();
        auto dst = params_[i].value.mutable_data();
        if (src.size() != dst.size()) {
            throw ShapeError("copy_values_from: parameter " + params_[i].name + " differs in size");
        }
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

Tensor Model::add_parameter(std::string name, Shape shape, double bound, Rng& rng, GradientScaleRule rule) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
        v = rng.uniform(-bound, bound);
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    params_.push_back(Parameter{std::move(name), t, rule});
    return t;
}

Tensor Model::add_constant_parameter(std::string name, Shape shape, double value, GradientScaleRule rule) {
    Tensor t = Tensor::full(std::move(shape), value, true);
    params_.push_back(Parameter{std::move(name), t, rule});
    return t;
}

void Model::add_maskable(std::string id, std::size_t width) { maskable_.push_back(MaskableLayer{std::move(id), width}); }

void Model::deep_copy_parameters() {
    for (auto& p : params_) {
        p.value = p.value.clone();
    }
}

void Model::check_gates(const ForwardOptions& options) const {
    if (options.gates == nullptr) {
        return;
    }
    const Gates& gates = *options.gates;
    if (gates.size() != maskable_.size()) {
        throw ShapeError("expected " + std::to_string(maskable_.size()) + " gate vectors, got " +
                         std::to_string(gates.size()));
    }
    for (std::size_t i = 0; i < gates.size(); ++i) {
        if (gates[i].rank() != 1 || gates[i].dim(0) != maskable_[i].width) {
            throw ShapeError("gate for " + maskable_[i].id + " must be [" + std::to_string(maskable_[i].width) +
                             "], got " + shape_string(gates[i].shape()));
        }
    }
}

const Tensor* Model::gate(const ForwardOptions& options, std::size_t layer) const {
    return options.gates == nullptr ? nullptr : &(*options.gates)[layer];
}

std::unique_ptr<Model> build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    switch (config.architecture) {
    case Architecture::ann:
        return std::make_unique<AnnModel>(config, seed);
    case Architecture::gru:
        return std::make_unique<GruModel>(config, seed);
    case Architecture::transformer:
        return std::make_unique<TransformerModel>(config, seed);
    }
    throw ConfigError("unsupported architecture");
}

std::size_t expected_parameter_count(const ModelConfig& config) {
    const std::size_t v = config.vocab_size, e = config.embed_dim, h = config.hidden_dim, c = config.num_classes;
    switch (config.architecture) {
    case Architecture::ann:
        return v * e + (h * e + h) + (c * h + c);
    case Architecture::gru:
        return v * e + 3 * h * (e + h + 1) + (c * h + c);
    case Architecture::transformer: {
        const std::size_t block = 4 * (e * e + e) + 4 * e + (4 * e * e + 4 * e) + (e * 4 * e + e);
        return v * e + config.num_layers * block + 2 * e + (c * e + c);
    }
    }
    return 0;
}

std::vector<double> positional_encoding(std::size_t position, std::size_t width) {
    std::vector<double> out(width);
    for (std::size_t i = 0; i < width; ++i) {
        const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(width);
        const double angle = static_cast<double>(position) / std::pow(10000.0, exponent);
        out[i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'F', 'B', 'T', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in) {
        throw DataError("tensor file truncated");
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(bytes, bytes + sizeof(T));
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kVersion);
    write_le<std::uint64_t>(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_le<std::uint64_t>(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_le<std::uint64_t>(out, t.rank());
        for (std::size_t d : t.shape()) {
            write_le<std::uint64_t>(out, d);
        }
        for (double v : t.data()) {
            write_le<double>(out, v);
        }
    }
    if (!out) {
        throw DataError("failed writing " + path.string());
    }
}

NamedTensors load_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    char magic[4];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError(path.string() + " is not a tensor file");
    }
    if (read_le<std::uint32_t>(in) != kVersion) {
        throw DataError(path.string() + ": unsupported tensor file version");
    }
    const auto count = read_le<std::uint64_t>(in);
    NamedTensors out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_le<std::uint64_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto rank = read_le<std::uint64_t>(in);
        Shape shape(rank);
        for (auto& d : shape) {
            d = read_le<std::uint64_t>(in);
        }
        std::vector<double> values(shape_numel(shape));
        for (double& v : values) {
            v = read_le<double>(in);
        }
        out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
    }
    return out;
}

NamedTensors named_parameters(const Model& model) {
    NamedTensors out;
    for (const auto& p : model.parameters()) {
        out.emplace_back(p.name, p.value);
    }
    return out;
}

void load_parameters(Model& model, const NamedTensors& tensors) {
    for (auto& p : model.parameters()) {
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& nt) { return nt.first == p.name; });
        if (it == tensors.end()) {
            throw DataError("checkpoint lacks parameter " + p.name);
        }
        if (it->second.shape() != p.value.shape()) {
            throw DataError("checkpoint parameter " + p.name + " has shape " + shape_string(it->second.shape()) +
                            ", model expects " + shape_string(p.value.shape()));
        }
        auto src = it->second.data();
        std::copy(src.begin(), src.end(), p.value.mutable_data().begin());
    }
}

}  // namespace forgetbench::models
