#include "forgetbench/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "forgetbench/error.hpp"

namespace forgetbench {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            out << 'x';
        }
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one dimension");
    }
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
        }
    }
}

std::atomic<std::uint64_t> next_tape_id{1};

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    std::vector<double> values(shape_numel(shape), value);
    return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    Shape shape{values.size()};
    return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

detail::TensorNode& Tensor::node() const {
    if (!node_) {
        throw StateError("use of an undefined tensor");
    }
    return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return node().value.size(); }

std::span<const double> Tensor::data() const { return node().value; }

std::span<double> Tensor::mutable_data() { return node().value; }

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape()));
    }
    return node().value[0];
}

double Tensor::at(std::size_t i) const { return node().value.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) {
        throw ShapeError("at(row, col) needs a matrix, got " + shape_string(shape()));
    }
    return node().value.at(row * dim(1) + col);
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) {
        throw StateError("requires_grad can only be changed on leaf tensors");
    }
    node().requires_grad = on;
}

bool Tensor::is_leaf() const { return node().leaf; }

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const { return node().grad; }

std::span<double> Tensor::mutable_grad() {
    auto& n = node();
    if (n.grad.empty()) {
        n.grad.assign(n.value.size(), 0.0);
    }
    return n.grad;
}

void Tensor::zero_grad() {
    auto& n = node();
    if (!n.grad.empty()) {
        std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
    n.grad_populated = false;
}

Tensor Tensor::clone() const { return from(shape(), node().value, requires_grad()); }

Tensor Tensor::detach() const { return from(shape(), node().value, false); }

void zero_grads(std::span<Tensor> tensors) {
    for (Tensor& t : tensors) {
        t.zero_grad();
    }
}

double* grad_sink(const Tensor& t) {
    auto& n = t.node();
    if (!n.requires_grad) {
        return nullptr;
    }
    if (n.grad.empty()) {
        n.grad.assign(n.value.size(), 0.0);
    }
    return n.grad.data();
}

Tape::Tape(Mode mode) : mode_(mode), id_(next_tape_id.fetch_add(1)) {}

bool Tape::track_input(const Tensor& in) {
    if (!in.defined() || !in.requires_grad()) {
        return false;
    }
    if (in.is_leaf() && std::find(leaves_.begin(), leaves_.end(), in.shared_node()) == leaves_.end()) {
        leaves_.push_back(in.shared_node());
    }
    return true;
}

Tensor Tape::record(const char* op_name, Shape shape, std::vector<double> values,
                    std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    bool needs_grad = false;
    if (mode_ == Mode::record && !consumed_) {
        for (const Tensor* in : inputs) {
            if (in != nullptr && track_input(*in)) {
                needs_grad = true;
            }
        }
    }
    return finish(op_name, std::move(shape), std::move(values), needs_grad, std::move(backward));
}

Tensor Tape::record(const char* op_name, Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                    BackwardFn backward) {
    bool needs_grad = false;
    if (mode_ == Mode::record && !consumed_) {
        for (const Tensor& in : inputs) {
            if (track_input(in)) {
                needs_grad = true;
            }
        }
    }
    return finish(op_name, std::move(shape), std::move(values), needs_grad, std::move(backward));
}

Tensor Tape::finish(const char* op_name, Shape shape, std::vector<double> values, bool needs_grad,
                    BackwardFn backward) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op_name) + " produced a non-finite value");
        }
    }
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    if (!needs_grad) {
        return out;
    }
    auto& n = out.node();
    n.requires_grad = true;
    n.leaf = false;
    n.tape_id = id_;
    entries_.push_back(Entry{out.shared_node(), std::move(backward)});
    return out;
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) {
        throw StateError("backward was already run on this tape");
    }
    if (loss.numel() != 1) {
        throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.shape()));
    }
    const auto& root = loss.node();
    if (!root.requires_grad || root.leaf || root.tape_id != id_) {
        throw StateError("loss is detached from this tape");
    }
    for (const auto& leaf : leaves_) {
        if (leaf->grad_populated) {
            throw StateError("gradient already populated; zero gradients before another backward");
        }
    }
    consumed_ = true;
    loss.shared_node()->grad.assign(1, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->grad.empty()) {
            continue;  // no gradient flows through this op
        }
        it->backward(*it->output);
    }
    for (const auto& leaf : leaves_) {
        if (leaf->grad.empty()) {
            leaf->grad.assign(leaf->value.size(), 0.0);
        }
        leaf->grad_populated = true;
    }
    entries_.clear();
    leaves_.clear();
}

}  // namespace forgetbench
