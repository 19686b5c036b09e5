#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace forgetbench {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    // Empty until a gradient first reaches this node.
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    // Set on leaves once a backward pass has written their gradient; cleared by
    // zero_grad(). A second backward into a populated leaf is rejected.
    bool grad_populated = false;
    std::uint64_t tape_id = 0;
};

}  // namespace detail

// Dense row-major array of doubles with an optional gradient slot.
//
// Tensor is a shared handle: copies alias the same storage. Use clone() for an
// independent copy of the values. Parameters are leaf tensors created with
// requires_grad = true; every op output recorded on a Tape is a non-leaf.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Writable view for parameter updates between steps. Never call on a tensor
    // that is still referenced by an unconsumed tape.
    std::span<double> mutable_data();

    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Independent leaf copy of the values (no gradient, requires_grad copied).
    Tensor clone() const;
    // Independent copy of the values that never requires a gradient.
    Tensor detach() const;

    detail::TensorNode& node() const;
    const std::shared_ptr<detail::TensorNode>& shared_node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::TensorNode> node_;
};

void zero_grads(std::span<Tensor> tensors);

// Ordered record of executed primitive ops. A tape in record mode stores one
// backward closure per op whose output requires a gradient; in inference mode
// nothing is stored and outputs never require gradients.
class Tape {
public:
    enum class Mode { record, inference };

    // Called with the output node (value and accumulated grad) of the op.
    using BackwardFn = std::function<void(const detail::TensorNode& out)>;

    explicit Tape(Mode mode = Mode::record);
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    static Tape inference() { return Tape(Mode::inference); }

    bool recording() const { return mode_ == Mode::record; }
    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    // Creates the op output and, when any input requires a gradient, records
    // backward. Throws NumericError if the values contain NaN or Inf.
    Tensor record(const char* op_name, Shape shape, std::vector<double> values,
                  std::initializer_list<const Tensor*> inputs, BackwardFn backward);
    Tensor record(const char* op_name, Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                  BackwardFn backward);

    // Reverse-mode sweep from a scalar loss produced on this tape. Each tape
    // supports exactly one backward; leaves must have been zeroed since the last
    // backward that reached them.
    void backward(const Tensor& loss);

private:
    Tensor finish(const char* op_name, Shape shape, std::vector<double> values, bool needs_grad,
                  BackwardFn backward);
    bool track_input(const Tensor& in);

    struct Entry {
        std::shared_ptr<detail::TensorNode> output;
        BackwardFn backward;
    };

    Mode mode_;
    std::uint64_t id_;
    bool consumed_ = false;
    std::vector<Entry> entries_;
    std::vector<std::shared_ptr<detail::TensorNode>> leaves_;
};

// Gradient buffer of an input inside a backward closure, allocated (zeroed) on
// first use. Returns nullptr when the tensor does not require a gradient.
double* grad_sink(const Tensor& t);

}  // namespace forgetbench
