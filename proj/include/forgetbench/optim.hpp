#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "forgetbench/tensor.hpp"

namespace forgetbench {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

// Parameter update from the gradients currently stored on the tensors. The
// optimizer is bound to a fixed ordered parameter list; state (Adam moments)
// is indexed by position in that list.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(std::span<Tensor> params) = 0;
};

class Sgd final : public Optimizer {
public:
    explicit Sgd(double learning_rate);
    void step(std::span<Tensor> params) override;

private:
    double learning_rate_;
};

class Adam final : public Optimizer {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(std::span<Tensor> params) override;

private:
    double learning_rate_;
    double beta1_;
    double beta2_;
    double eps_;
    long steps_ = 0;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate);

}  // namespace forgetbench
