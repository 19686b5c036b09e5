#include "forgetbench/optim.hpp"

#include <cmath>

#include "forgetbench/error.hpp"

namespace forgetbench {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") {
        return OptimizerKind::sgd;
    }
    if (name == "adam") {
        return OptimizerKind::adam;
    }
    throw ConfigError("unknown optimizer '" + name + "' (valid: sgd, adam)");
}

Sgd::Sgd(double learning_rate) : learning_rate_(learning_rate) {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
}

void Sgd::step(std::span<Tensor> params) {
    for (Tensor& p : params) {
        if (!p.has_grad()) {
            continue;
        }
        auto values = p.mutable_data();
        const auto grad = p.grad();
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] -= learning_rate_ * grad[i];
        }
    }
}

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : learning_rate_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
}

void Adam::step(std::span<Tensor> params) {
    if (first_moment_.empty()) {
        first_moment_.resize(params.size());
        second_moment_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            first_moment_[i].assign(params[i].numel(), 0.0);
            second_moment_[i].assign(params[i].numel(), 0.0);
        }
    }
    if (first_moment_.size() != params.size()) {
        throw StateError("Adam: parameter list changed between steps");
    }
    ++steps_;
    const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (!p.has_grad()) {
            continue;
        }
        auto values = p.mutable_data();
        const auto grad = p.grad();
        auto& m = first_moment_[k];
        auto& v = second_moment_[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            values[i] -= learning_rate_ * m_hat / (std::sqrt(v_hat) + eps_);
        }
    }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate) {
    if (kind == OptimizerKind::sgd) {
        return std::make_unique<Sgd>(learning_rate);
    }
    return std::make_unique<Adam>(learning_rate);
}

}  // namespace forgetbench
