#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfm/types.hpp"

namespace mfm::nn {

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0; // AdamW only

    static OptimizerConfig adam(double lr) { return {OptimizerKind::Adam, lr, 0.9, 0.999, 1e-8, 0.0}; }
    static OptimizerConfig adamw(double lr, double wd) { return {OptimizerKind::AdamW, lr, 0.9, 0.999, 1e-8, wd}; }
};

/// Adam / AdamW with bias correction. AdamW decays weights before the moment update.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config) : config_(config) {
        if (!(config_.learning_rate > 0.0) || config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 ||
            config_.beta2 >= 1.0 || !(config_.epsilon > 0.0) || config_.weight_decay < 0.0) {
            throw ValidationError("optimizer: invalid hyperparameters");
        }
    }

    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads) {
        if (params.size() != grads.size()) {
            throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameter tensors but " +
                             std::to_string(grads.size()) + " gradients");
        }
        if (first_.empty()) {
            for (const Matrix* p : params) {
                first_.push_back(Matrix::Zero(p->rows(), p->cols()));
                second_.push_back(Matrix::Zero(p->rows(), p->cols()));
            }
        }
        if (first_.size() != params.size()) {
            throw ShapeError("optimizer: parameter set changed between steps");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols() ||
                params[i]->rows() != first_[i].rows() || params[i]->cols() != first_[i].cols()) {
                throw ShapeError("optimizer: shape mismatch at tensor " + std::to_string(i));
            }
        }
        ++steps_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
        const double step_size = config_.learning_rate / bc1;
        const double sqrt_bc2 = std::sqrt(bc2);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Matrix& p = *params[i];
            const Matrix& g = *grads[i];
            if (config_.kind == OptimizerKind::AdamW && config_.weight_decay != 0.0) {
                p *= 1.0 - config_.learning_rate * config_.weight_decay;
            }
            first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
            second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
            const Matrix denom = (second_[i].cwiseSqrt() / sqrt_bc2).array() + config_.epsilon;
            p -= step_size * first_[i].cwiseQuotient(denom);
        }
    }

    template <class Params>
    void step(Params& params, const Params& grads) {
        std::vector<Matrix*> p = params.tensors();
        std::vector<const Matrix*> g = grads.tensors();
        step(p, g);
    }

    void set_learning_rate(double lr) {
        if (!(lr > 0.0)) {
            throw ValidationError("optimizer: learning rate must be > 0");
        }
        config_.learning_rate = lr;
    }

    [[nodiscard]] std::uint64_t step_count() const { return steps_; }
    [[nodiscard]] const OptimizerConfig& config() const { return config_; }
    [[nodiscard]] const std::vector<Matrix>& first_moments() const { return first_; }
    [[nodiscard]] const std::vector<Matrix>& second_moments() const { return second_; }

private:
    OptimizerConfig config_;
    std::vector<Matrix> first_;
    std::vector<Matrix> second_;
    std::uint64_t steps_ = 0;
};

} // namespace mfm::nn
