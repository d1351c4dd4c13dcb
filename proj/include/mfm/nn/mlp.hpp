#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mfm/nn/tape.hpp"
#include "mfm/rng.hpp"
#include "mfm/types.hpp"

namespace mfm::nn {

enum class Activation { Selu, Identity };

inline std::string to_string(Activation a) {
    return a == Activation::Selu ? "selu" : "identity";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "selu") {
        return Activation::Selu;
    }
    if (s == "identity") {
        return Activation::Identity;
    }
    throw ValidationError("unknown activation '" + s + "'");
}

/**
 * Parameters of a fully connected network.
 *
 * Layer l maps width(l) -> width(l+1) as y = x W_l^T + b_l. The hidden
 * activation is applied after every layer except the last.
 */
struct MlpParams {
    std::vector<Matrix> weights; // out x in
    std::vector<Matrix> biases;  // 1 x out
    Activation hidden_activation = Activation::Selu;

    [[nodiscard]] std::size_t num_layers() const { return weights.size(); }
    [[nodiscard]] std::size_t input_width() const { return weights.empty() ? 0 : to_size(weights.front().cols()); }
    [[nodiscard]] std::size_t output_width() const { return weights.empty() ? 0 : to_size(weights.back().rows()); }
    /// Number of hidden layers.
    [[nodiscard]] std::size_t depth() const { return weights.empty() ? 0 : weights.size() - 1; }
    [[nodiscard]] std::size_t hidden_width() const {
        return weights.size() < 2 ? 0 : to_size(weights.front().rows());
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            n += to_size(weights[l].size() + biases[l].size());
        }
        return n;
    }

    std::vector<Matrix*> tensors() {
        std::vector<Matrix*> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(&weights[l]);
            out.push_back(&biases[l]);
        }
        return out;
    }

    [[nodiscard]] std::vector<const Matrix*> tensors() const {
        std::vector<const Matrix*> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(&weights[l]);
            out.push_back(&biases[l]);
        }
        return out;
    }

    /// Throws if the shape chain is broken or any entry is non-finite.
    void validate() const {
        if (weights.empty() || weights.size() != biases.size()) {
            throw ShapeError("mlp: need at least one layer and one bias per layer");
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (biases[l].rows() != 1 || biases[l].cols() != weights[l].rows()) {
                throw ShapeError("mlp: bias " + std::to_string(l) + " has shape " +
                                 shape_str(biases[l].rows(), biases[l].cols()));
            }
            if (l > 0 && weights[l].cols() != weights[l - 1].rows()) {
                throw ShapeError("mlp: layer " + std::to_string(l) + " input width " +
                                 std::to_string(weights[l].cols()) + " != previous output width " +
                                 std::to_string(weights[l - 1].rows()));
            }
            require_finite(weights[l], "mlp weight " + std::to_string(l));
            require_finite(biases[l], "mlp bias " + std::to_string(l));
        }
    }

    /// Layer widths input -> hidden x depth -> output, uniform(+-1/sqrt(fan_in)) init.
    static MlpParams init(std::size_t input, std::size_t hidden, std::size_t depth, std::size_t output, Rng& rng) {
        MlpParams p;
        std::vector<std::size_t> widths{input};
        for (std::size_t i = 0; i < depth; ++i) {
            widths.push_back(hidden);
        }
        widths.push_back(output);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
            Matrix w(to_index(widths[l + 1]), to_index(widths[l]));
            for (Eigen::Index i = 0; i < w.size(); ++i) {
                w.data()[i] = rng.uniform(-bound, bound);
            }
            Matrix b(1, to_index(widths[l + 1]));
            for (Eigen::Index i = 0; i < b.size(); ++i) {
                b.data()[i] = rng.uniform(-bound, bound);
            }
            p.weights.push_back(std::move(w));
            p.biases.push_back(std::move(b));
        }
        return p;
    }

    static MlpParams zeros(std::size_t input, std::size_t hidden, std::size_t depth, std::size_t output) {
        MlpParams p;
        std::vector<std::size_t> widths{input};
        for (std::size_t i = 0; i < depth; ++i) {
            widths.push_back(hidden);
        }
        widths.push_back(output);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            p.weights.push_back(Matrix::Zero(to_index(widths[l + 1]), to_index(widths[l])));
            p.biases.push_back(Matrix::Zero(1, to_index(widths[l + 1])));
        }
        return p;
    }

    /// Same shapes, all zeros (gradient accumulators).
    [[nodiscard]] MlpParams zeros_like() const {
        MlpParams p = *this;
        for (auto* t : p.tensors()) {
            t->setZero();
        }
        return p;
    }

    bool operator==(const MlpParams& other) const {
        if (hidden_activation != other.hidden_activation || weights.size() != other.weights.size()) {
            return false;
        }
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != other.weights[l].rows() || weights[l].cols() != other.weights[l].cols() ||
                weights[l] != other.weights[l] || biases[l] != other.biases[l]) {
                return false;
            }
        }
        return true;
    }
};

namespace detail {

inline void activate(Matrix& m, Activation a) {
    if (a == Activation::Selu) {
        m = m.unaryExpr([](double z) { return selu_scalar(z); });
    }
}

inline void check_input(const MlpParams& p, Eigen::Index cols) {
    if (to_size(cols) != p.input_width()) {
        throw ShapeError("mlp_forward: input width " + std::to_string(cols) + " != expected " +
                         std::to_string(p.input_width()));
    }
}

} // namespace detail

/// Batched forward pass; rows are samples.
inline Matrix mlp_forward(const MlpParams& p, const Matrix& batch) {
    detail::check_input(p, batch.cols());
    require_finite(batch, "mlp_forward input");
    Matrix h = batch;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        Matrix next = h * p.weights[l].transpose();
        next.rowwise() += p.biases[l].row(0);
        if (l + 1 < p.weights.size()) {
            detail::activate(next, p.hidden_activation);
        }
        h = std::move(next);
    }
    return h;
}

inline Vector mlp_forward(const MlpParams& p, const Vector& input) {
    Matrix row = input.transpose();
    Matrix out = mlp_forward(p, row);
    return out.row(0).transpose();
}

/// Parameters placed on a tape as leaves (trainable) or constants (frozen).
struct MlpBinding {
    std::vector<Var> weights;
    std::vector<Var> biases;
    Activation hidden_activation = Activation::Selu;
    std::size_t input_width = 0;
};

inline MlpBinding bind(Tape& tape, const MlpParams& p, bool trainable = true) {
    MlpBinding b;
    b.hidden_activation = p.hidden_activation;
    b.input_width = p.input_width();
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        b.weights.push_back(trainable ? tape.leaf(p.weights[l]) : tape.constant(p.weights[l]));
        b.biases.push_back(trainable ? tape.leaf(p.biases[l]) : tape.constant(p.biases[l]));
    }
    return b;
}

inline Var mlp_forward(const MlpBinding& b, Var input) {
    if (to_size(input.cols()) != b.input_width) {
        throw ShapeError("mlp_forward: input width " + std::to_string(input.cols()) + " != expected " +
                         std::to_string(b.input_width));
    }
    require_finite(input.value(), "mlp_forward input");
    Var h = input;
    for (std::size_t l = 0; l < b.weights.size(); ++l) {
        h = linear(h, b.weights[l], b.biases[l]);
        if (l + 1 < b.weights.size() && b.hidden_activation == Activation::Selu) {
            h = selu(h);
        }
    }
    return h;
}

/// Collects leaf gradients after Tape::backward into an MlpParams-shaped container.
inline MlpParams gradients(const MlpBinding& b, const MlpParams& like) {
    MlpParams g = like.zeros_like();
    for (std::size_t l = 0; l < b.weights.size(); ++l) {
        g.weights[l] = b.weights[l].grad();
        g.biases[l] = b.biases[l].grad();
    }
    return g;
}

} // namespace mfm::nn
