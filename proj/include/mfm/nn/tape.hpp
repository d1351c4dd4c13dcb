#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every node holds a matrix value; scalars are 1x1 matrices. Binary
// elementwise ops broadcast a 1x1, 1xC or Rx1 operand against an RxC one.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mfm/types.hpp"

namespace mfm::nn {

enum class OpKind {
    Leaf,
    Constant,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Selu,
    Square,
    Softplus,
    Sum,
    Mean,
    RowSum,
    Custom,
};

// Canonical SeLU constants.
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluLambda = 1.0507009873554805;

class Tape;

/// Handle to a tape node.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] std::size_t index() const { return index_; }
    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] Matrix grad() const;
    [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
    [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
    [[nodiscard]] double scalar() const;

private:
    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

class Tape {
public:
    /// Accumulates the gradient of node `self` into its parents.
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    struct Node {
        OpKind kind;
        std::vector<std::size_t> parents;
        Matrix value;
        Matrix grad; // empty until touched by backward
        BackwardFn backward;
        bool requires_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf; receives a gradient.
    Var leaf(Matrix value) {
        nodes_.push_back(Node{OpKind::Leaf, {}, std::move(value), {}, {}, true});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Matrix value) {
        nodes_.push_back(Node{OpKind::Constant, {}, std::move(value), {}, {}, false});
        return Var(this, nodes_.size() - 1);
    }

    Var constant_scalar(double v) {
        Matrix m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    Var record(OpKind kind, std::vector<std::size_t> parents, Matrix value, BackwardFn fn) {
        bool rg = false;
        for (auto p : parents) {
            if (p >= nodes_.size()) {
                throw ContractError("tape: parent index out of range");
            }
            rg = rg || nodes_[p].requires_grad;
        }
        nodes_.push_back(Node{kind, std::move(parents), std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg});
        return Var(this, nodes_.size() - 1);
    }

    /// Runs reverse accumulation from a 1x1 output node.
    void backward(Var output) {
        if (output.tape() != this) {
            throw ContractError("backward: variable belongs to another tape");
        }
        const std::size_t out = output.index();
        const Matrix& v = nodes_[out].value;
        if (v.rows() != 1 || v.cols() != 1) {
            throw ContractError("backward: output must be scalar, got " + shape_str(v.rows(), v.cols()));
        }
        for (auto& n : nodes_) {
            n.grad.resize(0, 0);
        }
        nodes_[out].grad = Matrix::Ones(1, 1);
        for (std::size_t i = out + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0 || !n.backward) {
                continue;
            }
            n.backward(*this, i);
        }
    }

    [[nodiscard]] const Node& node(std::size_t i) const { return nodes_.at(i); }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] const Matrix& value(std::size_t i) const { return nodes_[i].value; }

    /// Gradient of a node; zeros if backward never reached it.
    [[nodiscard]] Matrix grad(std::size_t i) const {
        const Node& n = nodes_.at(i);
        if (n.grad.size() == 0) {
            return Matrix::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    [[nodiscard]] const Matrix& upstream(std::size_t i) const { return nodes_[i].grad; }

    /// Adds `g` into the gradient slot of node `i` (no-op for constants).
    void accumulate(std::size_t i, const Matrix& g) {
        Node& n = nodes_[i];
        if (!n.requires_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const {
    return tape_->value(index_);
}

inline Matrix Var::grad() const {
    return tape_->grad(index_);
}

inline double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) {
        throw ContractError("scalar(): node is " + shape_str(v.rows(), v.cols()));
    }
    return v(0, 0);
}

namespace detail {

enum class Bcast { Same, Scalar, Row, Col };

inline Bcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) {
        return Bcast::Same;
    }
    if (b.rows() == 1 && b.cols() == 1) {
        return Bcast::Scalar;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
        return Bcast::Row;
    }
    if (b.cols() == 1 && b.rows() == a.rows()) {
        return Bcast::Col;
    }
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.rows(), b.cols()) + " against " +
                     shape_str(a.rows(), a.cols()));
}

inline Matrix expand(const Matrix& b, Bcast k, Eigen::Index rows, Eigen::Index cols) {
    switch (k) {
    case Bcast::Same:
        return b;
    case Bcast::Scalar:
        return Matrix::Constant(rows, cols, b(0, 0));
    case Bcast::Row:
        return b.replicate(rows, 1);
    case Bcast::Col:
        return b.replicate(1, cols);
    }
    return b;
}

inline Matrix reduce(const Matrix& g, Bcast k) {
    switch (k) {
    case Bcast::Same:
        return g;
    case Bcast::Scalar: {
        Matrix s(1, 1);
        s(0, 0) = g.sum();
        return s;
    }
    case Bcast::Row:
        return g.colwise().sum();
    case Bcast::Col:
        return g.rowwise().sum();
    }
    return g;
}

// Orders operands so the broadcast one (if any) is second.
inline std::pair<Var, Var> big_first(Var a, Var b) {
    if (a.value().size() < b.value().size()) {
        return {b, a};
    }
    return {a, b};
}

inline void same_tape(Var a, Var b) {
    if (a.tape() != b.tape() || a.tape() == nullptr) {
        throw ContractError("operands live on different tapes");
    }
}

} // namespace detail

inline Var operator+(Var a, Var b) {
    detail::same_tape(a, b);
    auto [x, y] = detail::big_first(a, b);
    const auto k = detail::broadcast_kind(x.value(), y.value(), "add");
    Matrix v = x.value() + detail::expand(y.value(), k, x.rows(), x.cols());
    const std::size_t ix = x.index();
    const std::size_t iy = y.index();
    return x.tape()->record(OpKind::Add, {ix, iy}, std::move(v), [ix, iy, k](Tape& t, std::size_t self) {
        const Matrix& g = t.upstream(self);
        t.accumulate(ix, g);
        t.accumulate(iy, detail::reduce(g, k));
    });
}

/// a - b; b may broadcast against a.
inline Var operator-(Var a, Var b) {
    detail::same_tape(a, b);
    const auto k = detail::broadcast_kind(a.value(), b.value(), "sub");
    Matrix v = a.value() - detail::expand(b.value(), k, a.rows(), a.cols());
    const std::size_t ia = a.index();
    const std::size_t ib = b.index();
    return a.tape()->record(OpKind::Sub, {ia, ib}, std::move(v), [ia, ib, k](Tape& t, std::size_t self) {
        const Matrix& g = t.upstream(self);
        t.accumulate(ia, g);
        t.accumulate(ib, -detail::reduce(g, k));
    });
}

/// Elementwise product with broadcasting.
inline Var operator*(Var a, Var b) {
    detail::same_tape(a, b);
    auto [x, y] = detail::big_first(a, b);
    const auto k = detail::broadcast_kind(x.value(), y.value(), "mul");
    Matrix yb = detail::expand(y.value(), k, x.rows(), x.cols());
    Matrix v = x.value().cwiseProduct(yb);
    const std::size_t ix = x.index();
    const std::size_t iy = y.index();
    return x.tape()->record(OpKind::Mul, {ix, iy}, std::move(v),
                            [ix, iy, k, yb = std::move(yb)](Tape& t, std::size_t self) {
                                const Matrix& g = t.upstream(self);
                                if (t.node(ix).requires_grad) {
                                    t.accumulate(ix, g.cwiseProduct(yb));
                                }
                                if (t.node(iy).requires_grad) {
                                    t.accumulate(iy, detail::reduce(g.cwiseProduct(t.value(ix)), k));
                                }
                            });
}

inline Var operator*(double s, Var a) {
    Matrix v = s * a.value();
    const std::size_t ia = a.index();
    return a.tape()->record(OpKind::Scale, {ia}, std::move(v), [ia, s](Tape& t, std::size_t self) {
        t.accumulate(ia, s * t.upstream(self));
    });
}

inline Var operator*(Var a, double s) {
    return s * a;
}

/// y = x W^T + b with x (B x in), W (out x in), b (1 x out).
inline Var linear(Var x, Var w, Var b) {
    detail::same_tape(x, w);
    detail::same_tape(x, b);
    const Matrix& xv = x.value();
    const Matrix& wv = w.value();
    const Matrix& bv = b.value();
    if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows()) {
        throw ShapeError("linear: input " + shape_str(xv.rows(), xv.cols()) + ", weight " +
                         shape_str(wv.rows(), wv.cols()) + ", bias " + shape_str(bv.rows(), bv.cols()));
    }
    Matrix v = xv * wv.transpose();
    v.rowwise() += bv.row(0);
    const std::size_t ix = x.index();
    const std::size_t iw = w.index();
    const std::size_t ib = b.index();
    return x.tape()->record(OpKind::Linear, {ix, iw, ib}, std::move(v), [ix, iw, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.upstream(self);
        if (t.node(ix).requires_grad) {
            t.accumulate(ix, g * t.value(iw));
        }
        if (t.node(iw).requires_grad) {
            t.accumulate(iw, g.transpose() * t.value(ix));
        }
        if (t.node(ib).requires_grad) {
            t.accumulate(ib, g.colwise().sum());
        }
    });
}

inline double selu_scalar(double x) {
    return x > 0.0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x);
}

inline double selu_grad_scalar(double x) {
    return x > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x);
}

inline Var selu(Var x) {
    Matrix v = x.value().unaryExpr([](double z) { return selu_scalar(z); });
    const std::size_t ix = x.index();
    return x.tape()->record(OpKind::Selu, {ix}, std::move(v), [ix](Tape& t, std::size_t self) {
        Matrix d = t.value(ix).unaryExpr([](double z) { return selu_grad_scalar(z); });
        t.accumulate(ix, t.upstream(self).cwiseProduct(d));
    });
}

inline Var square(Var x) {
    Matrix v = x.value().cwiseAbs2();
    const std::size_t ix = x.index();
    return x.tape()->record(OpKind::Square, {ix}, std::move(v), [ix](Tape& t, std::size_t self) {
        t.accumulate(ix, 2.0 * t.upstream(self).cwiseProduct(t.value(ix)));
    });
}

inline double softplus_scalar(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

inline Var softplus(Var x) {
    Matrix v = x.value().unaryExpr([](double z) { return softplus_scalar(z); });
    const std::size_t ix = x.index();
    return x.tape()->record(OpKind::Softplus, {ix}, std::move(v), [ix](Tape& t, std::size_t self) {
        Matrix d = t.value(ix).unaryExpr([](double z) { return sigmoid_scalar(z); });
        t.accumulate(ix, t.upstream(self).cwiseProduct(d));
    });
}

inline Var sum(Var x) {
    Matrix v(1, 1);
    v(0, 0) = x.value().sum();
    const std::size_t ix = x.index();
    const Eigen::Index r = x.rows();
    const Eigen::Index c = x.cols();
    return x.tape()->record(OpKind::Sum, {ix}, std::move(v), [ix, r, c](Tape& t, std::size_t self) {
        t.accumulate(ix, Matrix::Constant(r, c, t.upstream(self)(0, 0)));
    });
}

/// Mean over rows of the per-row sums, i.e. sum(x) / rows.
inline Var mean_rows(Var x) {
    const Eigen::Index r = x.rows();
    const Eigen::Index c = x.cols();
    if (r == 0) {
        throw ShapeError("mean_rows: empty input");
    }
    Matrix v(1, 1);
    v(0, 0) = x.value().sum() / static_cast<double>(r);
    const std::size_t ix = x.index();
    return x.tape()->record(OpKind::Mean, {ix}, std::move(v), [ix, r, c](Tape& t, std::size_t self) {
        t.accumulate(ix, Matrix::Constant(r, c, t.upstream(self)(0, 0) / static_cast<double>(r)));
    });
}

/// Sum across columns: (B x C) -> (B x 1).
inline Var row_sum(Var x) {
    Matrix v = x.value().rowwise().sum();
    const std::size_t ix = x.index();
    const Eigen::Index c = x.cols();
    return x.tape()->record(OpKind::RowSum, {ix}, std::move(v), [ix, c](Tape& t, std::size_t self) {
        t.accumulate(ix, t.upstream(self).replicate(1, c));
    });
}

/// Node with a caller-provided value and backward rule.
inline Var custom(Tape& tape, std::vector<std::size_t> parents, Matrix value, Tape::BackwardFn fn) {
    return tape.record(OpKind::Custom, std::move(parents), std::move(value), std::move(fn));
}

} // namespace mfm::nn
