#pragma once

// Stage 2: regress a vector field v(t, x) onto the velocities of a frozen
// interpolant. Without an interpolant the targets are straight segments.

#include <optional>
#include <string>

#include "mfm/interpolants.hpp"
#include "mfm/metrics.hpp"
#include "mfm/nn/checkpoint.hpp"
#include "mfm/nn/mlp.hpp"
#include "mfm/training.hpp"

namespace mfm {

struct VectorFieldModel {
    nn::MlpParams net; // (t, x) -> velocity
    std::size_t dim = 0;

    void validate() const {
        net.validate();
        if (dim == 0 || net.input_width() != dim + 1 || net.output_width() != dim) {
            throw ShapeError("vector field: network must map " + std::to_string(dim + 1) + " -> " +
                             std::to_string(dim));
        }
    }

    static VectorFieldModel init(std::size_t dim, std::size_t width, std::size_t depth, Rng& rng) {
        VectorFieldModel v;
        v.dim = dim;
        v.net = nn::MlpParams::init(dim + 1, width, depth, dim, rng);
        return v;
    }

    /// Network input rows (t_i, x_i).
    [[nodiscard]] static Matrix input(const Vector& t, const Matrix& x) {
        if (t.size() != x.rows()) {
            throw ShapeError("vector field: need one time per row");
        }
        Matrix in(x.rows(), x.cols() + 1);
        in.col(0) = t;
        in.rightCols(x.cols()) = x;
        return in;
    }

    [[nodiscard]] Matrix operator()(double t, const Matrix& x) const {
        if (to_size(x.cols()) != dim) {
            throw ShapeError("vector field: state dimension " + std::to_string(x.cols()) + " != " +
                             std::to_string(dim));
        }
        return nn::mlp_forward(net, input(Vector::Constant(x.rows(), t), x));
    }
};

enum class NormMode { Normalized, Riemannian };

inline std::string to_string(NormMode m) {
    return m == NormMode::Normalized ? "normalized" : "riemannian";
}

inline NormMode norm_mode_from_string(const std::string& s) {
    if (s == "normalized") {
        return NormMode::Normalized;
    }
    if (s == "riemannian") {
        return NormMode::Riemannian;
    }
    throw ValidationError("unknown norm mode '" + s + "' (expected normalized or riemannian)");
}

/// Regression targets: points on the paths and their velocities.
inline PathBatch regression_targets(const std::optional<InterpolantModel>& interp, const PairBatch& b) {
    if (interp) {
        return evaluate_path(*interp, b.t, b.x0, b.x1, b.seg, interp->gate);
    }
    return straight_path(b.t, b.x0, b.x1, b.seg);
}

/// Mean residual |v - xdot|^2 (normalized) or (v - xdot)^T G (v - xdot) (riemannian), as a tape scalar.
inline nn::Var mfm_loss_on_tape(nn::Tape& tape, const nn::MlpBinding& vf, const PathBatch& target, const Vector& t,
                                const MetricField& metric, NormMode mode) {
    nn::Var v = nn::mlp_forward(vf, tape.constant(VectorFieldModel::input(t, target.x)));
    nn::Var r2 = nn::square(v - tape.constant(target.xdot));
    if (mode == NormMode::Riemannian && !metric.is_identity()) {
        r2 = r2 * tape.constant(metric.diag_batch(target.x));
    }
    return nn::mean_rows(nn::row_sum(r2));
}

/// Single-pair MFM loss on the unit segment.
inline double mfm_loss(double t, const Vector& x0, const Vector& x1, const std::optional<InterpolantModel>& interp,
                       const MetricField& metric, const VectorFieldModel& vf, NormMode mode) {
    if (to_size(x0.size()) != vf.dim || x1.size() != x0.size()) {
        throw ShapeError("mfm_loss: endpoint dimension does not match the vector field");
    }
    PairBatch b;
    b.x0 = x0.transpose();
    b.x1 = x1.transpose();
    b.t = Vector::Constant(1, t);
    b.seg = SegmentBounds::unit(1);
    const PathBatch target = regression_targets(interp, b);
    const Matrix v = vf(t, target.x);
    const Eigen::ArrayXd r = (v - target.xdot).row(0).transpose().array();
    if (mode == NormMode::Riemannian) {
        const Eigen::ArrayXd g = metric.diag_batch(target.x).row(0).transpose().array();
        return (r.square() * g).sum();
    }
    return r.square().sum();
}

struct MatchConfig {
    NormMode mode = NormMode::Normalized;
    FitConfig fit{1000, 3, nn::OptimizerConfig::adamw(1e-3, 1e-5)};
};

/**
 * Trains `vf` on fresh coupled pairs each step. The interpolant is only read;
 * pass std::nullopt for straight paths.
 */
inline TrainTrace train_vector_field(VectorFieldModel& vf, const std::optional<InterpolantModel>& interp,
                                     const MetricField& metric, PairStream& stream, const PairBatch& val,
                                     const MatchConfig& cfg) {
    vf.validate();
    if (stream.dim() != vf.dim) {
        throw ShapeError("train_vector_field: data dimension " + std::to_string(stream.dim()) +
                         " != field dimension " + std::to_string(vf.dim));
    }
    if (interp) {
        interp->validate();
        if (interp->dim != vf.dim) {
            throw ShapeError("train_vector_field: interpolant and field dimensions differ");
        }
    }
    LossBuilder loss = [&](nn::Tape& tape, const nn::MlpBinding& net, const PairBatch& b) {
        return mfm_loss_on_tape(tape, net, regression_targets(interp, b), b.t, metric, cfg.mode);
    };
    return fit(vf.net, stream, val, loss, cfg.fit, "vector field");
}

inline nn::Archive to_archive(const VectorFieldModel& v) {
    v.validate();
    nn::Archive a;
    a.kind = "vector_field";
    a.set_meta("dim", std::to_string(v.dim));
    nn::store_mlp(a, v.net, "v.");
    return a;
}

inline VectorFieldModel vector_field_from_archive(const nn::Archive& a) {
    if (a.kind != "vector_field") {
        throw IoError("expected a vector_field archive, got '" + a.kind + "'");
    }
    VectorFieldModel v;
    v.dim = std::stoul(a.meta_value("dim"));
    v.net = nn::load_mlp(a, "v.");
    v.validate();
    return v;
}

} // namespace mfm
