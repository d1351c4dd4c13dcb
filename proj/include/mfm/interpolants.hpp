#pragma once

// Learned interpolants between paired endpoints.
//
// On a segment [ta, tb] with tau = (t - ta) / (tb - ta) the path is
//
//   Unit gate:       x = (1 - tau) xa + tau xb + tau (1 - tau) phi(t, xa, xb)
//   Quadratic gate:  x = a xa + b xb + (1 - a^2 - b^2) phi(t, xa, xb),
//                    a = (tb - t) / (tb - ta), b = (t - ta) / (tb - ta)
//
// Both gates vanish at the segment ends, so the endpoints are met for any phi.
// d phi / dt is a central difference with step h clamped to the segment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfm/metrics.hpp"
#include "mfm/nn/checkpoint.hpp"
#include "mfm/nn/mlp.hpp"
#include "mfm/nn/tape.hpp"
#include "mfm/rng.hpp"
#include "mfm/training.hpp"
#include "mfm/types.hpp"

namespace mfm {

enum class Gate { Unit, Quadratic };

inline std::string to_string(Gate g) {
    return g == Gate::Unit ? "unit" : "quadratic";
}

inline Gate gate_from_string(const std::string& s) {
    if (s == "unit") {
        return Gate::Unit;
    }
    if (s == "quadratic") {
        return Gate::Quadratic;
    }
    throw ValidationError("unknown interpolant gate '" + s + "'");
}

inline constexpr double kDefaultTimeStep = 1e-3;

/// Correction network phi plus how it enters the path.
struct InterpolantModel {
    nn::MlpParams net;
    std::size_t dim = 0;
    double fd_step = kDefaultTimeStep;
    bool use_time = true;
    Gate gate = Gate::Unit;

    [[nodiscard]] std::size_t input_width() const { return (use_time ? 1 : 0) + 2 * dim; }

    void validate() const {
        net.validate();
        if (dim == 0) {
            throw ValidationError("interpolant: dimension must be >= 1");
        }
        if (net.input_width() != input_width() || net.output_width() != dim) {
            throw ShapeError("interpolant: network is " + std::to_string(net.input_width()) + " -> " +
                             std::to_string(net.output_width()) + ", expected " + std::to_string(input_width()) +
                             " -> " + std::to_string(dim));
        }
        if (!(fd_step > 0.0) || fd_step >= 0.5) {
            throw ValidationError("interpolant: finite-difference step must lie in (0, 0.5)");
        }
    }

    static InterpolantModel init(std::size_t dim, std::size_t width, std::size_t depth, Rng& rng,
                                 bool use_time = true) {
        InterpolantModel m;
        m.dim = dim;
        m.use_time = use_time;
        m.net = nn::MlpParams::init(m.input_width(), width, depth, dim, rng);
        m.validate();
        return m;
    }

    /// phi == 0 everywhere: the straight-line interpolant.
    static InterpolantModel zero(std::size_t dim, std::size_t width = 64, std::size_t depth = 3,
                                 bool use_time = true) {
        InterpolantModel m;
        m.dim = dim;
        m.use_time = use_time;
        m.net = nn::MlpParams::zeros(m.input_width(), width, depth, dim);
        return m;
    }
};

namespace detail {

struct GateCoefficients {
    Matrix wa;    // weight on xa
    Matrix wb;    // weight on xb
    Matrix g;     // gate on phi
    Matrix dg;    // d gate / dt
    Matrix inv_dt; // 1 / (tb - ta)
    Matrix t_lo;
    Matrix t_hi;
};

inline void check_times(const Vector& t, const SegmentBounds& seg, Eigen::Index rows) {
    if (t.size() != rows || seg.ta.size() != rows || seg.tb.size() != rows) {
        throw ShapeError("interpolant: need one time and one segment per row");
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!(seg.ta(i) < seg.tb(i))) {
            throw ValidationError("interpolant: segment start must precede its end");
        }
        if (!(t(i) >= seg.ta(i) && t(i) <= seg.tb(i))) {
            throw ValidationError("interpolant: time " + std::to_string(t(i)) + " outside segment [" +
                                  std::to_string(seg.ta(i)) + ", " + std::to_string(seg.tb(i)) + "]");
        }
    }
}

inline GateCoefficients gate_coefficients(Gate gate, const Vector& t, const SegmentBounds& seg, double h) {
    const Eigen::Index n = t.size();
    GateCoefficients c;
    c.wa.resize(n, 1);
    c.wb.resize(n, 1);
    c.g.resize(n, 1);
    c.dg.resize(n, 1);
    c.inv_dt.resize(n, 1);
    c.t_lo.resize(n, 1);
    c.t_hi.resize(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double ta = seg.ta(i);
        const double tb = seg.tb(i);
        const double span = tb - ta;
        const double tau = (t(i) - ta) / span;
        if (gate == Gate::Unit) {
            c.wa(i, 0) = 1.0 - tau;
            c.wb(i, 0) = tau;
            c.g(i, 0) = tau * (1.0 - tau);
            c.dg(i, 0) = (1.0 - 2.0 * tau) / span;
        } else {
            const double a = (tb - t(i)) / span;
            const double b = tau;
            c.wa(i, 0) = a;
            c.wb(i, 0) = b;
            c.g(i, 0) = 1.0 - a * a - b * b;
            c.dg(i, 0) = (2.0 * a - 2.0 * b) / span;
        }
        c.inv_dt(i, 0) = 1.0 / span;
        c.t_lo(i, 0) = std::max(ta, t(i) - h);
        c.t_hi(i, 0) = std::min(tb, t(i) + h);
    }
    return c;
}

inline Matrix network_input(const InterpolantModel& m, const Matrix& t, const Matrix& x0, const Matrix& x1) {
    const Eigen::Index n = x0.rows();
    const Eigen::Index d = x0.cols();
    const Eigen::Index off = m.use_time ? 1 : 0;
    Matrix in(n, off + 2 * d);
    if (m.use_time) {
        in.col(0) = t.col(0);
    }
    in.middleCols(off, d) = x0;
    in.middleCols(off + d, d) = x1;
    return in;
}

inline void check_endpoints(const InterpolantModel& m, const Matrix& x0, const Matrix& x1) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) {
        throw ShapeError("interpolant: endpoint batches differ in shape (" + shape_str(x0.rows(), x0.cols()) +
                         " vs " + shape_str(x1.rows(), x1.cols()) + ")");
    }
    if (to_size(x0.cols()) != m.dim) {
        throw ShapeError("interpolant: endpoint dimension " + std::to_string(x0.cols()) + " != model dimension " +
                         std::to_string(m.dim));
    }
    require_finite(x0, "interpolant x0");
    require_finite(x1, "interpolant x1");
}

} // namespace detail

/// Positions and velocities along a batch of paths.
struct PathBatch {
    Matrix x;
    Matrix xdot;
};

/// Evaluates the path and its time derivative for each row (no tape).
inline PathBatch evaluate_path(const InterpolantModel& m, const Vector& t, const Matrix& x0, const Matrix& x1,
                               const SegmentBounds& seg, Gate gate) {
    detail::check_endpoints(m, x0, x1);
    detail::check_times(t, seg, x0.rows());
    const auto c = detail::gate_coefficients(gate, t, seg, m.fd_step);
    const Matrix tm = t;
    const Matrix phi = nn::mlp_forward(m.net, detail::network_input(m, tm, x0, x1));
    PathBatch out;
    out.x = (x0.array().colwise() * c.wa.col(0).array() + x1.array().colwise() * c.wb.col(0).array()).matrix() +
            (phi.array().colwise() * c.g.col(0).array()).matrix();
    Matrix chord = ((x1 - x0).array().colwise() * c.inv_dt.col(0).array()).matrix();
    out.xdot = chord + (phi.array().colwise() * c.dg.col(0).array()).matrix();
    if (m.use_time) {
        const Matrix phi_hi = nn::mlp_forward(m.net, detail::network_input(m, c.t_hi, x0, x1));
        const Matrix phi_lo = nn::mlp_forward(m.net, detail::network_input(m, c.t_lo, x0, x1));
        const Matrix inv_h = (c.t_hi - c.t_lo).cwiseInverse();
        const Matrix phi_dot = ((phi_hi - phi_lo).array().colwise() * inv_h.col(0).array()).matrix();
        out.xdot += (phi_dot.array().colwise() * c.g.col(0).array()).matrix();
    }
    return out;
}

inline PathBatch evaluate_path(const InterpolantModel& m, const Vector& t, const Matrix& x0, const Matrix& x1) {
    return evaluate_path(m, t, x0, x1, SegmentBounds::unit(x0.rows()), Gate::Unit);
}

/// Straight segment without any network: x = (1 - tau) xa + tau xb, xdot = (xb - xa) / (tb - ta).
inline PathBatch straight_path(const Vector& t, const Matrix& x0, const Matrix& x1, const SegmentBounds& seg) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) {
        throw ShapeError("straight_path: endpoint batches differ in shape");
    }
    detail::check_times(t, seg, x0.rows());
    const auto c = detail::gate_coefficients(Gate::Unit, t, seg, kDefaultTimeStep);
    PathBatch out;
    out.x = (x0.array().colwise() * c.wa.col(0).array() + x1.array().colwise() * c.wb.col(0).array()).matrix();
    out.xdot = ((x1 - x0).array().colwise() * c.inv_dt.col(0).array()).matrix();
    return out;
}

/// Tape nodes for a batch of paths; gradients flow into the bound network.
struct PathVars {
    nn::Var x;
    nn::Var xdot;
};

inline PathVars path_on_tape(nn::Tape& tape, const nn::MlpBinding& net, const InterpolantModel& m, const Vector& t,
                             const Matrix& x0, const Matrix& x1, const SegmentBounds& seg, Gate gate) {
    detail::check_endpoints(m, x0, x1);
    detail::check_times(t, seg, x0.rows());
    const auto c = detail::gate_coefficients(gate, t, seg, m.fd_step);
    const Matrix tm = t;
    nn::Var phi = nn::mlp_forward(net, tape.constant(detail::network_input(m, tm, x0, x1)));
    nn::Var g = tape.constant(c.g);
    nn::Var base = tape.constant(
        (x0.array().colwise() * c.wa.col(0).array() + x1.array().colwise() * c.wb.col(0).array()).matrix());
    nn::Var chord = tape.constant(((x1 - x0).array().colwise() * c.inv_dt.col(0).array()).matrix());
    PathVars out;
    out.x = base + phi * g;
    out.xdot = chord + phi * tape.constant(c.dg);
    if (m.use_time) {
        nn::Var phi_hi = nn::mlp_forward(net, tape.constant(detail::network_input(m, c.t_hi, x0, x1)));
        nn::Var phi_lo = nn::mlp_forward(net, tape.constant(detail::network_input(m, c.t_lo, x0, x1)));
        nn::Var phi_dot = (phi_hi - phi_lo) * tape.constant((c.t_hi - c.t_lo).cwiseInverse());
        out.xdot = out.xdot + phi_dot * g;
    }
    return out;
}

/// Per-row sum_a xdot_a^2 G_a(x).
inline Vector path_energies(const MetricField& metric, const PathBatch& p) {
    const Matrix g = metric.diag_batch(p.x);
    return (g.array() * p.xdot.array().square()).rowwise().sum().matrix();
}

/// Mean geodesic energy of a batch as a tape scalar.
inline nn::Var energy_on_tape(const MetricField& metric, const PathVars& p) {
    nn::Var g = metric_diag(metric, p.x);
    return nn::mean_rows(nn::row_sum(g * nn::square(p.xdot)));
}

struct EnergyEstimate {
    double mean = 0.0;
    Vector per_sample;
    std::size_t count = 0;
};

inline EnergyEstimate make_estimate(Vector per_sample) {
    EnergyEstimate e;
    e.count = to_size(per_sample.size());
    e.mean = e.count == 0 ? 0.0 : per_sample.sum() / static_cast<double>(e.count);
    e.per_sample = std::move(per_sample);
    return e;
}

inline EnergyEstimate energy_estimate(const InterpolantModel& m, const MetricField& metric, const Vector& t,
                                      const Matrix& x0, const Matrix& x1, const SegmentBounds& seg, Gate gate) {
    return make_estimate(path_energies(metric, evaluate_path(m, t, x0, x1, seg, gate)));
}

inline EnergyEstimate straight_energy_estimate(const MetricField& metric, const Vector& t, const Matrix& x0,
                                               const Matrix& x1, const SegmentBounds& seg) {
    return make_estimate(path_energies(metric, straight_path(t, x0, x1, seg)));
}

// ---------------------------------------------------------------------------
// single-pair conveniences
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix as_row(const Vector& v) {
    return v.transpose();
}

inline PathBatch single(const InterpolantModel& m, double t, const Vector& x0, const Vector& x1, double ta,
                        double tb, Gate gate) {
    Vector tv(1);
    tv(0) = t;
    return evaluate_path(m, tv, as_row(x0), as_row(x1), SegmentBounds::constant(1, ta, tb), gate);
}

} // namespace detail

inline Vector interpolate(double t, const Vector& x0, const Vector& x1, const InterpolantModel& m) {
    return detail::single(m, t, x0, x1, 0.0, 1.0, Gate::Unit).x.row(0).transpose();
}

inline Vector interpolant_velocity(double t, const Vector& x0, const Vector& x1, const InterpolantModel& m) {
    return detail::single(m, t, x0, x1, 0.0, 1.0, Gate::Unit).xdot.row(0).transpose();
}

/// Point on the segment [ta, tb] between two intermediate marginal samples.
inline Vector interpolate_multi(double t, const Vector& xa, const Vector& xb, double ta, double tb,
                                const InterpolantModel& m) {
    return detail::single(m, t, xa, xb, ta, tb, Gate::Quadratic).x.row(0).transpose();
}

inline Vector interpolant_velocity_multi(double t, const Vector& xa, const Vector& xb, double ta, double tb,
                                         const InterpolantModel& m) {
    return detail::single(m, t, xa, xb, ta, tb, Gate::Quadratic).xdot.row(0).transpose();
}

inline double geodesic_energy(double t, const Vector& x0, const Vector& x1, const InterpolantModel& m,
                              const MetricField& metric) {
    return path_energies(metric, detail::single(m, t, x0, x1, 0.0, 1.0, Gate::Unit))(0);
}

struct EnergyParts {
    double kinetic = 0.0;   // |xdot|^2
    double potential = 0.0; // xdot^T (G - I) xdot
    double total = 0.0;     // xdot^T G xdot
};

inline EnergyParts potential_decomposition(double t, const Vector& x0, const Vector& x1, const InterpolantModel& m,
                                           const MetricField& metric) {
    const PathBatch p = detail::single(m, t, x0, x1, 0.0, 1.0, Gate::Unit);
    const Vector g = metric.diag_batch(p.x).row(0).transpose();
    const Vector v = p.xdot.row(0).transpose();
    EnergyParts e;
    e.kinetic = v.squaredNorm();
    e.potential = (v.array().square() * (g.array() - 1.0)).sum();
    e.total = (v.array().square() * g.array()).sum();
    return e;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline nn::Archive to_archive(const InterpolantModel& m) {
    m.validate();
    nn::Archive a;
    a.kind = "interpolant";
    a.set_meta("dim", std::to_string(m.dim));
    a.set_meta("fd_step", m.fd_step);
    a.set_meta("use_time", m.use_time ? "1" : "0");
    a.set_meta("gate", to_string(m.gate));
    nn::store_mlp(a, m.net, "phi.");
    return a;
}

inline InterpolantModel interpolant_from_archive(const nn::Archive& a) {
    if (a.kind != "interpolant") {
        throw IoError("expected an interpolant archive, got '" + a.kind + "'");
    }
    InterpolantModel m;
    m.dim = std::stoul(a.meta_value("dim"));
    m.fd_step = a.meta_double("fd_step");
    m.use_time = a.meta_value("use_time") == "1";
    m.gate = gate_from_string(a.meta_value("gate"));
    m.net = nn::load_mlp(a, "phi.");
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct InterpolantTrainConfig {
    FitConfig fit{1000, 3, nn::OptimizerConfig::adam(1e-4)};
    /// Divide the loss by the mean straight-line energy of the validation pairs.
    bool normalize_by_straight_energy = false;
};

struct InterpolantTrainResult {
    TrainTrace trace;
    double straight_val_energy = 0.0; // validation energy of phi == 0
    double final_val_energy = 0.0;    // validation energy of the restored model
};

/// Mean geodesic energy of `m` on a batch, as a tape scalar over the bound network.
inline nn::Var interpolant_loss(nn::Tape& tape, const nn::MlpBinding& net, const InterpolantModel& m,
                                const MetricField& metric, const PairBatch& b) {
    return energy_on_tape(metric, path_on_tape(tape, net, m, b.t, b.x0, b.x1, b.seg, m.gate));
}

/**
 * Minimises the Monte Carlo geodesic energy over phi with Adam, drawing fresh
 * coupled pairs and times every step; early stopping on `val`.
 */
inline InterpolantTrainResult train_interpolant(InterpolantModel& m, const MetricField& metric, PairStream& stream,
                                                const PairBatch& val, const InterpolantTrainConfig& cfg) {
    m.validate();
    if (stream.dim() != m.dim) {
        throw ShapeError("train_interpolant: data dimension " + std::to_string(stream.dim()) +
                         " != model dimension " + std::to_string(m.dim));
    }
    InterpolantTrainResult res;
    if (val.rows() > 0) {
        res.straight_val_energy = straight_energy_estimate(metric, val.t, val.x0, val.x1, val.seg).mean;
    }
    double scale = 1.0;
    if (cfg.normalize_by_straight_energy) {
        if (!(res.straight_val_energy > 0.0)) {
            throw ValidationError("train_interpolant: straight-line energy is zero; cannot normalise");
        }
        scale = 1.0 / res.straight_val_energy;
    }
    const InterpolantModel shape = m;
    LossBuilder loss = [&](nn::Tape& tape, const nn::MlpBinding& net, const PairBatch& b) {
        nn::Var l = interpolant_loss(tape, net, shape, metric, b);
        return scale == 1.0 ? l : scale * l;
    };
    res.trace = fit(m.net, stream, val, loss, cfg.fit, "interpolant");
    if (val.rows() > 0) {
        res.final_val_energy = energy_estimate(m, metric, val.t, val.x0, val.x1, val.seg, m.gate).mean;
    }
    return res;
}

} // namespace mfm
