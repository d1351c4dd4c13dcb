#pragma once

// Reference geodesics by direct minimisation of the discrete energy
//
//   E(gamma) = M * sum_k D_k^T G(m_k) D_k,  D_k = gamma_{k+1} - gamma_k,  m_k = (gamma_k + gamma_{k+1}) / 2
//
// over the interior waypoints of an (M+1)-point polyline with pinned ends.
// Used only to check the learned interpolants, never inside training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mfm/interpolants.hpp"
#include "mfm/metrics.hpp"
#include "mfm/types.hpp"

namespace mfm {

/// M+1 waypoints as rows; the first and last are the endpoints.
struct DiscretePath {
    Matrix points;

    [[nodiscard]] std::size_t segments() const { return points.rows() < 1 ? 0 : to_size(points.rows() - 1); }

    static DiscretePath chord(const Vector& x0, const Vector& x1, std::size_t m) {
        if (m < 1) {
            throw ValidationError("chord: need at least one segment");
        }
        if (x0.size() != x1.size()) {
            throw ShapeError("chord: endpoint dimensions differ");
        }
        DiscretePath p;
        p.points.resize(to_index(m + 1), x0.size());
        for (std::size_t k = 0; k <= m; ++k) {
            const double s = static_cast<double>(k) / static_cast<double>(m);
            p.points.row(to_index(k)) = ((1.0 - s) * x0 + s * x1).transpose();
        }
        p.points.row(0) = x0.transpose();
        p.points.row(to_index(m)) = x1.transpose();
        return p;
    }
};

namespace detail {

inline void check_path(const DiscretePath& p) {
    if (p.points.rows() < 2) {
        throw ValidationError("discrete path needs at least two waypoints");
    }
    require_finite(p.points, "discrete path");
}

inline Matrix segment_deltas(const Matrix& pts) {
    const Eigen::Index m = pts.rows() - 1;
    return pts.bottomRows(m) - pts.topRows(m);
}

inline Matrix segment_midpoints(const Matrix& pts) {
    const Eigen::Index m = pts.rows() - 1;
    return 0.5 * (pts.bottomRows(m) + pts.topRows(m));
}

} // namespace detail

inline double discrete_energy(const DiscretePath& p, const MetricField& metric) {
    detail::check_path(p);
    const Matrix d = detail::segment_deltas(p.points);
    const Matrix g = metric.diag_batch(detail::segment_midpoints(p.points));
    return static_cast<double>(d.rows()) * (g.array() * d.array().square()).sum();
}

/// Gradient of discrete_energy with respect to every waypoint (ends included).
inline Matrix discrete_energy_gradient(const DiscretePath& p, const MetricField& metric) {
    detail::check_path(p);
    const Matrix d = detail::segment_deltas(p.points);
    const Matrix mid = detail::segment_midpoints(p.points);
    const Matrix g = metric.diag_batch(mid);
    const double scale = static_cast<double>(d.rows());
    const Matrix lin = 2.0 * (g.array() * d.array()).matrix();
    const Matrix half_vjp = 0.5 * metric.diag_vjp(mid, d.array().square().matrix());
    Matrix grad = Matrix::Zero(p.points.rows(), p.points.cols());
    const Eigen::Index m = d.rows();
    grad.bottomRows(m) += lin + half_vjp;
    grad.topRows(m) += half_vjp - lin;
    return scale * grad;
}

/// sum_k sqrt(D_k^T G(m_k) D_k)
inline double path_length(const DiscretePath& p, const MetricField& metric) {
    detail::check_path(p);
    const Matrix d = detail::segment_deltas(p.points);
    const Matrix g = metric.diag_batch(detail::segment_midpoints(p.points));
    return (g.array() * d.array().square()).rowwise().sum().sqrt().sum();
}

struct GeodesicSolverConfig {
    std::size_t max_iters = 5000;
    /// Stop when |grad| (interior waypoints) falls below this times the initial |grad|.
    double grad_tol = 1e-7;
    /// Or when the relative energy decrease over `stall_window` accepted steps is below this.
    double stall_tol = 1e-12;
    std::size_t stall_window = 50;
    double armijo = 1e-4;
    double shrink = 0.5;
    std::size_t max_backtracks = 60;
};

struct GeodesicSolution {
    DiscretePath path;
    double energy = 0.0;
    double chord_energy = 0.0;
    std::vector<double> energy_trace; // energy after each accepted step, starting with the chord
    std::size_t iterations = 0;
    bool converged = false;
};

/**
 * Gradient descent on the interior waypoints, starting from the straight
 * chord. Each step starts from a Barzilai-Borwein length and backtracks
 * until the Armijo condition holds, so accepted energies never increase.
 * If the iteration cap is hit, the best path so far is returned with
 * `converged == false`.
 */
inline GeodesicSolution solve_discrete_geodesic(const Vector& x0, const Vector& x1, const MetricField& metric,
                                                std::size_t m, const GeodesicSolverConfig& cfg = {}) {
    if (m < 2) {
        throw ValidationError("solve_discrete_geodesic: need M >= 2 segments");
    }
    require_finite(x0.transpose(), "geodesic start");
    require_finite(x1.transpose(), "geodesic end");
    GeodesicSolution sol;
    sol.path = DiscretePath::chord(x0, x1, m);
    double energy = discrete_energy(sol.path, metric);
    sol.chord_energy = energy;
    sol.energy_trace.push_back(energy);
    const Eigen::Index inner = to_index(m) - 1;

    auto interior_grad = [&](const DiscretePath& p) {
        return Matrix(discrete_energy_gradient(p, metric).middleRows(1, inner));
    };

    Matrix grad = interior_grad(sol.path);
    const double g0 = grad.norm();
    if (g0 == 0.0) {
        sol.energy = energy;
        sol.converged = true;
        return sol;
    }
    double step = 1.0 / std::max(1.0, g0);
    Matrix prev_x;
    Matrix prev_g;
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
        sol.iterations = it + 1;
        const double gn2 = grad.squaredNorm();
        if (std::sqrt(gn2) <= cfg.grad_tol * g0) {
            sol.converged = true;
            break;
        }
        if (prev_x.size() > 0) {
            const Matrix sx = sol.path.points.middleRows(1, inner) - prev_x;
            const Matrix sg = grad - prev_g;
            const double sy = (sx.array() * sg.array()).sum();
            if (sy > 0.0) {
                step = sx.squaredNorm() / sy;
            }
        }
        DiscretePath trial = sol.path;
        double trial_energy = energy;
        bool accepted = false;
        double a = step;
        for (std::size_t bt = 0; bt < cfg.max_backtracks; ++bt) {
            trial.points.middleRows(1, inner) = sol.path.points.middleRows(1, inner) - a * grad;
            if (trial.points.allFinite()) {
                trial_energy = discrete_energy(trial, metric);
                if (std::isfinite(trial_energy) && trial_energy <= energy - cfg.armijo * a * gn2) {
                    accepted = true;
                    break;
                }
            }
            a *= cfg.shrink;
        }
        if (!accepted) {
            // No descent at machine precision: treat as stationary.
            sol.converged = true;
            break;
        }
        prev_x = sol.path.points.middleRows(1, inner);
        prev_g = grad;
        sol.path = std::move(trial);
        energy = trial_energy;
        sol.energy_trace.push_back(energy);
        step = a;
        grad = interior_grad(sol.path);
        const std::size_t n = sol.energy_trace.size();
        if (n > cfg.stall_window) {
            const double old = sol.energy_trace[n - 1 - cfg.stall_window];
            if (old - energy <= cfg.stall_tol * std::max(1.0, std::abs(old))) {
                sol.converged = true;
                break;
            }
        }
    }
    sol.energy = energy;
    return sol;
}

/// Hypothesis constants of the containment statement: tube radius rho,
/// data proximity delta, reference length bound gamma, metric floor kappa_min.
struct ContainmentSpec {
    double rho = 0.0;
    double delta = 0.0;
    double gamma = 1.0;
    double kappa_min = 1.0;

    void validate() const {
        if (!(rho > delta && delta > 0.0)) {
            throw ValidationError("containment: need rho > delta > 0");
        }
        if (!(gamma > 0.0) || !(kappa_min > 0.0)) {
            throw ValidationError("containment: need gamma > 0 and kappa_min > 0");
        }
    }
};

struct ContainmentReport {
    bool contained = false;
    double max_distance = 0.0; // max over waypoints of the distance to the nearest data point
};

inline ContainmentReport check_containment(const DiscretePath& p, const Matrix& data, const ContainmentSpec& spec) {
    spec.validate();
    detail::check_path(p);
    if (data.rows() == 0) {
        throw ValidationError("check_containment: empty data set");
    }
    if (data.cols() != p.points.cols()) {
        throw ShapeError("check_containment: dimension mismatch");
    }
    ContainmentReport r;
    for (Eigen::Index k = 0; k < p.points.rows(); ++k) {
        const double nearest = std::sqrt((data.rowwise() - p.points.row(k)).rowwise().squaredNorm().minCoeff());
        r.max_distance = std::max(r.max_distance, nearest);
    }
    r.contained = r.max_distance <= 2.0 * spec.rho;
    return r;
}

/// The interpolant sampled at t_k = k / M on the unit segment.
inline DiscretePath discretize_interpolant(const InterpolantModel& m, const Vector& x0, const Vector& x1,
                                           std::size_t segments) {
    if (segments < 1) {
        throw ValidationError("discretize_interpolant: need at least one segment");
    }
    const Eigen::Index n = to_index(segments + 1);
    Vector t(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        t(k) = static_cast<double>(k) / static_cast<double>(segments);
    }
    const Matrix a = x0.transpose().replicate(n, 1);
    const Matrix b = x1.transpose().replicate(n, 1);
    DiscretePath p;
    p.points = evaluate_path(m, t, a, b).x;
    return p;
}

/// Distance from `q` to the polyline through the rows of `pts`.
inline double distance_to_polyline(const RowVector& q, const Matrix& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k + 1 < pts.rows(); ++k) {
        const RowVector a = pts.row(k);
        const RowVector ab = pts.row(k + 1) - a;
        const double len2 = ab.squaredNorm();
        double s = len2 > 0.0 ? (q - a).dot(ab) / len2 : 0.0;
        s = std::clamp(s, 0.0, 1.0);
        best = std::min(best, (q - (a + s * ab)).norm());
    }
    if (pts.rows() == 1) {
        best = (q - pts.row(0)).norm();
    }
    return best;
}

struct GeodesicGap {
    double interpolant_energy = 0.0;
    double geodesic_energy = 0.0;
    double chord_energy = 0.0;
    double energy_gap = 0.0;          // interpolant - geodesic
    double relative_energy_gap = 0.0; // energy_gap / geodesic
    double max_pointwise_gap = 0.0;
    GeodesicSolution solution;
};

/// Compares the learned interpolant with the reference geodesic on the same discretisation.
inline GeodesicGap interpolant_vs_geodesic(const InterpolantModel& m, const MetricField& metric, const Vector& x0,
                                           const Vector& x1, std::size_t segments,
                                           const GeodesicSolverConfig& cfg = {}) {
    GeodesicGap gap;
    const DiscretePath ip = discretize_interpolant(m, x0, x1, segments);
    gap.interpolant_energy = discrete_energy(ip, metric);
    gap.solution = solve_discrete_geodesic(x0, x1, metric, segments, cfg);
    gap.geodesic_energy = gap.solution.energy;
    gap.chord_energy = gap.solution.chord_energy;
    gap.energy_gap = gap.interpolant_energy - gap.geodesic_energy;
    gap.relative_energy_gap = gap.geodesic_energy > 0.0 ? gap.energy_gap / gap.geodesic_energy : 0.0;
    for (Eigen::Index k = 0; k < ip.points.rows(); ++k) {
        gap.max_pointwise_gap =
            std::max(gap.max_pointwise_gap, distance_to_polyline(ip.points.row(k), gap.solution.path.points));
    }
    return gap;
}

} // namespace mfm
