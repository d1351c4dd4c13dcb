#pragma once

// Fixed-step Euler rollouts and distribution distances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mfm/coupling.hpp"
#include "mfm/rng.hpp"
#include "mfm/types.hpp"

namespace mfm {

struct Trajectory {
    std::vector<double> times;
    std::vector<Matrix> states; // states[k] is the batch at times[k]

    [[nodiscard]] const Matrix& final_state() const { return states.back(); }

    /// State whose time is closest to `t` (first on ties).
    [[nodiscard]] const Matrix& at(double t) const {
        std::size_t best = 0;
        for (std::size_t k = 1; k < times.size(); ++k) {
            if (std::abs(times[k] - t) < std::abs(times[best] - t)) {
                best = k;
            }
        }
        return states[best];
    }
};

/**
 * x_{k+1} = x_k + dt * v(t_k, x_k) with dt = (t_end - t_start) / steps.
 * `field(t, X)` returns the velocity for every row of X.
 */
template <class Field>
Trajectory euler_rollout(const Field& field, const Matrix& x0, double t_start, double t_end, std::size_t steps) {
    if (steps < 1) {
        throw ValidationError("euler_rollout: steps must be >= 1");
    }
    if (!(t_end > t_start)) {
        throw ValidationError("euler_rollout: t_end must exceed t_start");
    }
    require_finite(x0, "euler_rollout initial state");
    const double dt = (t_end - t_start) / static_cast<double>(steps);
    Trajectory traj;
    traj.times.reserve(steps + 1);
    traj.states.reserve(steps + 1);
    traj.times.push_back(t_start);
    traj.states.push_back(x0);
    for (std::size_t k = 0; k < steps; ++k) {
        const double tk = t_start + static_cast<double>(k) * dt;
        const Matrix v = field(tk, traj.states.back());
        if (v.rows() != x0.rows() || v.cols() != x0.cols()) {
            throw ShapeError("euler_rollout: field returned " + shape_str(v.rows(), v.cols()));
        }
        Matrix next = traj.states.back() + dt * v;
        if (!next.allFinite()) {
            throw NumericError("euler_rollout: non-finite state at step " + std::to_string(k + 1));
        }
        traj.times.push_back(k + 1 == steps ? t_end : t_start + static_cast<double>(k + 1) * dt);
        traj.states.push_back(std::move(next));
    }
    return traj;
}

struct EmdInfo {
    std::size_t size_used = 0;
    bool subsampled = false;
};

inline constexpr std::size_t kMaxEmdPoints = 2000;

namespace detail {

inline Matrix subsample(const Matrix& m, std::size_t k, Rng& rng) {
    if (to_size(m.rows()) <= k) {
        return m;
    }
    std::vector<std::size_t> idx = rng.permutation(to_size(m.rows()));
    idx.resize(k);
    Matrix out(to_index(k), m.cols());
    for (std::size_t i = 0; i < k; ++i) {
        out.row(to_index(i)) = m.row(to_index(idx[i]));
    }
    return out;
}

} // namespace detail

/**
 * Exact Wasserstein-1 between equal-weight empirical measures: the mean
 * Euclidean (not squared) cost of the optimal perfect matching. The larger
 * set is subsampled (seeded) to the smaller size, and both to `max_points`.
 */
inline double emd(const Matrix& a, const Matrix& b, std::uint64_t seed = 0, std::size_t max_points = kMaxEmdPoints,
                  EmdInfo* info = nullptr) {
    if (a.rows() == 0 || b.rows() == 0) {
        throw ValidationError("emd: empty point set");
    }
    if (a.cols() != b.cols()) {
        throw ShapeError("emd: dimension mismatch " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
    }
    require_finite(a, "emd first set");
    require_finite(b, "emd second set");
    const std::size_t k = std::min({to_size(a.rows()), to_size(b.rows()), max_points});
    Rng rng(seed, "emd");
    Rng ra = rng.split("a");
    Rng rb = rng.split("b");
    const Matrix sa = detail::subsample(a, k, ra);
    const Matrix sb = detail::subsample(b, k, rb);
    if (info != nullptr) {
        info->size_used = k;
        info->subsampled = to_size(a.rows()) != k || to_size(b.rows()) != k;
    }
    const Assignment asg = solve_assignment(euclidean_distances(sa, sb));
    return asg.cost / static_cast<double>(k);
}

/// Mean | |x| - radius | over rows; requires 3D points.
inline double sphere_distance(const Matrix& points, double radius = 1.0) {
    if (points.cols() != 3) {
        throw ShapeError("sphere_distance: points must be 3-dimensional");
    }
    if (points.rows() == 0) {
        throw ValidationError("sphere_distance: empty point set");
    }
    return (points.rowwise().norm().array() - radius).abs().mean();
}

} // namespace mfm
