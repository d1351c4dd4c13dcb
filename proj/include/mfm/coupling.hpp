#pragma once

// Pairings between equal-size source and target batches.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mfm/rng.hpp"
#include "mfm/types.hpp"

namespace mfm {

enum class CouplingKind { Independent, Ot };

inline std::string to_string(CouplingKind k) {
    return k == CouplingKind::Ot ? "ot" : "independent";
}

inline CouplingKind coupling_from_string(const std::string& s) {
    if (s == "ot") {
        return CouplingKind::Ot;
    }
    if (s == "independent") {
        return CouplingKind::Independent;
    }
    throw ValidationError("unknown coupling '" + s + "' (expected ot or independent)");
}

struct CouplingPlan {
    std::vector<std::size_t> source; // source[i] is paired with target[i]
    std::vector<std::size_t> target;
    double total_cost = 0.0;         // sum of squared Euclidean distances of the pairs
    std::size_t batch_size = 0;
};

/// Pairwise squared Euclidean distances, rows of `a` against rows of `b`.
inline Matrix squared_distances(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("squared_distances: dimension mismatch " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
    }
    Matrix c(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        c.row(i) = (b.rowwise() - a.row(i)).rowwise().squaredNorm().transpose();
    }
    return c;
}

inline Matrix euclidean_distances(const Matrix& a, const Matrix& b) {
    return squared_distances(a, b).cwiseSqrt();
}

struct Assignment {
    std::vector<std::size_t> column_of_row;
    double cost = 0.0; // sum over rows of cost(i, column_of_row[i]), in row order
};

/**
 * Minimum-cost perfect matching on a square cost matrix.
 *
 * Shortest augmenting paths with row/column potentials, O(n^3); one row
 * is inserted per phase. The per-column sweeps are whole-array operations
 * with strict comparisons, so among equal reduced costs the lowest column
 * index wins.
 */
inline Assignment solve_assignment(const Matrix& cost) {
    const Eigen::Index n = cost.rows();
    if (cost.cols() != n) {
        throw ShapeError("solve_assignment: cost matrix must be square, got " + shape_str(cost.rows(), cost.cols()));
    }
    if (!cost.allFinite()) {
        throw NumericError("solve_assignment: non-finite cost entry");
    }
    Assignment out;
    if (n == 0) {
        return out;
    }
    const double inf = std::numeric_limits<double>::infinity();
    const auto N = to_size(n);
    constexpr long kRoot = -1; // virtual column holding the row being inserted
    std::vector<double> u(N, 0.0);
    std::vector<double> v(N, 0.0);
    std::vector<double> minv(N);
    std::vector<double> penalty(N); // +inf on columns already in the tree
    std::vector<double> way(N);     // predecessor column; double keeps the sweep branch-free
    std::vector<long> row_of_col(N, -1);
    std::vector<std::size_t> tree;
    tree.reserve(N);
    for (std::size_t i = 0; i < N; ++i) {
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(penalty.begin(), penalty.end(), 0.0);
        std::fill(way.begin(), way.end(), static_cast<double>(kRoot));
        tree.clear();
        long j0 = kRoot;
        while (true) {
            const std::size_t i0 = j0 == kRoot ? i : to_size(row_of_col[to_size(j0)]);
            const double* crow = cost.data() + i0 * N;
            const double ui = u[i0];
            const double from = static_cast<double>(j0);
            double* mv = minv.data();
            double* wy = way.data();
            const double* vv = v.data();
            const double* pen = penalty.data();
            for (std::size_t j = 0; j < N; ++j) {
                const double r = crow[j] - ui - vv[j] + pen[j];
                const bool better = r < mv[j];
                mv[j] = better ? r : mv[j];
                wy[j] = better ? from : wy[j];
            }
            std::size_t j1 = 0;
            double delta = mv[0];
            for (std::size_t j = 1; j < N; ++j) {
                if (mv[j] < delta) {
                    delta = mv[j];
                    j1 = j;
                }
            }
            u[i] += delta;
            for (std::size_t j : tree) {
                u[to_size(row_of_col[j])] += delta;
                v[j] -= delta;
            }
            for (std::size_t j = 0; j < N; ++j) {
                mv[j] -= delta;
            }
            minv[j1] = inf;
            penalty[j1] = inf;
            tree.push_back(j1);
            j0 = static_cast<long>(j1);
            if (row_of_col[j1] < 0) {
                break;
            }
        }
        while (j0 != kRoot) {
            const auto j1 = static_cast<long>(way[to_size(j0)]);
            row_of_col[to_size(j0)] = j1 == kRoot ? static_cast<long>(i) : row_of_col[to_size(j1)];
            j0 = j1;
        }
    }
    out.column_of_row.assign(N, 0);
    for (std::size_t j = 0; j < N; ++j) {
        out.column_of_row[to_size(row_of_col[j])] = j;
    }
    for (Eigen::Index r = 0; r < n; ++r) {
        out.cost += cost(r, to_index(out.column_of_row[to_size(r)]));
    }
    return out;
}

namespace detail {

inline void check_batches(const Matrix& src, const Matrix& tgt, const char* who) {
    if (src.rows() != tgt.rows()) {
        throw ShapeError(std::string(who) + ": batch sizes differ (" + std::to_string(src.rows()) + " vs " +
                         std::to_string(tgt.rows()) + ")");
    }
    if (src.cols() != tgt.cols()) {
        throw ShapeError(std::string(who) + ": dimensions differ");
    }
}

inline double pair_cost(const Matrix& src, const Matrix& tgt, const CouplingPlan& p) {
    double c = 0.0;
    for (std::size_t i = 0; i < p.source.size(); ++i) {
        c += (src.row(to_index(p.source[i])) - tgt.row(to_index(p.target[i]))).squaredNorm();
    }
    return c;
}

} // namespace detail

/// Uniformly random bijection; consumes draws from `rng`.
inline CouplingPlan independent_pairs(const Matrix& src, const Matrix& tgt, Rng& rng) {
    detail::check_batches(src, tgt, "independent_pairs");
    CouplingPlan p;
    p.batch_size = to_size(src.rows());
    p.source.resize(p.batch_size);
    for (std::size_t i = 0; i < p.batch_size; ++i) {
        p.source[i] = i;
    }
    p.target = rng.permutation(p.batch_size);
    p.total_cost = detail::pair_cost(src, tgt, p);
    return p;
}

inline CouplingPlan independent_pairs(const Matrix& src, const Matrix& tgt, std::uint64_t seed) {
    Rng rng(seed, "coupling.independent");
    return independent_pairs(src, tgt, rng);
}

/// Exact squared-Euclidean optimal matching.
inline CouplingPlan ot_pairs(const Matrix& src, const Matrix& tgt) {
    detail::check_batches(src, tgt, "ot_pairs");
    require_finite(src, "ot_pairs source");
    require_finite(tgt, "ot_pairs target");
    const Assignment a = solve_assignment(squared_distances(src, tgt));
    CouplingPlan p;
    p.batch_size = to_size(src.rows());
    p.source.resize(p.batch_size);
    for (std::size_t i = 0; i < p.batch_size; ++i) {
        p.source[i] = i;
    }
    p.target = a.column_of_row;
    p.total_cost = a.cost;
    return p;
}

inline CouplingPlan couple(CouplingKind kind, const Matrix& src, const Matrix& tgt, Rng& rng) {
    return kind == CouplingKind::Ot ? ot_pairs(src, tgt) : independent_pairs(src, tgt, rng);
}

} // namespace mfm
