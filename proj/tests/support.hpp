#pragma once

// Shared helpers for the unit tests: independent oracles and random inputs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mfm/mfm.hpp"

namespace mfm::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(lo, hi);
    }
    return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(i) = rng.uniform(lo, hi);
    }
    return v;
}

/// Minimum over all n! permutations of sum_r cost(r, perm[r]), summed in row order.
inline double brute_force_assignment(const Matrix& cost) {
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(cost.rows()));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (Eigen::Index r = 0; r < cost.rows(); ++r) {
            c += cost(r, perm[static_cast<std::size_t>(r)]);
        }
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Flattens every tensor of an MLP into one vector (weights then bias, layer by layer).
inline Vector flatten(const nn::MlpParams& p) {
    Vector out(to_index(p.parameter_count()));
    Eigen::Index k = 0;
    for (const Matrix* t : p.tensors()) {
        for (Eigen::Index i = 0; i < t->size(); ++i) {
            out(k++) = t->data()[i];
        }
    }
    return out;
}

/// Central differences of `f` with respect to every parameter of `p`.
inline Vector finite_difference_gradient(const nn::MlpParams& p, const std::function<double(const nn::MlpParams&)>& f,
                                         double h) {
    nn::MlpParams q = p;
    Vector g(to_index(p.parameter_count()));
    Eigen::Index k = 0;
    for (Matrix* t : q.tensors()) {
        for (Eigen::Index i = 0; i < t->size(); ++i) {
            const double orig = t->data()[i];
            t->data()[i] = orig + h;
            const double up = f(q);
            t->data()[i] = orig - h;
            const double down = f(q);
            t->data()[i] = orig;
            g(k++) = (up - down) / (2.0 * h);
        }
    }
    return g;
}

inline double relative_error(const Vector& a, const Vector& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / scale;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("mfm_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace mfm::testing
