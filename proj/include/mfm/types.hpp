#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>

#include "mfm/error.hpp"

namespace mfm {

/// Row-major dense matrix; rows are samples, columns are coordinates.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline bool all_finite(const Eigen::Ref<const Matrix>& m) {
    return m.allFinite();
}

inline void require_finite(const Eigen::Ref<const Matrix>& m, const std::string& what) {
    if (!m.allFinite()) {
        throw NumericError(what + ": non-finite value");
    }
}

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) {
        throw ShapeError(what);
    }
}

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

inline std::size_t to_size(Eigen::Index i) {
    return static_cast<std::size_t>(i);
}

inline Eigen::Index to_index(std::size_t i) {
    return static_cast<Eigen::Index>(i);
}

} // namespace mfm
