#pragma once

// Data-dependent diagonal Riemannian metrics G(x; D) on ambient space.
//
// Every metric is represented by the diagonal of G. LAND and RBF both have
// the form G = (diag(h(x)) + eps I)^-1 for a nonnegative field h that is
// large near the data, so G is cheap near the data and expensive away from it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mfm/nn/checkpoint.hpp"
#include "mfm/nn/optim.hpp"
#include "mfm/nn/tape.hpp"
#include "mfm/rng.hpp"
#include "mfm/types.hpp"

namespace mfm {

struct IdentityMetric {};

/**
 * LAND metric: h_a(x) = sum_i (x_i^a - x^a)^2 exp(-|x - x_i|^2 / (2 sigma^2)).
 *
 * Anchors are stored twice: row-major as given and transposed so that the
 * per-coordinate sweeps over anchors are contiguous.
 */
class LandMetric {
public:
    using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

    LandMetric(Matrix anchors, double sigma, double epsilon, std::size_t nearest_anchors = 0)
        : anchors_(std::move(anchors)), sigma_(sigma), epsilon_(epsilon), nearest_(nearest_anchors) {
        if (anchors_.rows() < 1 || anchors_.cols() < 1) {
            throw ValidationError("LAND metric needs at least one anchor");
        }
        if (!(sigma_ > 0.0) || !(epsilon_ > 0.0)) {
            throw ValidationError("LAND metric needs sigma > 0 and epsilon > 0");
        }
        require_finite(anchors_, "LAND anchors");
        by_dim_ = anchors_.transpose();
    }

    [[nodiscard]] const Matrix& anchors() const { return anchors_; }
    [[nodiscard]] double sigma() const { return sigma_; }
    [[nodiscard]] double epsilon() const { return epsilon_; }
    [[nodiscard]] std::size_t dim() const { return to_size(anchors_.cols()); }
    /// 0 means every anchor contributes.
    [[nodiscard]] std::size_t nearest_anchors() const { return nearest_; }

    /// h(x) for each row of X.
    [[nodiscard]] Matrix h_batch(const Matrix& X) const {
        check_dim(X);
        Matrix out(X.rows(), X.cols());
        Workspace ws(*this);
        for (Eigen::Index b = 0; b < X.rows(); ++b) {
            ws.load(*this, X.row(b));
            for (Eigen::Index a = 0; a < X.cols(); ++a) {
                out(b, a) = (ws.diff.row(a).array().square() * ws.w).sum();
            }
        }
        return out;
    }

    [[nodiscard]] Matrix diag_batch(const Matrix& X) const {
        Matrix h = h_batch(X);
        return (h.array() + epsilon_).inverse().matrix();
    }

    /// Gradient of sum(U .* diag(X)) with respect to X.
    [[nodiscard]] Matrix diag_vjp(const Matrix& X, const Matrix& U) const {
        check_dim(X);
        require_shape(U.rows() == X.rows() && U.cols() == X.cols(), "LAND vjp: upstream shape mismatch");
        Matrix grad(X.rows(), X.cols());
        Workspace ws(*this);
        const double inv_s2 = 1.0 / (sigma_ * sigma_);
        const Eigen::Index d = X.cols();
        Eigen::ArrayXd gh(d);
        RowArray c;
        for (Eigen::Index b = 0; b < X.rows(); ++b) {
            ws.load(*this, X.row(b));
            // d diag / d h = -diag^2
            for (Eigen::Index a = 0; a < d; ++a) {
                const double h = (ws.diff.row(a).array().square() * ws.w).sum();
                const double g = 1.0 / (h + epsilon_);
                gh(a) = -U(b, a) * g * g;
            }
            // c_i = sum_a gh_a diff_ia^2
            c.setZero(ws.w.size());
            for (Eigen::Index a = 0; a < d; ++a) {
                c += gh(a) * ws.diff.row(a).array().square();
            }
            const RowArray cw = c * ws.w * inv_s2;
            for (Eigen::Index a = 0; a < d; ++a) {
                const auto da = ws.diff.row(a).array();
                grad(b, a) = (-2.0 * gh(a)) * (da * ws.w).sum() + (cw * da).sum();
            }
        }
        return grad;
    }

private:
    // Per-query scratch: anchor differences (d x n) and kernel weights (n).
    struct Workspace {
        explicit Workspace(const LandMetric& m) {
            const Eigen::Index n = m.nearest_ > 0 && to_index(m.nearest_) < m.anchors_.rows()
                                       ? to_index(m.nearest_)
                                       : m.anchors_.rows();
            diff.resize(m.anchors_.cols(), n);
            w.resize(n);
            r2.resize(m.anchors_.rows());
        }

        template <class Row>
        void load(const LandMetric& m, const Row& x) {
            const Eigen::Index d = m.anchors_.cols();
            const double scale = -0.5 / (m.sigma_ * m.sigma_);
            if (diff.cols() == m.anchors_.rows()) {
                r2.setZero();
                for (Eigen::Index a = 0; a < d; ++a) {
                    diff.row(a) = m.by_dim_.row(a).array() - x(a);
                    r2 += diff.row(a).array().square();
                }
                w = (r2 * scale).exp();
                return;
            }
            // Truncated: keep the k nearest anchors (ties by index).
            r2.setZero();
            for (Eigen::Index a = 0; a < d; ++a) {
                r2 += (m.by_dim_.row(a).array() - x(a)).square();
            }
            idx.resize(to_size(m.anchors_.rows()));
            std::iota(idx.begin(), idx.end(), Eigen::Index{0});
            const auto k = diff.cols();
            std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index i, Eigen::Index j) {
                return r2(i) < r2(j) || (r2(i) == r2(j) && i < j);
            });
            std::sort(idx.begin(), idx.begin() + k);
            for (Eigen::Index j = 0; j < k; ++j) {
                const Eigen::Index i = idx[to_size(j)];
                for (Eigen::Index a = 0; a < d; ++a) {
                    diff(a, j) = m.anchors_(i, a) - x(a);
                }
                w(j) = std::exp(r2(i) * scale);
            }
        }

        Matrix diff;
        RowArray w;
        RowArray r2;
        std::vector<Eigen::Index> idx;
    };

    void check_dim(const Matrix& X) const {
        if (X.cols() != anchors_.cols()) {
            throw ShapeError("LAND metric: point dimension " + std::to_string(X.cols()) + " != anchor dimension " +
                             std::to_string(anchors_.cols()));
        }
        require_finite(X, "LAND metric input");
    }

    Matrix anchors_;
    Matrix by_dim_;
    double sigma_;
    double epsilon_;
    std::size_t nearest_;
};

/**
 * RBF metric: h_a(x) = sum_k w_ka exp(-lambda_ka / 2 |x - c_k|^2), and
 * G_aa = 1 / (h_a(x)^p + eps).
 */
class RbfMetric {
public:
    RbfMetric(Matrix centers, Matrix bandwidths, Matrix weights, double epsilon, int power = 1)
        : centers_(std::move(centers)),
          bandwidths_(std::move(bandwidths)),
          weights_(std::move(weights)),
          epsilon_(epsilon),
          power_(power) {
        validate();
    }

    [[nodiscard]] const Matrix& centers() const { return centers_; }
    [[nodiscard]] const Matrix& bandwidths() const { return bandwidths_; }
    [[nodiscard]] const Matrix& weights() const { return weights_; }
    [[nodiscard]] double epsilon() const { return epsilon_; }
    [[nodiscard]] int power() const { return power_; }
    [[nodiscard]] std::size_t dim() const { return to_size(centers_.cols()); }
    [[nodiscard]] std::size_t clusters() const { return to_size(centers_.rows()); }

    void set_weights(Matrix w) {
        weights_ = std::move(w);
        validate();
    }

    void set_epsilon(double eps) {
        epsilon_ = eps;
        validate();
    }

    /// K x d kernel values exp(-lambda_ka/2 |x - c_k|^2) for one point.
    template <class Row>
    [[nodiscard]] Matrix kernels(const Row& x) const {
        Eigen::ArrayXd r2 = (centers_.rowwise() - x).rowwise().squaredNorm().array();
        Matrix e(centers_.rows(), centers_.cols());
        for (Eigen::Index k = 0; k < centers_.rows(); ++k) {
            e.row(k) = (-0.5 * r2(k) * bandwidths_.row(k).array()).exp();
        }
        return e;
    }

    [[nodiscard]] Matrix h_batch(const Matrix& X) const {
        check_dim(X);
        Matrix out(X.rows(), X.cols());
        for (Eigen::Index b = 0; b < X.rows(); ++b) {
            const Matrix e = kernels(X.row(b));
            out.row(b) = e.cwiseProduct(weights_).colwise().sum();
        }
        return out;
    }

    [[nodiscard]] Matrix diag_batch(const Matrix& X) const {
        Matrix h = h_batch(X);
        return (h.array().pow(power_) + epsilon_).inverse().matrix();
    }

    [[nodiscard]] Matrix diag_vjp(const Matrix& X, const Matrix& U) const {
        check_dim(X);
        require_shape(U.rows() == X.rows() && U.cols() == X.cols(), "RBF vjp: upstream shape mismatch");
        Matrix grad(X.rows(), X.cols());
        for (Eigen::Index b = 0; b < X.rows(); ++b) {
            const Matrix e = kernels(X.row(b));
            const Matrix we = e.cwiseProduct(weights_);
            const Eigen::ArrayXd h = we.colwise().sum().transpose().array();
            const Eigen::ArrayXd g = (h.pow(power_) + epsilon_).inverse();
            const Eigen::ArrayXd dh = -static_cast<double>(power_) * h.pow(power_ - 1) * g.square();
            const Eigen::ArrayXd gh = U.row(b).transpose().array() * dh;
            // s_k = sum_a gh_a w_ka e_ka lambda_ka; grad = sum_k s_k (c_k - x)
            const Eigen::VectorXd s = (we.cwiseProduct(bandwidths_) * gh.matrix());
            grad.row(b) = s.transpose() * centers_ - s.sum() * X.row(b);
        }
        return grad;
    }

private:
    void validate() const {
        if (centers_.rows() < 1 || centers_.cols() < 1) {
            throw ValidationError("RBF metric needs at least one center");
        }
        if (bandwidths_.rows() != centers_.rows() || bandwidths_.cols() != centers_.cols() ||
            weights_.rows() != centers_.rows() || weights_.cols() != centers_.cols()) {
            throw ShapeError("RBF metric: bandwidths and weights must be K x d");
        }
        if ((bandwidths_.array() < 0.0).any() || !bandwidths_.allFinite()) {
            throw ValidationError("RBF metric: bandwidths must be finite and >= 0");
        }
        if (!(weights_.array() > 0.0).all() || !weights_.allFinite()) {
            throw ValidationError("RBF metric: weights must be finite and > 0");
        }
        if (!(epsilon_ > 0.0) || power_ < 1) {
            throw ValidationError("RBF metric: need epsilon > 0 and power >= 1");
        }
        require_finite(centers_, "RBF centers");
    }

    void check_dim(const Matrix& X) const {
        if (X.cols() != centers_.cols()) {
            throw ShapeError("RBF metric: point dimension " + std::to_string(X.cols()) + " != center dimension " +
                             std::to_string(centers_.cols()));
        }
        require_finite(X, "RBF metric input");
    }

    Matrix centers_;
    Matrix bandwidths_;
    Matrix weights_;
    double epsilon_;
    int power_;
};

/// A diagonal metric field: identity, LAND, or RBF.
class MetricField {
public:
    using Variant = std::variant<IdentityMetric, LandMetric, RbfMetric>;

    MetricField() : v_(IdentityMetric{}) {}
    MetricField(IdentityMetric m) : v_(m) {}
    MetricField(LandMetric m) : v_(std::move(m)) {}
    MetricField(RbfMetric m) : v_(std::move(m)) {}

    static MetricField identity() { return MetricField(IdentityMetric{}); }

    [[nodiscard]] const Variant& variant() const { return v_; }
    [[nodiscard]] bool is_identity() const { return std::holds_alternative<IdentityMetric>(v_); }
    [[nodiscard]] const LandMetric* land() const { return std::get_if<LandMetric>(&v_); }
    [[nodiscard]] const RbfMetric* rbf() const { return std::get_if<RbfMetric>(&v_); }

    [[nodiscard]] std::string name() const {
        if (land() != nullptr) {
            return "land";
        }
        if (rbf() != nullptr) {
            return "rbf";
        }
        return "identity";
    }

    [[nodiscard]] Matrix diag_batch(const Matrix& X) const {
        return std::visit(
            [&](const auto& m) -> Matrix {
                using T = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<T, IdentityMetric>) {
                    require_finite(X, "identity metric input");
                    return Matrix::Ones(X.rows(), X.cols());
                } else {
                    return m.diag_batch(X);
                }
            },
            v_);
    }

    [[nodiscard]] Matrix diag_vjp(const Matrix& X, const Matrix& U) const {
        return std::visit(
            [&](const auto& m) -> Matrix {
                using T = std::decay_t<decltype(m)>;
                if constexpr (std::is_same_v<T, IdentityMetric>) {
                    return Matrix::Zero(X.rows(), X.cols());
                } else {
                    return m.diag_vjp(X, U);
                }
            },
            v_);
    }

    [[nodiscard]] Vector diag(const Vector& x) const {
        Matrix row = x.transpose();
        return diag_batch(row).row(0).transpose();
    }

private:
    Variant v_;
};

/// Diagonal of the LAND metric at a single point.
inline Vector land_diag(const LandMetric& metric, const Vector& x) {
    Matrix row = x.transpose();
    return metric.diag_batch(row).row(0).transpose();
}

inline Vector metric_diag(const MetricField& metric, const Vector& x) {
    return metric.diag(x);
}

/// Metric diagonal as a tape node; gradients flow into the positions.
inline nn::Var metric_diag(const MetricField& metric, nn::Var x) {
    nn::Tape& tape = *x.tape();
    Matrix value = metric.diag_batch(x.value());
    if (metric.is_identity()) {
        return tape.constant(std::move(value));
    }
    const std::size_t ix = x.index();
    return nn::custom(tape, {ix}, std::move(value), [ix, &metric](nn::Tape& t, std::size_t self) {
        t.accumulate(ix, metric.diag_vjp(t.value(ix), t.upstream(self)));
    });
}

// ---------------------------------------------------------------------------
// k-means and the RBF construction
// ---------------------------------------------------------------------------

struct KMeansResult {
    Matrix centers;
    std::vector<std::size_t> assignments;
    std::vector<std::size_t> cluster_sizes;
    std::vector<double> inertia_trace; // one entry per assignment step
    std::size_t iterations = 0;
    bool converged = false;

    [[nodiscard]] double inertia() const { return inertia_trace.empty() ? 0.0 : inertia_trace.back(); }
};

namespace detail {

inline double sq_dist(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
    return (a.row(i) - b.row(j)).squaredNorm();
}

} // namespace detail

/**
 * Lloyd's algorithm with k-means++ seeding.
 *
 * Runs until the assignment is a fixpoint or `max_iter` assignment steps.
 * A cluster that empties is re-seeded with the point farthest from its
 * current center, so every returned cluster is non-empty.
 */
inline KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 300) {
    const Eigen::Index n = points.rows();
    if (n == 0) {
        throw ValidationError("kmeans: empty input");
    }
    if (k == 0 || to_index(k) > n) {
        throw ValidationError("kmeans: need 1 <= K <= N (K=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
    }
    require_finite(points, "kmeans input");
    Rng rng(seed, "kmeans");
    const Eigen::Index kk = to_index(k);

    // k-means++ seeding
    Matrix centers(kk, points.cols());
    std::vector<bool> chosen(to_size(n), false);
    auto first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    centers.row(0) = points.row(first);
    chosen[to_size(first)] = true;
    Eigen::ArrayXd best(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        best(i) = detail::sq_dist(points, i, centers, 0);
    }
    for (Eigen::Index c = 1; c < kk; ++c) {
        const double total = best.sum();
        Eigen::Index pick = -1;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += best(i);
                if (best(i) > 0.0 && acc > target) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) {
                for (Eigen::Index i = n; i-- > 0;) {
                    if (best(i) > 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
        }
        if (pick < 0) {
            // All remaining points coincide with chosen centers.
            for (Eigen::Index i = 0; i < n; ++i) {
                if (!chosen[to_size(i)]) {
                    pick = i;
                    break;
                }
            }
        }
        centers.row(c) = points.row(pick);
        chosen[to_size(pick)] = true;
        for (Eigen::Index i = 0; i < n; ++i) {
            best(i) = std::min(best(i), detail::sq_dist(points, i, centers, c));
        }
    }

    KMeansResult res;
    std::vector<std::size_t> assign(to_size(n), 0);
    std::vector<std::size_t> next(to_size(n), 0);
    std::vector<double> dist(to_size(n), 0.0);
    for (std::size_t it = 0; it < max_iter; ++it) {
        double inertia = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            std::size_t arg = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < kk; ++c) {
                const double dd = detail::sq_dist(points, i, centers, c);
                if (dd < bd) {
                    bd = dd;
                    arg = to_size(c);
                }
            }
            next[to_size(i)] = arg;
            dist[to_size(i)] = bd;
            inertia += bd;
        }
        res.inertia_trace.push_back(inertia);
        res.iterations = it + 1;
        if (it > 0 && next == assign) {
            res.converged = true;
            break;
        }
        assign = next;

        // update step
        Matrix sums = Matrix::Zero(kk, points.cols());
        std::vector<std::size_t> counts(k, 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(to_index(assign[to_size(i)])) += points.row(i);
            ++counts[assign[to_size(i)]];
        }
        for (Eigen::Index c = 0; c < kk; ++c) {
            if (counts[to_size(c)] > 0) {
                centers.row(c) = sums.row(c) / static_cast<double>(counts[to_size(c)]);
            }
        }
        // repair empty clusters
        for (Eigen::Index c = 0; c < kk; ++c) {
            if (counts[to_size(c)] > 0) {
                continue;
            }
            Eigen::Index far = -1;
            double fd = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const std::size_t owner = assign[to_size(i)];
                if (counts[owner] < 2) {
                    continue;
                }
                const double dd = detail::sq_dist(points, i, centers, to_index(owner));
                if (dd > fd) {
                    fd = dd;
                    far = i;
                }
            }
            if (far < 0) {
                throw NumericError("kmeans: cannot repair empty cluster");
            }
            --counts[assign[to_size(far)]];
            assign[to_size(far)] = to_size(c);
            counts[to_size(c)] = 1;
            centers.row(c) = points.row(far);
        }
    }
    res.centers = centers;
    res.assignments = assign;
    res.cluster_sizes.assign(k, 0);
    for (auto a : assign) {
        ++res.cluster_sizes[a];
    }
    return res;
}

inline constexpr double kMaxBandwidth = 1e6;

/// lambda_k = 1/2 (kappa / |C_k| sum_{x in C_k} |x - c_k|^2)^-2, clamped to `lambda_max`.
inline Vector rbf_bandwidths(const Matrix& points, const std::vector<std::size_t>& assignments, const Matrix& centers,
                             double kappa, double lambda_max = kMaxBandwidth) {
    if (!(kappa > 0.0)) {
        throw ValidationError("rbf_bandwidths: kappa must be > 0");
    }
    require_shape(to_index(assignments.size()) == points.rows(), "rbf_bandwidths: one assignment per point");
    require_shape(centers.cols() == points.cols(), "rbf_bandwidths: center dimension mismatch");
    const Eigen::Index k = centers.rows();
    Vector spread = Vector::Zero(k);
    std::vector<std::size_t> counts(to_size(k), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        const auto c = assignments[to_size(i)];
        if (to_index(c) >= k) {
            throw ShapeError("rbf_bandwidths: assignment out of range");
        }
        spread(to_index(c)) += (points.row(i) - centers.row(to_index(c))).squaredNorm();
        ++counts[c];
    }
    Vector lambda(k);
    for (Eigen::Index c = 0; c < k; ++c) {
        if (counts[to_size(c)] == 0) {
            throw ContractError("rbf_bandwidths: cluster " + std::to_string(c) + " is empty");
        }
        const double mean_sq = spread(c) / static_cast<double>(counts[to_size(c)]);
        const double base = kappa * mean_sq;
        double l = base > 0.0 ? 0.5 / (base * base) : lambda_max;
        if (!std::isfinite(l) || l > lambda_max) {
            l = lambda_max;
        }
        lambda(c) = l;
    }
    return lambda;
}

struct RbfTrainConfig {
    std::size_t epochs = 2000;
    double learning_rate = 0.05;
    /// Learning rate decays geometrically to learning_rate * final_lr_fraction.
    double final_lr_fraction = 1e-2;
};

struct RbfTrainReport {
    std::vector<double> loss_trace; // L_RBF / (N d) per epoch
    double final_loss = 0.0;        // L_RBF = sum_i sum_a (1 - h_a(x_i))^2
    double mean_h = 0.0;
    double mean_abs_residual = 0.0;
};

inline double inverse_softplus(double y) {
    return y > 30.0 ? y : std::log(std::expm1(y));
}

/**
 * Fits the RBF weights by minimising sum_i sum_a (1 - h_a(x_i))^2 with
 * omega = softplus(rho), starting from omega = 1. Centers and bandwidths
 * stay fixed, so the kernel matrix is precomputed once per distinct
 * bandwidth column.
 */
inline RbfTrainReport train_rbf_weights(RbfMetric& metric, const Matrix& data, const RbfTrainConfig& config,
                                        std::uint64_t seed) {
    (void)seed; // full-batch and deterministic; kept for interface symmetry
    if (data.cols() != metric.centers().cols()) {
        throw ShapeError("train_rbf_weights: data dimension mismatch");
    }
    if (data.rows() == 0) {
        throw ValidationError("train_rbf_weights: no data");
    }
    require_finite(data, "train_rbf_weights data");
    const Eigen::Index n = data.rows();
    const Eigen::Index k = metric.centers().rows();
    const Eigen::Index d = data.cols();

    Matrix r2(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        r2.row(i) = (metric.centers().rowwise() - data.row(i)).rowwise().squaredNorm().transpose();
    }
    const Matrix& lam = metric.bandwidths();
    bool shared = true;
    for (Eigen::Index a = 1; a < d && shared; ++a) {
        shared = lam.col(a) == lam.col(0);
    }
    auto kernel_for = [&](Eigen::Index a) {
        Matrix phi(n, k);
        for (Eigen::Index c = 0; c < k; ++c) {
            phi.col(c) = (-0.5 * lam(c, a) * r2.col(c).array()).exp().matrix();
        }
        return phi;
    };
    const Matrix shared_phi = shared ? kernel_for(0) : Matrix();

    Matrix rho = Matrix::Constant(k, d, inverse_softplus(1.0));
    nn::Optimizer opt(nn::OptimizerConfig::adam(config.learning_rate));
    RbfTrainReport rep;
    const double decay =
        config.epochs > 1 ? std::pow(config.final_lr_fraction, 1.0 / static_cast<double>(config.epochs - 1)) : 1.0;
    double lr = config.learning_rate;
    const double norm = static_cast<double>(n * d);

    auto evaluate = [&](const Matrix& omega, Matrix* grad_omega) {
        double loss = 0.0;
        for (Eigen::Index a = 0; a < d; ++a) {
            const Matrix phi_local = shared ? Matrix() : kernel_for(a);
            const Matrix& phi = shared ? shared_phi : phi_local;
            const Vector h = phi * omega.col(a);
            const Vector resid = Vector::Ones(n) - h;
            loss += resid.squaredNorm();
            if (grad_omega != nullptr) {
                grad_omega->col(a) = -2.0 * (phi.transpose() * resid) / norm;
            }
        }
        return loss;
    };

    for (std::size_t e = 0; e < config.epochs; ++e) {
        Matrix omega = rho.unaryExpr([](double z) { return nn::softplus_scalar(z); });
        Matrix g_omega(k, d);
        const double loss = evaluate(omega, &g_omega);
        if (!std::isfinite(loss)) {
            throw NumericError("train_rbf_weights: loss diverged at epoch " + std::to_string(e));
        }
        rep.loss_trace.push_back(loss / norm);
        Matrix g_rho = g_omega.cwiseProduct(rho.unaryExpr([](double z) { return nn::sigmoid_scalar(z); }));
        std::vector<Matrix*> p{&rho};
        std::vector<const Matrix*> g{&g_rho};
        opt.set_learning_rate(lr);
        opt.step(p, g);
        lr *= decay;
    }
    Matrix omega = rho.unaryExpr([](double z) { return std::max(nn::softplus_scalar(z), 1e-300); });
    metric.set_weights(omega);
    rep.final_loss = evaluate(omega, nullptr);
    if (!std::isfinite(rep.final_loss)) {
        throw NumericError("train_rbf_weights: final loss is not finite");
    }
    const Matrix h = metric.h_batch(data);
    rep.mean_h = h.mean();
    rep.mean_abs_residual = (1.0 - h.array()).abs().mean();
    return rep;
}

/// epsilon = max(1e-4, 1 - L_RBF / (N d)): the complement of the final pretraining loss.
inline double complement_epsilon(double final_loss, std::size_t n_points, std::size_t dim) {
    const double mean_loss = final_loss / static_cast<double>(n_points * dim);
    return std::max(1e-4, 1.0 - mean_loss);
}

/// k-means centers + bandwidths, weights initialised to 1 (train them next).
inline RbfMetric build_rbf_metric(const Matrix& data, std::size_t clusters, double kappa, double epsilon, int power,
                                  std::uint64_t seed) {
    const KMeansResult km = kmeans(data, clusters, seed);
    const Vector lambda = rbf_bandwidths(data, km.assignments, km.centers, kappa);
    Matrix bw = lambda.replicate(1, data.cols());
    return RbfMetric(km.centers, bw, Matrix::Ones(km.centers.rows(), data.cols()), epsilon, power);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline nn::Archive to_archive(const MetricField& m) {
    nn::Archive a;
    a.kind = "metric";
    a.set_meta("variant", m.name());
    if (const auto* land = m.land()) {
        a.set_meta("sigma", land->sigma());
        a.set_meta("epsilon", land->epsilon());
        a.set_meta("nearest_anchors", std::to_string(land->nearest_anchors()));
        a.add_tensor("anchors", land->anchors());
    } else if (const auto* rbf = m.rbf()) {
        a.set_meta("epsilon", rbf->epsilon());
        a.set_meta("power", std::to_string(rbf->power()));
        a.add_tensor("centers", rbf->centers());
        a.add_tensor("bandwidths", rbf->bandwidths());
        a.add_tensor("weights", rbf->weights());
    }
    return a;
}

inline MetricField metric_from_archive(const nn::Archive& a) {
    if (a.kind != "metric") {
        throw IoError("expected a metric archive, got '" + a.kind + "'");
    }
    const std::string& v = a.meta_value("variant");
    if (v == "identity") {
        return MetricField::identity();
    }
    if (v == "land") {
        return MetricField(LandMetric(a.tensor("anchors"), a.meta_double("sigma"), a.meta_double("epsilon"),
                                      std::stoul(a.meta_value("nearest_anchors"))));
    }
    if (v == "rbf") {
        return MetricField(RbfMetric(a.tensor("centers"), a.tensor("bandwidths"), a.tensor("weights"),
                                     a.meta_double("epsilon"), std::stoi(a.meta_value("power"))));
    }
    throw IoError("unknown metric variant '" + v + "'");
}

} // namespace mfm
