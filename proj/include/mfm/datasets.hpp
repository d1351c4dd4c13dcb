#pragma once

// Synthetic generators, CSV marginals, whitening and train/validation splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mfm/nn/checkpoint.hpp"
#include "mfm/rng.hpp"
#include "mfm/training.hpp"
#include "mfm/types.hpp"

namespace mfm {

/// Source, target, and the ground-truth marginal halfway between them.
struct SyntheticData {
    Matrix source;
    Matrix target;
    Matrix truth;
};

struct ArcConfig {
    /// Standard deviation of the half-Gaussians, in units of the [0, 1] arc parameter.
    double spread = 1.0 / (2.0 * std::numbers::pi);
    /// Standard deviation of the radial noise (arch only).
    double radial_noise = 0.1;
};

namespace detail {

/// |N(0, s)| clamped to [0, 1].
inline double half_gaussian(Rng& rng, double s) {
    return std::min(std::abs(rng.normal(0.0, s)), 1.0);
}

/// Positions in [0, 1]: source near 0, target near 1, and the midpoints of the
/// monotone (optimal on the line) pairing of the two samples.
struct ArcPositions {
    std::vector<double> u0;
    std::vector<double> u1;
    std::vector<double> mid;
};

inline ArcPositions arc_positions(std::size_t n, const ArcConfig& cfg, const Rng& rng) {
    if (n < 1) {
        throw ValidationError("generator: n must be >= 1");
    }
    if (!(cfg.spread > 0.0) || cfg.radial_noise < 0.0) {
        throw ValidationError("generator: need spread > 0 and radial noise >= 0");
    }
    Rng rs = rng.split("source");
    Rng rt = rng.split("target");
    ArcPositions p;
    p.u0.resize(n);
    p.u1.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        p.u0[i] = half_gaussian(rs, cfg.spread);
    }
    for (std::size_t i = 0; i < n; ++i) {
        p.u1[i] = 1.0 - half_gaussian(rt, cfg.spread);
    }
    std::vector<double> a = p.u0;
    std::vector<double> b = p.u1;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    p.mid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        p.mid[i] = 0.5 * (a[i] + b[i]);
    }
    return p;
}

} // namespace detail

/**
 * Points on the upper half circle. Arc positions u in [0, 1] map to angle
 * pi * u and radius 1 + N(0, radial_noise). The source is a half-Gaussian at
 * u = 0, the target its mirror at u = 1, and the truth embeds the midpoints
 * of the sorted pairing with fresh radial noise.
 */
inline SyntheticData generate_arch(std::size_t n, std::uint64_t seed, const ArcConfig& cfg = {}) {
    const Rng rng(seed, "arch");
    const auto pos = detail::arc_positions(n, cfg, rng);
    auto embed = [&](const std::vector<double>& u, const char* name) {
        Rng noise = rng.split(name);
        Matrix out(to_index(n), 2);
        for (std::size_t i = 0; i < n; ++i) {
            const double angle = std::numbers::pi * u[i];
            const double r = 1.0 + noise.normal(0.0, cfg.radial_noise);
            out(to_index(i), 0) = r * std::cos(angle);
            out(to_index(i), 1) = r * std::sin(angle);
        }
        return out;
    };
    return {embed(pos.u0, "source.radius"), embed(pos.u1, "target.radius"), embed(pos.mid, "truth.radius")};
}

/**
 * Points on the unit sphere. Polar angle pi * u with u drawn as in the arch,
 * longitude uniform on [0, 2 pi); no radial noise.
 */
inline SyntheticData generate_sphere(std::size_t n, std::uint64_t seed, const ArcConfig& cfg = {}) {
    const Rng rng(seed, "sphere");
    const auto pos = detail::arc_positions(n, cfg, rng);
    auto embed = [&](const std::vector<double>& u, const char* name) {
        Rng lon = rng.split(name);
        Matrix out(to_index(n), 3);
        for (std::size_t i = 0; i < n; ++i) {
            const double theta = std::numbers::pi * u[i];
            const double phi = lon.uniform(0.0, 2.0 * std::numbers::pi);
            out(to_index(i), 0) = std::sin(theta) * std::cos(phi);
            out(to_index(i), 1) = std::sin(theta) * std::sin(phi);
            out(to_index(i), 2) = std::cos(theta);
        }
        return out;
    };
    return {embed(pos.u0, "source.longitude"), embed(pos.u1, "target.longitude"),
            embed(pos.mid, "truth.longitude")};
}

/**
 * Isotropic Gaussian blobs whose means move along a straight line:
 * marginal k sits at time k with mean (k * step, 0, ..., 0).
 */
inline std::vector<Marginal> generate_gaussian_line(std::size_t n_per, std::size_t marginals, std::size_t dim,
                                                    std::uint64_t seed, double step = 2.0, double sd = 0.5) {
    if (n_per < 1 || marginals < 2 || dim < 1 || !(sd > 0.0)) {
        throw ValidationError("generate_gaussian_line: need n >= 1, >= 2 marginals, dim >= 1, sd > 0");
    }
    const Rng rng(seed, "gaussian_line");
    std::vector<Marginal> out;
    for (std::size_t k = 0; k < marginals; ++k) {
        Rng r = rng.split("marginal." + std::to_string(k));
        Marginal m;
        m.time = static_cast<double>(k);
        m.points.resize(to_index(n_per), to_index(dim));
        for (Eigen::Index i = 0; i < m.points.rows(); ++i) {
            for (Eigen::Index a = 0; a < m.points.cols(); ++a) {
                m.points(i, a) = r.normal(0.0, sd) + (a == 0 ? step * static_cast<double>(k) : 0.0);
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvSchema {
    std::string time_column = "t";
    /// Empty: every column named x<digits>, ordered by index.
    std::vector<std::string> feature_columns;
};

struct CsvReport {
    std::size_t rows_read = 0;
    std::size_t rows_dropped = 0; // rows with a NaN feature or time
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) {
            cell.pop_back();
        }
        std::size_t start = cell.find_first_not_of(' ');
        out.push_back(start == std::string::npos ? std::string() : cell.substr(start));
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

inline bool is_feature_name(const std::string& s) {
    return s.size() >= 2 && s[0] == 'x' &&
           std::all_of(s.begin() + 1, s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

} // namespace detail

/// One marginal per distinct time value, sorted by time. Without a time
/// column every row belongs to a single marginal at time 0.
inline std::vector<Marginal> load_marginals_csv(const std::filesystem::path& path, const CsvSchema& schema = {},
                                                CsvReport* report = nullptr) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw IoError(path.string() + ": empty file");
    }
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) {
        line.erase(0, 3); // UTF-8 byte order mark
    }
    const auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        col[header[i]] = i;
    }
    std::vector<std::size_t> feat;
    if (schema.feature_columns.empty()) {
        std::vector<std::pair<unsigned long, std::size_t>> named;
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (detail::is_feature_name(header[i])) {
                named.emplace_back(std::stoul(header[i].substr(1)), i);
            }
        }
        std::sort(named.begin(), named.end());
        for (std::size_t k = 0; k < named.size(); ++k) {
            if (named[k].first != k) {
                throw IoError(path.string() + ": feature columns must be x0..x{d-1} without gaps");
            }
            feat.push_back(named[k].second);
        }
    } else {
        for (const auto& name : schema.feature_columns) {
            auto it = col.find(name);
            if (it == col.end()) {
                throw IoError(path.string() + ": missing feature column '" + name + "'");
            }
            feat.push_back(it->second);
        }
    }
    if (feat.empty()) {
        throw IoError(path.string() + ": no feature columns (expected x0, x1, ...)");
    }
    const auto tcol = col.find(schema.time_column);
    const bool has_time = tcol != col.end();

    std::map<double, std::vector<std::vector<double>>> groups;
    CsvReport rep;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                          std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
        }
        ++rep.rows_read;
        auto num = [&](std::size_t c) {
            try {
                return nn::parse_double(cells[c]);
            } catch (const IoError&) {
                throw IoError(path.string() + ":" + std::to_string(lineno) + ": cannot parse '" + cells[c] +
                              "' in column '" + header[c] + "'");
            }
        };
        std::vector<double> row;
        bool bad = false;
        for (auto c : feat) {
            const double v = num(c);
            bad = bad || std::isnan(v);
            row.push_back(v);
        }
        const double t = has_time ? num(tcol->second) : 0.0;
        if (bad || std::isnan(t)) {
            ++rep.rows_dropped;
            continue;
        }
        for (double v : row) {
            if (!std::isfinite(v)) {
                throw IoError(path.string() + ":" + std::to_string(lineno) + ": infinite value");
            }
        }
        groups[t].push_back(std::move(row));
    }
    if (report != nullptr) {
        *report = rep;
    }
    if (groups.empty()) {
        throw IoError(path.string() + ": no usable rows");
    }
    std::vector<Marginal> out;
    for (auto& [t, rows] : groups) {
        Marginal m;
        m.time = t;
        m.points.resize(to_index(rows.size()), to_index(feat.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t a = 0; a < feat.size(); ++a) {
                m.points(to_index(i), to_index(a)) = rows[i][a];
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// Writes `t,x0,...` rows; values round-trip exactly.
inline void save_marginals_csv(const std::filesystem::path& path, const std::vector<Marginal>& marginals) {
    if (marginals.empty()) {
        throw ValidationError("save_marginals_csv: nothing to write");
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    const Eigen::Index d = marginals[0].points.cols();
    out << 't';
    for (Eigen::Index a = 0; a < d; ++a) {
        out << ",x" << a;
    }
    out << '\n';
    for (const auto& m : marginals) {
        if (m.points.cols() != d) {
            throw ShapeError("save_marginals_csv: marginals differ in dimension");
        }
        for (Eigen::Index i = 0; i < m.points.rows(); ++i) {
            out << nn::format_double(m.time);
            for (Eigen::Index a = 0; a < d; ++a) {
                out << ',' << nn::format_double(m.points(i, a));
            }
            out << '\n';
        }
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

/// Writes `x0,...` rows (no time column).
inline void save_points_csv(const std::filesystem::path& path, const Matrix& points) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    for (Eigen::Index a = 0; a < points.cols(); ++a) {
        out << (a > 0 ? ",x" : "x") << a;
    }
    out << '\n';
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        for (Eigen::Index a = 0; a < points.cols(); ++a) {
            out << (a > 0 ? "," : "") << nn::format_double(points(i, a));
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

inline Matrix load_points_csv(const std::filesystem::path& path) {
    auto ms = load_marginals_csv(path, CsvSchema{"t", {}});
    if (ms.size() != 1) {
        throw IoError(path.string() + ": expected a single point set, found " + std::to_string(ms.size()) +
                      " time values");
    }
    return std::move(ms[0].points);
}

// ---------------------------------------------------------------------------
// whitening
// ---------------------------------------------------------------------------

inline constexpr double kMinStd = 1e-8;

struct WhitenTransform {
    RowVector mean;
    RowVector stddev;
    bool clamped = false; // some dimension had std below kMinStd

    [[nodiscard]] Matrix apply(const Matrix& x) const {
        check(x);
        return ((x.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
    }

    [[nodiscard]] Matrix invert(const Matrix& z) const {
        check(z);
        return ((z.array().rowwise() * stddev.array()).matrix().rowwise() + mean);
    }

    [[nodiscard]] std::vector<Marginal> apply(const std::vector<Marginal>& ms) const {
        std::vector<Marginal> out = ms;
        for (auto& m : out) {
            m.points = apply(m.points);
        }
        return out;
    }

private:
    void check(const Matrix& x) const {
        if (x.cols() != mean.size()) {
            throw ShapeError("whitening: dimension " + std::to_string(x.cols()) + " != fitted " +
                             std::to_string(mean.size()));
        }
    }
};

/// Per-dimension mean and population standard deviation.
inline WhitenTransform fit_whiten(const Matrix& x) {
    if (x.rows() == 0) {
        throw ValidationError("fit_whiten: empty data");
    }
    require_finite(x, "fit_whiten input");
    WhitenTransform w;
    w.mean = x.colwise().mean();
    const Matrix centered = x.rowwise() - w.mean;
    w.stddev = (centered.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt().matrix();
    for (Eigen::Index a = 0; a < w.stddev.size(); ++a) {
        if (w.stddev(a) < kMinStd) {
            w.stddev(a) = kMinStd;
            w.clamped = true;
        }
    }
    return w;
}

inline WhitenTransform fit_whiten(const std::vector<Marginal>& ms) {
    Eigen::Index n = 0;
    for (const auto& m : ms) {
        n += m.points.rows();
    }
    if (ms.empty() || n == 0) {
        throw ValidationError("fit_whiten: empty data");
    }
    Matrix all(n, ms[0].points.cols());
    Eigen::Index r = 0;
    for (const auto& m : ms) {
        all.middleRows(r, m.points.rows()) = m.points;
        r += m.points.rows();
    }
    return fit_whiten(all);
}

inline Matrix apply_whiten(const WhitenTransform& w, const Matrix& x) {
    return w.apply(x);
}

inline Matrix invert_whiten(const WhitenTransform& w, const Matrix& z) {
    return w.invert(z);
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

struct Split {
    Matrix train;
    Matrix validation;
};

/// Seeded shuffle split with round(fraction * n) training points, at least one in each part.
inline Split split(const Matrix& points, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ValidationError("split: fraction must lie in (0, 1)");
    }
    const std::size_t n = to_size(points.rows());
    if (n < 2) {
        throw ValidationError("split: a marginal needs at least 2 points, got " + std::to_string(n));
    }
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    k = std::clamp<std::size_t>(k, 1, n - 1);
    const std::vector<std::size_t> perm = rng.permutation(n);
    Split s;
    s.train.resize(to_index(k), points.cols());
    s.validation.resize(to_index(n - k), points.cols());
    for (std::size_t i = 0; i < n; ++i) {
        if (i < k) {
            s.train.row(to_index(i)) = points.row(to_index(perm[i]));
        } else {
            s.validation.row(to_index(i - k)) = points.row(to_index(perm[i]));
        }
    }
    return s;
}

inline Split split(const Matrix& points, double fraction, std::uint64_t seed) {
    Rng rng(seed, "split");
    return split(points, fraction, rng);
}

struct MarginalSplit {
    std::vector<Marginal> train;
    std::vector<Marginal> validation;
};

/// Stratified: every marginal is split on its own sub-stream.
inline MarginalSplit split_marginals(const std::vector<Marginal>& ms, double fraction, const Rng& rng) {
    MarginalSplit out;
    for (std::size_t k = 0; k < ms.size(); ++k) {
        Rng r = rng.split("marginal." + std::to_string(k));
        Split s = split(ms[k].points, fraction, r);
        out.train.push_back({ms[k].time, std::move(s.train)});
        out.validation.push_back({ms[k].time, std::move(s.validation)});
    }
    return out;
}

} // namespace mfm
