#pragma once

// Minibatch plumbing shared by both training stages: time-labelled
// marginals, consecutive segments, coupled pair streams, and a generic
// epoch loop with patience-based early stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mfm/coupling.hpp"
#include "mfm/nn/mlp.hpp"
#include "mfm/nn/optim.hpp"
#include "mfm/nn/tape.hpp"
#include "mfm/rng.hpp"
#include "mfm/types.hpp"

namespace mfm {

/// Per-row segment bounds. Rows of a batch may come from different segments.
struct SegmentBounds {
    Vector ta;
    Vector tb;

    static SegmentBounds unit(Eigen::Index rows) { return {Vector::Zero(rows), Vector::Ones(rows)}; }
    static SegmentBounds constant(Eigen::Index rows, double a, double b) {
        return {Vector::Constant(rows, a), Vector::Constant(rows, b)};
    }
};

/// Samples observed at one time.
struct Marginal {
    double time = 0.0;
    Matrix points;
};

/// Source and target samples for one pair of consecutive observed times.
struct SegmentData {
    double ta = 0.0;
    double tb = 1.0;
    Matrix source;
    Matrix target;
};

/// Consecutive pairs of a time-sorted marginal list.
inline std::vector<SegmentData> consecutive_segments(const std::vector<Marginal>& marginals) {
    if (marginals.size() < 2) {
        throw ValidationError("need at least two marginals to form a segment");
    }
    std::vector<SegmentData> out;
    for (std::size_t i = 0; i + 1 < marginals.size(); ++i) {
        if (!(marginals[i].time < marginals[i + 1].time)) {
            throw ValidationError("marginal times must be strictly increasing");
        }
        if (marginals[i].points.cols() != marginals[i + 1].points.cols()) {
            throw ShapeError("marginals have different dimensions");
        }
        out.push_back({marginals[i].time, marginals[i + 1].time, marginals[i].points, marginals[i + 1].points});
    }
    return out;
}

/// Coupled endpoints, sampled times and segment bounds for a batch.
struct PairBatch {
    Matrix x0;
    Matrix x1;
    Vector t;
    SegmentBounds seg;

    [[nodiscard]] Eigen::Index rows() const { return x0.rows(); }
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(to_index(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.row(to_index(i)) = m.row(to_index(idx[i]));
    }
    return out;
}

inline PairBatch concat(const std::vector<PairBatch>& parts, Eigen::Index dim) {
    Eigen::Index n = 0;
    for (const auto& p : parts) {
        n += p.rows();
    }
    PairBatch b;
    b.x0.resize(n, dim);
    b.x1.resize(n, dim);
    b.t.resize(n);
    b.seg.ta.resize(n);
    b.seg.tb.resize(n);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        const Eigen::Index k = p.rows();
        b.x0.middleRows(r, k) = p.x0;
        b.x1.middleRows(r, k) = p.x1;
        b.t.segment(r, k) = p.t;
        b.seg.ta.segment(r, k) = p.seg.ta;
        b.seg.tb.segment(r, k) = p.seg.tb;
        r += k;
    }
    return b;
}

// Endless reshuffled walk over 0..n-1.
class CyclicOrder {
public:
    CyclicOrder(std::size_t n, Rng rng) : rng_(std::move(rng)), order_(rng_.permutation(n)) {}

    std::vector<std::size_t> take(std::size_t k) {
        std::vector<std::size_t> out;
        out.reserve(k);
        while (out.size() < k) {
            if (pos_ == order_.size()) {
                rng_.shuffle(order_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

} // namespace detail

/**
 * Endless stream of coupled minibatches.
 *
 * Each step draws up to `batch_size` samples from both marginals of every
 * segment, couples them, samples t ~ U(ta, tb) per pair and concatenates the
 * segments. Ordering, coupling and time draws use separate sub-streams, so
 * switching the coupling never changes which samples or times are drawn.
 */
class PairStream {
public:
    PairStream(std::vector<SegmentData> segments, CouplingKind coupling, std::size_t batch_size, const Rng& rng)
        : segments_(std::move(segments)),
          coupling_(coupling),
          batch_(batch_size),
          couple_rng_(rng.split("couple")),
          time_rng_(rng.split("time")) {
        if (segments_.empty()) {
            throw ValidationError("pair stream: no segments");
        }
        if (batch_ == 0) {
            throw ValidationError("pair stream: batch size must be >= 1");
        }
        for (std::size_t s = 0; s < segments_.size(); ++s) {
            const auto& seg = segments_[s];
            if (seg.source.rows() == 0 || seg.target.rows() == 0) {
                throw ValidationError("pair stream: empty marginal in segment " + std::to_string(s));
            }
            if (seg.source.cols() != segments_[0].source.cols() || seg.target.cols() != seg.source.cols()) {
                throw ShapeError("pair stream: segments disagree on dimension");
            }
            const std::string tag = std::to_string(s);
            src_order_.emplace_back(to_size(seg.source.rows()), rng.split("source." + tag));
            tgt_order_.emplace_back(to_size(seg.target.rows()), rng.split("target." + tag));
            longest_ = std::max({longest_, to_size(seg.source.rows()), to_size(seg.target.rows())});
        }
    }

    [[nodiscard]] std::size_t steps_per_epoch() const { return (longest_ + batch_ - 1) / batch_; }
    [[nodiscard]] std::size_t dim() const { return to_size(segments_[0].source.cols()); }
    [[nodiscard]] const std::vector<SegmentData>& segments() const { return segments_; }

    PairBatch next() {
        std::vector<PairBatch> parts;
        for (std::size_t s = 0; s < segments_.size(); ++s) {
            const auto& seg = segments_[s];
            const std::size_t k =
                std::min({batch_, to_size(seg.source.rows()), to_size(seg.target.rows())});
            const Matrix src = detail::gather_rows(seg.source, src_order_[s].take(k));
            const Matrix tgt = detail::gather_rows(seg.target, tgt_order_[s].take(k));
            const CouplingPlan plan = couple(coupling_, src, tgt, couple_rng_);
            PairBatch p;
            p.x0 = detail::gather_rows(src, plan.source);
            p.x1 = detail::gather_rows(tgt, plan.target);
            p.t.resize(to_index(k));
            for (Eigen::Index i = 0; i < p.t.size(); ++i) {
                p.t(i) = time_rng_.uniform(seg.ta, seg.tb);
            }
            p.seg = SegmentBounds::constant(to_index(k), seg.ta, seg.tb);
            parts.push_back(std::move(p));
        }
        return parts.size() == 1 ? std::move(parts[0]) : detail::concat(parts, to_index(dim()));
    }

private:
    std::vector<SegmentData> segments_;
    CouplingKind coupling_;
    std::size_t batch_;
    Rng couple_rng_;
    Rng time_rng_;
    std::vector<detail::CyclicOrder> src_order_;
    std::vector<detail::CyclicOrder> tgt_order_;
    std::size_t longest_ = 0;
};

/**
 * Fixed validation pairs: per segment the larger marginal is subsampled to
 * the smaller size, the whole segment is coupled at once, and one time is
 * drawn per pair. Drawn once so validation losses are comparable across epochs.
 */
inline PairBatch fixed_pairs(const std::vector<SegmentData>& segments, CouplingKind coupling, const Rng& rng,
                             std::size_t max_per_segment = 2000) {
    if (segments.empty()) {
        throw ValidationError("fixed_pairs: no segments");
    }
    std::vector<PairBatch> parts;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        Rng local = rng.split("segment." + std::to_string(s));
        const std::size_t k = std::min({to_size(seg.source.rows()), to_size(seg.target.rows()), max_per_segment});
        if (k == 0) {
            throw ValidationError("fixed_pairs: empty marginal in segment " + std::to_string(s));
        }
        auto pick = [&](const Matrix& m, const char* name) {
            Rng r = local.split(name);
            std::vector<std::size_t> idx = r.permutation(to_size(m.rows()));
            idx.resize(k);
            return detail::gather_rows(m, idx);
        };
        const Matrix src = pick(seg.source, "source");
        const Matrix tgt = pick(seg.target, "target");
        Rng crng = local.split("couple");
        const CouplingPlan plan = couple(coupling, src, tgt, crng);
        PairBatch p;
        p.x0 = detail::gather_rows(src, plan.source);
        p.x1 = detail::gather_rows(tgt, plan.target);
        Rng trng = local.split("time");
        p.t.resize(to_index(k));
        for (Eigen::Index i = 0; i < p.t.size(); ++i) {
            p.t(i) = trng.uniform(seg.ta, seg.tb);
        }
        p.seg = SegmentBounds::constant(to_index(k), seg.ta, seg.tb);
        parts.push_back(std::move(p));
    }
    return parts.size() == 1 ? std::move(parts[0]) : detail::concat(parts, segments[0].source.cols());
}

struct FitConfig {
    std::size_t epochs = 1000;
    std::size_t patience = 3;
    nn::OptimizerConfig optimizer = nn::OptimizerConfig::adam(1e-4);

    void validate() const {
        if (patience < 1) {
            throw ValidationError("patience must be >= 1");
        }
    }
};

struct TrainTrace {
    std::vector<double> step_loss;
    std::vector<double> train_loss; // mean step loss per epoch
    std::vector<double> val_loss;
    std::size_t best_epoch = 0;     // 1-based; 0 when no epoch ran
    double best_val = 0.0;
    std::size_t epochs_run = 0;
    bool early_stopped = false;
};

/// Builds a scalar loss on `tape` for `batch` using the bound network.
using LossBuilder = std::function<nn::Var(nn::Tape&, const nn::MlpBinding&, const PairBatch&)>;

/**
 * Epoch loop: one optimizer step per minibatch, validation after each
 * epoch, stop after `patience` epochs without improvement and restore the
 * best parameters. A non-finite loss aborts with the epoch and step.
 */
inline TrainTrace fit(nn::MlpParams& params, PairStream& stream, const PairBatch& val, const LossBuilder& loss,
                      const FitConfig& cfg, const std::string& what) {
    cfg.validate();
    params.validate();
    TrainTrace trace;
    if (cfg.epochs == 0) {
        return trace;
    }
    nn::Optimizer opt(cfg.optimizer);
    nn::MlpParams best = params;
    std::size_t stale = 0;
    const bool has_val = val.rows() > 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::size_t steps = stream.steps_per_epoch();
        double acc = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            const PairBatch batch = stream.next();
            nn::Tape tape;
            const nn::MlpBinding b = nn::bind(tape, params, true);
            const nn::Var l = loss(tape, b, batch);
            const double lv = l.scalar();
            if (!std::isfinite(lv)) {
                throw NumericError(what + ": non-finite training loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(s + 1));
            }
            tape.backward(l);
            const nn::MlpParams g = nn::gradients(b, params);
            for (const Matrix* t : g.tensors()) {
                require_finite(*t, what + ": gradient at epoch " + std::to_string(epoch));
            }
            opt.step(params, g);
            trace.step_loss.push_back(lv);
            acc += lv;
        }
        trace.train_loss.push_back(acc / static_cast<double>(steps));
        trace.epochs_run = epoch;
        if (!has_val) {
            best = params;
            trace.best_epoch = epoch;
            continue;
        }
        nn::Tape tape;
        const double vl = loss(tape, nn::bind(tape, params, false), val).scalar();
        if (!std::isfinite(vl)) {
            throw NumericError(what + ": non-finite validation loss at epoch " + std::to_string(epoch));
        }
        trace.val_loss.push_back(vl);
        if (trace.best_epoch == 0 || vl < trace.best_val) {
            trace.best_val = vl;
            trace.best_epoch = epoch;
            best = params;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            trace.early_stopped = true;
            break;
        }
    }
    params = std::move(best);
    return trace;
}

} // namespace mfm
