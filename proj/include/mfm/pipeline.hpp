#pragma once

// The staged pipeline behind the CLI. One run directory per (config, seed):
//
//   <output_dir>/<name>-<hash16>/
//     config.json  manifest.json  results.csv  trajectories.csv
//     checkpoints/{metric,interpolant,vector_field}.ckpt
//     traces/{metric,interpolant,vector_field}.csv  traces/*_steps.csv
//
// Stages run strictly in order (metric, interpolant, vector field, eval) and
// each one is skipped when its checkpoint is already recorded in the manifest.
// Leave-one-out runs nest one such directory per held-out marginal.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfm/config.hpp"
#include "mfm/coupling.hpp"
#include "mfm/datasets.hpp"
#include "mfm/inference.hpp"
#include "mfm/interpolants.hpp"
#include "mfm/matching.hpp"
#include "mfm/metrics.hpp"
#include "mfm/nn/checkpoint.hpp"
#include "mfm/oracle.hpp"
#include "mfm/training.hpp"

namespace mfm {

namespace fs = std::filesystem;

struct EvalReport {
    std::string metric;
    double value = 0.0;
    std::size_t n_generated = 0;
    std::size_t n_reference = 0;
    std::uint64_t seed = 0;
    double runtime_seconds = 0.0;  // kept out of results.csv so reruns compare byte for byte
    std::optional<std::size_t> left_out;
};

/// Marginals and ground truth as produced by the dataset spec, before splitting.
struct DatasetBundle {
    std::vector<Marginal> marginals;
    std::optional<Matrix> truth; // synthetic data only
    double truth_time = 0.5;
    std::string kind;
    std::size_t rows_dropped = 0;
};

inline DatasetBundle load_dataset(const DatasetSpec& d, std::uint64_t seed) {
    DatasetBundle b;
    b.kind = d.kind;
    if (d.kind == "arch" || d.kind == "sphere") {
        ArcConfig ac;
        ac.spread = d.spread;
        ac.radial_noise = d.radial_noise;
        SyntheticData s = d.kind == "arch" ? generate_arch(d.n, seed, ac) : generate_sphere(d.n, seed, ac);
        b.marginals = {{0.0, std::move(s.source)}, {1.0, std::move(s.target)}};
        b.truth = std::move(s.truth);
    } else if (d.kind == "gaussian_line") {
        b.marginals = generate_gaussian_line(d.n, d.marginals, d.dim, seed, d.step, d.sd);
    } else if (d.kind == "csv") {
        CsvSchema schema;
        schema.time_column = d.time_column;
        schema.feature_columns = d.features;
        CsvReport rep;
        b.marginals = load_marginals_csv(d.path, schema, &rep);
        b.rows_dropped = rep.rows_dropped;
    } else {
        throw ValidationError("unknown dataset kind '" + d.kind + "'");
    }
    return b;
}

/// Training view of a bundle: held-out marginal removed, split, optionally whitened.
struct PreparedData {
    std::vector<Marginal> train;
    std::vector<Marginal> validation;
    std::vector<Marginal> all; // every marginal in training coordinates, held-out one included
    std::optional<WhitenTransform> whiten;
    std::optional<std::size_t> left_out;

    [[nodiscard]] std::size_t dim() const { return to_size(all.front().points.cols()); }

    [[nodiscard]] Matrix pooled_train() const {
        Eigen::Index n = 0;
        for (const auto& m : train) {
            n += m.points.rows();
        }
        Matrix out(n, all.front().points.cols());
        Eigen::Index r = 0;
        for (const auto& m : train) {
            out.middleRows(r, m.points.rows()) = m.points;
            r += m.points.rows();
        }
        return out;
    }
};

inline PreparedData prepare_data(const DatasetBundle& b, const ExperimentConfig& cfg,
                                 std::optional<std::size_t> left_out) {
    PreparedData p;
    p.left_out = left_out;
    std::vector<Marginal> kept;
    for (std::size_t k = 0; k < b.marginals.size(); ++k) {
        if (!left_out || k != *left_out) {
            kept.push_back(b.marginals[k]);
        }
    }
    if (kept.size() < 2) {
        throw ValidationError("need at least two training marginals");
    }
    MarginalSplit s = split_marginals(kept, cfg.split_fraction, Rng(cfg.seed, "experiment").split("split"));
    p.train = std::move(s.train);
    p.validation = std::move(s.validation);
    p.all = b.marginals;
    if (cfg.dataset.whiten) {
        p.whiten = fit_whiten(p.train);
        p.train = p.whiten->apply(p.train);
        p.validation = p.whiten->apply(p.validation);
        p.all = p.whiten->apply(p.all);
    }
    return p;
}

// ---------------------------------------------------------------------------
// run directory and manifest
// ---------------------------------------------------------------------------

inline std::string run_dir_name(const ExperimentConfig& cfg) {
    return cfg.name + "-" + config_hash(cfg).substr(0, 16);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/**
 * Owns one run directory. The manifest is rewritten after every stage, so an
 * interrupted run records how far it got.
 */
class RunDirectory {
public:
    RunDirectory(fs::path dir, const ExperimentConfig& cfg) : dir_(std::move(dir)), hash_(config_hash(cfg)) {
        std::error_code ec;
        fs::create_directories(dir_ / "checkpoints", ec);
        if (!ec) {
            fs::create_directories(dir_ / "traces", ec);
        }
        if (ec) {
            throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
        }
        const fs::path mpath = dir_ / "manifest.json";
        if (fs::exists(mpath)) {
            std::ifstream in(mpath);
            try {
                manifest_ = Json::parse(in);
            } catch (const Json::exception&) {
                manifest_ = Json::object(); // unreadable manifest: start over
            }
            if (!manifest_.is_object() || manifest_.value("config_hash", "") != hash_) {
                manifest_ = Json::object();
            }
        }
        manifest_["config_hash"] = hash_;
        manifest_["seed"] = cfg.seed;
        manifest_["name"] = cfg.name;
        if (!manifest_.contains("stages")) {
            manifest_["stages"] = Json::object();
        }
        save_config(dir_ / "config.json", cfg);
        t0_ = std::chrono::steady_clock::now();
    }

    [[nodiscard]] const fs::path& path() const { return dir_; }
    [[nodiscard]] fs::path file(const std::string& rel) const { return dir_ / rel; }
    [[nodiscard]] const Json& manifest() const { return manifest_; }

    [[nodiscard]] bool stage_done(const std::string& stage) const {
        const Json& s = manifest_["stages"];
        if (!s.contains(stage) || s[stage].value("status", "") != "done") {
            return false;
        }
        const std::string ckpt = s[stage].value("checkpoint", "");
        return ckpt.empty() || fs::exists(dir_ / ckpt);
    }

    [[nodiscard]] Json stage_info(const std::string& stage) const {
        const Json& s = manifest_["stages"];
        return s.contains(stage) ? s[stage].value("info", Json::object()) : Json::object();
    }

    void record_stage(const std::string& stage, const std::string& status, const std::string& checkpoint,
                      Json info, double seconds) {
        manifest_["stages"][stage] = {
            {"status", status}, {"checkpoint", checkpoint}, {"info", std::move(info)}, {"wall_seconds", seconds}};
        write();
    }

    void record_failure(const std::string& stage, const std::string& message) {
        manifest_["stages"][stage] = {{"status", "failed"}, {"error", message}};
        manifest_["status"] = "partial";
        write();
    }

    void set(const std::string& key, Json value) {
        manifest_[key] = std::move(value);
    }

    /// Hashes every file below the run directory (the manifest itself excluded) and writes the manifest.
    void finalize(const std::string& status) {
        manifest_["status"] = status;
        manifest_["wall_seconds"] = seconds_since(t0_);
        Json files = Json::array();
        std::vector<fs::path> paths;
        for (const auto& e : fs::recursive_directory_iterator(dir_)) {
            if (e.is_regular_file() && e.path().filename() != "manifest.json") {
                paths.push_back(e.path());
            }
        }
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) {
            files.push_back({{"path", fs::relative(p, dir_).generic_string()}, {"sha256", file_sha256(p)}});
        }
        manifest_["files"] = std::move(files);
        write();
    }

private:
    void write() const {
        const fs::path tmp = dir_ / "manifest.json.tmp";
        {
            std::ofstream out(tmp);
            if (!out) {
                throw IoError("cannot write manifest in " + dir_.string());
            }
            out << manifest_.dump(2) << '\n';
        }
        fs::rename(tmp, dir_ / "manifest.json");
    }

    fs::path dir_;
    std::string hash_;
    Json manifest_ = Json::object();
    std::chrono::steady_clock::time_point t0_;
};

namespace detail {

inline void write_trace(const fs::path& path, const TrainTrace& t) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < t.train_loss.size(); ++e) {
        out << e + 1 << ',' << nn::format_double(t.train_loss[e]) << ','
            << (e < t.val_loss.size() ? nn::format_double(t.val_loss[e]) : "") << '\n';
    }
}

inline void write_steps(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "step,loss\n";
    for (std::size_t s = 0; s < losses.size(); ++s) {
        out << s + 1 << ',' << nn::format_double(losses[s]) << '\n';
    }
}

inline Json trace_summary(const TrainTrace& t) {
    return {{"epochs_run", t.epochs_run},
            {"best_epoch", t.best_epoch},
            {"best_val", t.best_val},
            {"early_stopped", t.early_stopped},
            {"steps", t.step_loss.size()}};
}

inline Matrix first_rows(const Matrix& m, std::size_t k) {
    return m.topRows(std::min<Eigen::Index>(m.rows(), to_index(k)));
}

} // namespace detail

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

enum class Stage { Metric = 0, Interpolant = 1, VectorField = 2, Eval = 3 };

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::Metric:
        return "metric";
    case Stage::Interpolant:
        return "interpolant";
    case Stage::VectorField:
        return "vector_field";
    case Stage::Eval:
        return "eval";
    }
    return "?";
}

/// Whether Stage 1 trains, is frozen at zero, or is absent (straight paths).
inline std::string resolved_interpolant_mode(const ExperimentConfig& cfg) {
    if (cfg.interpolant.mode != "auto") {
        return cfg.interpolant.mode;
    }
    // Straight lines are already geodesics of the identity metric.
    return cfg.metric.kind == "identity" ? "none" : "train";
}

inline Gate resolved_gate(const ExperimentConfig& cfg) {
    if (cfg.interpolant.gate != "auto") {
        return gate_from_string(cfg.interpolant.gate);
    }
    return cfg.protocol.kind == "leave_one_out" ? Gate::Quadratic : Gate::Unit;
}

/// Everything a run produces in memory, resumed or freshly trained.
struct RunOutcome {
    fs::path dir;
    MetricField metric;
    std::optional<InterpolantModel> interpolant;
    std::optional<VectorFieldModel> vector_field;
    std::optional<TrainTrace> interpolant_trace; // only when trained in this invocation
    std::optional<TrainTrace> vector_field_trace;
    Json interpolant_info = Json::object();
    std::vector<EvalReport> reports;
    PreparedData data;
};

struct RunOptions {
    Stage until = Stage::Eval;
    /// Stage 2 and eval refuse to run unless earlier checkpoints exist on disk.
    bool require_checkpoints = false;
};

class Pipeline {
public:
    Pipeline(ExperimentConfig cfg, fs::path dir) : cfg_(std::move(cfg)), run_(std::move(dir), cfg_) {
        cfg_.validate();
    }

    [[nodiscard]] const RunDirectory& directory() const { return run_; }

    RunOutcome run(const DatasetBundle& bundle, std::optional<std::size_t> left_out, const RunOptions& opt) {
        RunOutcome out;
        out.dir = run_.path();
        out.data = prepare_data(bundle, cfg_, left_out);
        Stage current = Stage::Metric;
        try {
            current = Stage::Metric;
            out.metric = stage_metric(out.data, opt);
            if (opt.until == Stage::Metric) {
                run_.finalize("partial");
                return out;
            }
            current = Stage::Interpolant;
            stage_interpolant(out, opt);
            if (opt.until == Stage::Interpolant) {
                run_.finalize("partial");
                return out;
            }
            current = Stage::VectorField;
            stage_vector_field(out, opt);
            if (opt.until == Stage::VectorField) {
                run_.finalize("partial");
                return out;
            }
            current = Stage::Eval;
            out.reports = evaluate(bundle, out);
            write_results(out.reports);
            run_.finalize("complete");
        } catch (const Error& e) {
            run_.record_failure(to_string(current), e.what());
            throw;
        }
        return out;
    }

private:
    MetricField stage_metric(const PreparedData& data, const RunOptions&) {
        const std::string ck = "checkpoints/metric.ckpt";
        if (run_.stage_done("metric")) {
            return metric_from_archive(nn::Archive::load(run_.file(ck)));
        }
        const auto t0 = std::chrono::steady_clock::now();
        const MetricSpec& ms = cfg_.metric;
        MetricField metric = MetricField::identity();
        Json info = Json::object();
        if (ms.kind == "identity") {
            run_.record_stage("metric", "skipped", "", info, 0.0);
            return metric;
        }
        const Matrix pooled = data.pooled_train();
        if (ms.kind == "land") {
            metric = MetricField(LandMetric(pooled, ms.sigma, ms.epsilon, ms.nearest));
            info["anchors"] = pooled.rows();
        } else {
            const Rng r = Rng(cfg_.seed, "experiment").split("metric");
            RbfMetric rbf = build_rbf_metric(pooled, std::min<std::size_t>(ms.clusters, to_size(pooled.rows())),
                                             ms.kappa, ms.epsilon, ms.power, r.split("kmeans").next_u64());
            RbfTrainConfig tc;
            tc.epochs = ms.rbf_epochs;
            tc.learning_rate = ms.rbf_lr;
            const RbfTrainReport rep = train_rbf_weights(rbf, pooled, tc, cfg_.seed);
            if (ms.epsilon_rule == "complement") {
                rbf.set_epsilon(complement_epsilon(rep.final_loss, to_size(pooled.rows()), to_size(pooled.cols())));
            }
            std::ofstream tr(run_.file("traces/metric.csv"));
            tr << "epoch,loss\n";
            for (std::size_t e = 0; e < rep.loss_trace.size(); ++e) {
                tr << e + 1 << ',' << nn::format_double(rep.loss_trace[e]) << '\n';
            }
            info = {{"final_loss", rep.final_loss},
                    {"mean_h", rep.mean_h},
                    {"mean_abs_residual", rep.mean_abs_residual},
                    {"epsilon", rbf.epsilon()}};
            metric = MetricField(std::move(rbf));
        }
        to_archive(metric).save(run_.file(ck));
        run_.record_stage("metric", "done", ck, info, seconds_since(t0));
        return metric;
    }

    void stage_interpolant(RunOutcome& out, const RunOptions& opt) {
        const std::string mode = resolved_interpolant_mode(cfg_);
        const std::string ck = "checkpoints/interpolant.ckpt";
        if (mode == "none") {
            run_.record_stage("interpolant", "skipped", "", Json::object(), 0.0);
            return;
        }
        if (run_.stage_done("interpolant")) {
            out.interpolant = interpolant_from_archive(nn::Archive::load(run_.file(ck)));
            out.interpolant_info = run_.stage_info("interpolant");
            return;
        }
        if (opt.require_checkpoints) {
            throw IoError("missing interpolant checkpoint in " + run_.path().string() + " (run train-interpolant first)");
        }
        const auto t0 = std::chrono::steady_clock::now();
        const InterpolantSpec& is = cfg_.interpolant;
        const Rng root = Rng(cfg_.seed, "experiment").split("interpolant");
        const std::size_t d = out.data.dim();
        InterpolantModel m;
        if (mode == "zero") {
            m = InterpolantModel::zero(d, is.width, is.depth, is.use_time);
        } else {
            Rng init = root.split("init");
            m = InterpolantModel::init(d, is.width, is.depth, init, is.use_time);
        }
        m.fd_step = is.fd_step;
        m.gate = resolved_gate(cfg_);
        Json info = {{"mode", mode}, {"gate", to_string(m.gate)}};
        const CouplingKind ck_kind = coupling_from_string(cfg_.coupling);
        const PairBatch val =
            fixed_pairs(consecutive_segments(out.data.validation), ck_kind, root.split("validation"));
        if (mode == "train") {
            PairStream stream(consecutive_segments(out.data.train), ck_kind, cfg_.batch_size, root.split("stream"));
            InterpolantTrainConfig tc;
            tc.fit = {is.epochs, is.patience, nn::OptimizerConfig::adam(is.lr)};
            tc.normalize_by_straight_energy = is.normalize_by_straight_energy;
            InterpolantTrainResult res = train_interpolant(m, out.metric, stream, val, tc);
            detail::write_trace(run_.file("traces/interpolant.csv"), res.trace);
            detail::write_steps(run_.file("traces/interpolant_steps.csv"), res.trace.step_loss);
            info["trace"] = detail::trace_summary(res.trace);
            info["straight_val_energy"] = res.straight_val_energy;
            info["final_val_energy"] = res.final_val_energy;
            out.interpolant_trace = std::move(res.trace);
        } else {
            const double e = straight_energy_estimate(out.metric, val.t, val.x0, val.x1, val.seg).mean;
            info["straight_val_energy"] = e;
            info["final_val_energy"] = e;
        }
        to_archive(m).save(run_.file(ck));
        run_.record_stage("interpolant", "done", ck, info, seconds_since(t0));
        out.interpolant = std::move(m);
        out.interpolant_info = std::move(info);
    }

    void stage_vector_field(RunOutcome& out, const RunOptions& opt) {
        const std::string ck = "checkpoints/vector_field.ckpt";
        if (run_.stage_done("vector_field")) {
            out.vector_field = vector_field_from_archive(nn::Archive::load(run_.file(ck)));
            return;
        }
        if (opt.require_checkpoints && opt.until == Stage::Eval) {
            throw IoError("missing vector_field checkpoint in " + run_.path().string() + " (train first)");
        }
        const auto t0 = std::chrono::steady_clock::now();
        const VectorFieldSpec& vs = cfg_.vector_field;
        const Rng root = Rng(cfg_.seed, "experiment").split("vector_field");
        Rng init = root.split("init");
        VectorFieldModel vf = VectorFieldModel::init(out.data.dim(), vs.width, vs.depth, init);
        const CouplingKind kind = coupling_from_string(cfg_.coupling);
        PairStream stream(consecutive_segments(out.data.train), kind, cfg_.batch_size, root.split("stream"));
        const PairBatch val = fixed_pairs(consecutive_segments(out.data.validation), kind, root.split("validation"));
        MatchConfig mc;
        mc.mode = norm_mode_from_string(vs.norm_mode);
        mc.fit = {vs.epochs, vs.patience, nn::OptimizerConfig::adamw(vs.lr, vs.weight_decay)};
        TrainTrace trace = train_vector_field(vf, out.interpolant, out.metric, stream, val, mc);
        detail::write_trace(run_.file("traces/vector_field.csv"), trace);
        detail::write_steps(run_.file("traces/vector_field_steps.csv"), trace.step_loss);
        to_archive(vf).save(run_.file(ck));
        run_.record_stage("vector_field", "done", ck, {{"trace", detail::trace_summary(trace)}}, seconds_since(t0));
        out.vector_field = std::move(vf);
        out.vector_field_trace = std::move(trace);
    }

    std::vector<EvalReport> evaluate(const DatasetBundle& bundle, const RunOutcome& out) {
        const auto t0 = std::chrono::steady_clock::now();
        const InferenceSpec& inf = cfg_.inference;
        Rng root = Rng(cfg_.seed, "experiment").split("eval");
        std::vector<EvalReport> reports;
        auto report = [&](const std::string& name, double value, std::size_t ng, std::size_t nr) {
            EvalReport r;
            r.metric = name;
            r.value = value;
            r.n_generated = ng;
            r.n_reference = nr;
            r.seed = cfg_.seed;
            r.left_out = out.data.left_out;
            r.runtime_seconds = seconds_since(t0);
            reports.push_back(std::move(r));
        };
        const VectorFieldModel& vf = *out.vector_field;
        const std::uint64_t emd_seed = root.split("emd").next_u64();
        const auto& all = out.data.all;

        std::size_t from = 0;
        std::size_t to = all.size() - 1;
        if (out.data.left_out) {
            to = *out.data.left_out;
            from = cfg_.protocol.rollout_from == "first" ? 0 : to - 1;
        }
        Rng pick = root.split("start");
        Matrix x0 = detail::subsample(all[from].points, inf.eval_points, pick);
        const Trajectory traj = euler_rollout(vf, x0, all[from].time, all[to].time, inf.steps);
        write_trajectories(traj, out.data);
        auto raw = [&](const Matrix& z) { return out.data.whiten ? out.data.whiten->invert(z) : z; };

        if (out.data.left_out) {
            const Matrix gen = raw(traj.final_state());
            const Matrix& ref = bundle.marginals[to].points;
            report("emd_left_out", emd(gen, ref, emd_seed, inf.emd_max_points), to_size(gen.rows()),
                   to_size(ref.rows()));
            return reports;
        }
        if (bundle.truth) {
            const Matrix mid = raw(traj.at(bundle.truth_time));
            report("emd_mid", emd(mid, *bundle.truth, emd_seed, inf.emd_max_points), to_size(mid.rows()),
                   to_size(bundle.truth->rows()));
            if (bundle.kind == "sphere") {
                report("sphere_distance_mid", sphere_distance(mid), to_size(mid.rows()), 0);
            }
        }
        const Matrix end = raw(traj.final_state());
        const Matrix& target = bundle.marginals[to].points;
        report("emd_final", emd(end, target, emd_seed, inf.emd_max_points), to_size(end.rows()),
               to_size(target.rows()));
        if (out.interpolant_info.contains("final_val_energy")) {
            report("interpolant_val_energy", out.interpolant_info["final_val_energy"].get<double>(), 0, 0);
            report("straight_val_energy", out.interpolant_info["straight_val_energy"].get<double>(), 0, 0);
        }
        return reports;
    }

    void write_trajectories(const Trajectory& traj, const PreparedData& data) const {
        std::ofstream out(run_.file("trajectories.csv"));
        if (!out) {
            throw IoError("cannot write trajectories in " + run_.path().string());
        }
        const Eigen::Index d = traj.states.front().cols();
        out << "id,t";
        for (Eigen::Index a = 0; a < d; ++a) {
            out << ",x" << a;
        }
        out << '\n';
        const Eigen::Index n =
            std::min<Eigen::Index>(traj.states.front().rows(), to_index(cfg_.inference.plot_trajectories));
        for (Eigen::Index i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < traj.times.size(); ++k) {
                RowVector x = traj.states[k].row(i);
                if (data.whiten) {
                    x = data.whiten->invert(Matrix(x)).row(0);
                }
                out << i << ',' << nn::format_double(traj.times[k]);
                for (Eigen::Index a = 0; a < d; ++a) {
                    out << ',' << nn::format_double(x(a));
                }
                out << '\n';
            }
        }
    }

    void write_results(const std::vector<EvalReport>& reports) const {
        write_results_csv(run_.file("results.csv"), reports);
    }

public:
    static void write_results_csv(const fs::path& path, const std::vector<EvalReport>& reports) {
        std::ofstream out(path);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        out << "metric,value,n_generated,n_reference,seed,left_out\n";
        for (const auto& r : reports) {
            out << r.metric << ',' << nn::format_double(r.value) << ',' << r.n_generated << ',' << r.n_reference
                << ',' << r.seed << ',' << (r.left_out ? std::to_string(*r.left_out) : "") << '\n';
        }
    }

private:
    ExperimentConfig cfg_;
    RunDirectory run_;
};

// ---------------------------------------------------------------------------
// entry points
// ---------------------------------------------------------------------------

/// Pairwise protocol: one run directory for (config, seed).
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
    cfg.validate();
    if (cfg.protocol.kind != "pairwise") {
        throw ValidationError("run_experiment: protocol is " + cfg.protocol.kind + "; use run_leave_one_out");
    }
    const DatasetBundle bundle = load_dataset(cfg.dataset, cfg.seed);
    Pipeline p(cfg, fs::path(cfg.output_dir) / run_dir_name(cfg));
    return p.run(bundle, std::nullopt, opt);
}

inline std::vector<std::size_t> left_out_indices(const ExperimentConfig& cfg, std::size_t n_marginals) {
    if (n_marginals < 3) {
        throw ValidationError("leave-one-out needs at least 3 marginals, got " + std::to_string(n_marginals));
    }
    std::vector<std::size_t> idx = cfg.protocol.left_out;
    if (idx.empty()) {
        for (std::size_t k = 1; k + 1 < n_marginals; ++k) {
            idx.push_back(k);
        }
    }
    for (std::size_t k : idx) {
        if (k == 0 || k + 1 >= n_marginals) {
            throw ValidationError("left-out index " + std::to_string(k) + " is not an interior marginal (0.." +
                                  std::to_string(n_marginals - 1) + ")");
        }
    }
    return idx;
}

struct LooOutcome {
    fs::path dir;
    std::vector<EvalReport> reports; // one emd_left_out row per held-out index
    std::vector<RunOutcome> runs;
};

/// Leave-one-out protocol: an independent model per held-out interior marginal.
inline LooOutcome run_leave_one_out(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
    cfg.validate();
    if (cfg.protocol.kind != "leave_one_out") {
        throw ValidationError("run_leave_one_out: protocol.kind must be leave_one_out");
    }
    const DatasetBundle bundle = load_dataset(cfg.dataset, cfg.seed);
    LooOutcome res;
    res.dir = fs::path(cfg.output_dir) / run_dir_name(cfg);
    for (std::size_t k : left_out_indices(cfg, bundle.marginals.size())) {
        Pipeline p(cfg, res.dir / ("left_out_" + std::to_string(k)));
        RunOutcome o = p.run(bundle, k, opt);
        for (const auto& r : o.reports) {
            res.reports.push_back(r);
        }
        res.runs.push_back(std::move(o));
    }
    if (opt.until == Stage::Eval) {
        Pipeline::write_results_csv(res.dir / "results.csv", res.reports);
    }
    return res;
}

struct LooAggregate {
    std::string pooling; // per_timestep | pooled
    std::optional<std::size_t> left_out;
    double mean = 0.0;
    double stddev = 0.0; // population standard deviation
    std::size_t count = 0;
};

/**
 * Both conventions for spreading leave-one-out scores: per held-out time
 * across seeds (plus the average of those), and pooled over every
 * (time, seed) value.
 */
inline std::vector<LooAggregate> aggregate_loo(const std::vector<EvalReport>& rows) {
    auto stats = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) {
            m += x;
        }
        m /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) {
            s += (x - m) * (x - m);
        }
        return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
    };
    std::map<std::size_t, std::vector<double>> by_time;
    std::vector<double> all;
    for (const auto& r : rows) {
        if (r.left_out) {
            by_time[*r.left_out].push_back(r.value);
            all.push_back(r.value);
        }
    }
    std::vector<LooAggregate> out;
    if (all.empty()) {
        return out;
    }
    double mean_of_means = 0.0;
    double mean_of_stds = 0.0;
    for (const auto& [k, v] : by_time) {
        const auto [m, s] = stats(v);
        out.push_back({"per_timestep", k, m, s, v.size()});
        mean_of_means += m;
        mean_of_stds += s;
    }
    const auto nt = static_cast<double>(by_time.size());
    out.push_back({"per_timestep", std::nullopt, mean_of_means / nt, mean_of_stds / nt, all.size()});
    const auto [m, s] = stats(all);
    out.push_back({"pooled", std::nullopt, m, s, all.size()});
    return out;
}

inline void write_loo_summary(const fs::path& path, const std::vector<EvalReport>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "kind,pooling,left_out,seed,value,stddev,count\n";
    for (const auto& r : rows) {
        out << "run,," << (r.left_out ? std::to_string(*r.left_out) : "") << ',' << r.seed << ','
            << nn::format_double(r.value) << ",,1\n";
    }
    for (const auto& a : aggregate_loo(rows)) {
        out << "aggregate," << a.pooling << ',' << (a.left_out ? std::to_string(*a.left_out) : "all") << ",,"
            << nn::format_double(a.mean) << ',' << nn::format_double(a.stddev) << ',' << a.count << '\n';
    }
}

// ---------------------------------------------------------------------------
// oracle comparison
// ---------------------------------------------------------------------------

struct OracleRow {
    Vector x0;
    Vector x1;
    double chord_energy = 0.0;
    double geodesic_energy = 0.0;
    double interpolant_energy = 0.0; // NaN without an interpolant
    double relative_gap = 0.0;       // (interpolant - geodesic) / geodesic
    double max_pointwise_gap = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    DiscretePath geodesic;
};

/**
 * Draws `pairs` validation pairs (coupled as in training) and compares the
 * interpolant with the discrete geodesic on the same M-segment grid.
 */
inline std::vector<OracleRow> oracle_study(const ExperimentConfig& cfg, const RunOutcome& run, std::size_t pairs,
                                           std::size_t segments, const GeodesicSolverConfig& solver = {}) {
    const Rng root = Rng(cfg.seed, "experiment").split("oracle");
    const PairBatch val =
        fixed_pairs(consecutive_segments(run.data.validation), coupling_from_string(cfg.coupling), root.split("pairs"));
    Rng pick = root.split("pick");
    std::vector<std::size_t> order = pick.permutation(to_size(val.rows()));
    order.resize(std::min(pairs, order.size()));
    std::vector<OracleRow> rows;
    for (std::size_t i : order) {
        OracleRow r;
        r.x0 = val.x0.row(to_index(i)).transpose();
        r.x1 = val.x1.row(to_index(i)).transpose();
        const GeodesicSolution sol = solve_discrete_geodesic(r.x0, r.x1, run.metric, segments, solver);
        r.chord_energy = sol.chord_energy;
        r.geodesic_energy = sol.energy;
        r.iterations = sol.iterations;
        r.converged = sol.converged;
        r.geodesic = sol.path;
        if (run.interpolant) {
            const DiscretePath ip = discretize_interpolant(*run.interpolant, r.x0, r.x1, segments);
            r.interpolant_energy = discrete_energy(ip, run.metric);
            r.relative_gap = (r.interpolant_energy - r.geodesic_energy) / r.geodesic_energy;
            for (Eigen::Index k = 0; k < ip.points.rows(); ++k) {
                r.max_pointwise_gap =
                    std::max(r.max_pointwise_gap, distance_to_polyline(ip.points.row(k), sol.path.points));
            }
        } else {
            r.interpolant_energy = std::numeric_limits<double>::quiet_NaN();
            r.relative_gap = std::numeric_limits<double>::quiet_NaN();
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_oracle_csv(const fs::path& path, const std::vector<OracleRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "pair,chord_energy,geodesic_energy,interpolant_energy,relative_gap,max_pointwise_gap,iterations,converged\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const OracleRow& r = rows[i];
        out << i << ',' << nn::format_double(r.chord_energy) << ',' << nn::format_double(r.geodesic_energy) << ','
            << nn::format_double(r.interpolant_energy) << ',' << nn::format_double(r.relative_gap) << ','
            << nn::format_double(r.max_pointwise_gap) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << '\n';
    }
}

inline void write_oracle_paths_csv(const fs::path& path, const std::vector<OracleRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    if (rows.empty()) {
        return;
    }
    const Eigen::Index d = rows.front().x0.size();
    out << "pair,k";
    for (Eigen::Index a = 0; a < d; ++a) {
        out << ",x" << a;
    }
    out << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Matrix& p = rows[i].geodesic.points;
        for (Eigen::Index k = 0; k < p.rows(); ++k) {
            out << i << ',' << k;
            for (Eigen::Index a = 0; a < d; ++a) {
                out << ',' << nn::format_double(p(k, a));
            }
            out << '\n';
        }
    }
}

} // namespace mfm
