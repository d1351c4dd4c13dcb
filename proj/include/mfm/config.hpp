#pragma once

// Experiment configuration: JSON (de)serialisation with strict key checking,
// validation, shipped presets, and the content hash that names run directories.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "mfm/error.hpp"

namespace mfm {

using Json = nlohmann::json;

inline constexpr int kConfigVersion = 1;

struct DatasetSpec {
    std::string kind = "arch"; // arch | sphere | gaussian_line | csv
    std::size_t n = 5000;      // points per marginal for the generators
    double spread = 1.0 / (2.0 * std::numbers::pi);
    double radial_noise = 0.1;
    std::size_t marginals = 3; // gaussian_line
    std::size_t dim = 2;       // gaussian_line
    double step = 2.0;         // gaussian_line: mean shift between consecutive marginals
    double sd = 0.5;           // gaussian_line
    std::string path;          // csv
    std::string time_column = "t";
    std::vector<std::string> features; // csv; empty means every x<k> column
    bool whiten = false;
};

struct MetricSpec {
    std::string kind = "land"; // identity | land | rbf
    double sigma = 0.125;
    double epsilon = 0.001;
    std::size_t nearest = 0;   // LAND: 0 uses every anchor
    std::size_t clusters = 100;
    double kappa = 1.5;
    std::string epsilon_rule = "fixed"; // rbf: fixed | complement
    int power = 1;
    std::size_t rbf_epochs = 2000;
    double rbf_lr = 0.05;
};

struct InterpolantSpec {
    std::string mode = "auto"; // auto | train | zero | none
    std::size_t width = 64;
    std::size_t depth = 3;
    double lr = 1e-4;
    std::size_t epochs = 1000;
    std::size_t patience = 3;
    double fd_step = 1e-3;
    bool use_time = true;
    std::string gate = "auto"; // auto | unit | quadratic
    bool normalize_by_straight_energy = false;
};

struct VectorFieldSpec {
    std::size_t width = 64;
    std::size_t depth = 3;
    double lr = 1e-3;
    double weight_decay = 1e-5;
    std::size_t epochs = 1000;
    std::size_t patience = 3;
    std::string norm_mode = "normalized";
};

struct InferenceSpec {
    std::size_t steps = 100;
    std::size_t eval_points = 2000;
    std::size_t emd_max_points = 2000;
    std::size_t plot_trajectories = 64;
};

struct ProtocolSpec {
    std::string kind = "pairwise"; // pairwise | leave_one_out
    std::vector<std::size_t> left_out; // empty: every interior marginal
    std::string rollout_from = "preceding"; // preceding | first
};

struct ExperimentConfig {
    int version = kConfigVersion;
    std::string name = "experiment";
    DatasetSpec dataset;
    double split_fraction = 0.9;
    MetricSpec metric;
    std::string coupling = "ot";
    std::size_t batch_size = 256;
    InterpolantSpec interpolant;
    VectorFieldSpec vector_field;
    InferenceSpec inference;
    ProtocolSpec protocol;
    std::uint64_t seed = 0;
    std::string output_dir = "runs";

    void validate() const;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw ValidationError("config: " + msg);
    }
}

template <class T>
bool one_of(const T& v, std::initializer_list<T> allowed) {
    for (const T& a : allowed) {
        if (v == a) {
            return true;
        }
    }
    return false;
}

/// Reads known keys from one JSON object and rejects everything else.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) {
            throw ValidationError("config: '" + where_ + "' must be an object");
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!it->is_number_unsigned()) {
                    throw ValidationError("expected a non-negative integer");
                }
            } else if constexpr (std::is_same_v<T, int>) {
                if (!it->is_number_integer()) {
                    throw ValidationError("expected an integer");
                }
            } else if constexpr (std::is_same_v<T, double>) {
                if (!it->is_number()) {
                    throw ValidationError("expected a number");
                }
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) {
                    throw ValidationError("expected true or false");
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) {
                    throw ValidationError("expected a string");
                }
            }
            out = it->template get<T>();
        } catch (const ValidationError& e) {
            throw ValidationError("config: " + where_ + "." + key + ": " + e.what());
        } catch (const Json::exception& e) {
            throw ValidationError("config: " + where_ + "." + key + ": " + e.what());
        }
    }

    [[nodiscard]] const Json* object(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (seen_.count(k) == 0) {
                throw ValidationError("config: unknown key '" + where_ + "." + k + "'");
            }
        }
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

} // namespace detail

inline void ExperimentConfig::validate() const {
    using detail::one_of;
    using detail::require;
    require(version == kConfigVersion, "unsupported version " + std::to_string(version));
    require(!name.empty() && name.find_first_of("/\\ \t\n") == std::string::npos,
            "name must be non-empty without slashes or whitespace");
    const DatasetSpec& d = dataset;
    require(one_of<std::string>(d.kind, {"arch", "sphere", "gaussian_line", "csv"}), "unknown dataset kind '" +
                                                                                          d.kind + "'");
    if (d.kind != "csv") {
        require(d.n >= 2, "dataset.n must be >= 2");
    }
    require(d.spread > 0.0 && d.radial_noise >= 0.0, "dataset.spread must be > 0 and radial_noise >= 0");
    if (d.kind == "gaussian_line") {
        require(d.marginals >= 2 && d.dim >= 1 && d.sd > 0.0, "gaussian_line needs >= 2 marginals, dim >= 1, sd > 0");
    }
    if (d.kind == "csv") {
        require(!d.path.empty(), "dataset.path is required for csv data");
    }
    require(split_fraction > 0.0 && split_fraction < 1.0, "split_fraction must lie in (0, 1)");
    const MetricSpec& m = metric;
    require(one_of<std::string>(m.kind, {"identity", "land", "rbf"}), "unknown metric kind '" + m.kind + "'");
    require(m.sigma > 0.0 && m.epsilon > 0.0, "metric.sigma and metric.epsilon must be > 0");
    require(m.clusters >= 1 && m.kappa > 0.0 && m.power >= 1, "rbf needs clusters >= 1, kappa > 0, power >= 1");
    require(one_of<std::string>(m.epsilon_rule, {"fixed", "complement"}), "metric.epsilon_rule must be fixed or complement");
    require(m.rbf_lr > 0.0, "metric.rbf_lr must be > 0");
    require(one_of<std::string>(coupling, {"ot", "independent"}), "coupling must be ot or independent");
    require(batch_size >= 1, "batch_size must be >= 1");
    const InterpolantSpec& i = interpolant;
    require(one_of<std::string>(i.mode, {"auto", "train", "zero", "none"}), "interpolant.mode must be auto, train, zero or none");
    require(one_of<std::string>(i.gate, {"auto", "unit", "quadratic"}), "interpolant.gate must be auto, unit or quadratic");
    require(i.width >= 1 && i.depth >= 1, "interpolant width and depth must be >= 1");
    require(i.lr > 0.0 && i.patience >= 1, "interpolant needs lr > 0 and patience >= 1");
    require(i.fd_step > 0.0 && i.fd_step < 0.5, "interpolant.fd_step must lie in (0, 0.5)");
    const VectorFieldSpec& v = vector_field;
    require(v.width >= 1 && v.depth >= 1, "vector_field width and depth must be >= 1");
    require(v.lr > 0.0 && v.weight_decay >= 0.0 && v.patience >= 1,
            "vector_field needs lr > 0, weight_decay >= 0, patience >= 1");
    require(one_of<std::string>(v.norm_mode, {"normalized", "riemannian"}), "vector_field.norm_mode must be normalized or riemannian");
    require(inference.steps >= 1 && inference.eval_points >= 1 && inference.emd_max_points >= 1,
            "inference steps and point counts must be >= 1");
    require(one_of<std::string>(protocol.kind, {"pairwise", "leave_one_out"}), "protocol.kind must be pairwise or leave_one_out");
    require(one_of<std::string>(protocol.rollout_from, {"preceding", "first"}), "protocol.rollout_from must be preceding or first");
    if (protocol.kind == "leave_one_out") {
        require(d.kind == "gaussian_line" || d.kind == "csv", "leave_one_out needs multi-marginal data (gaussian_line or csv)");
        if (d.kind == "gaussian_line") {
            for (std::size_t k : protocol.left_out) {
                require(k >= 1 && k + 1 < d.marginals, "left-out index " + std::to_string(k) + " is not interior");
            }
        }
    }
    require(!output_dir.empty(), "output_dir must be non-empty");
}

inline Json to_json(const ExperimentConfig& c) {
    const DatasetSpec& d = c.dataset;
    const MetricSpec& m = c.metric;
    const InterpolantSpec& i = c.interpolant;
    const VectorFieldSpec& v = c.vector_field;
    return Json{
        {"version", c.version},
        {"name", c.name},
        {"dataset",
         {{"kind", d.kind},
          {"n", d.n},
          {"spread", d.spread},
          {"radial_noise", d.radial_noise},
          {"marginals", d.marginals},
          {"dim", d.dim},
          {"step", d.step},
          {"sd", d.sd},
          {"path", d.path},
          {"time_column", d.time_column},
          {"features", d.features},
          {"whiten", d.whiten}}},
        {"split_fraction", c.split_fraction},
        {"metric",
         {{"kind", m.kind},
          {"sigma", m.sigma},
          {"epsilon", m.epsilon},
          {"nearest", m.nearest},
          {"clusters", m.clusters},
          {"kappa", m.kappa},
          {"epsilon_rule", m.epsilon_rule},
          {"power", m.power},
          {"rbf_epochs", m.rbf_epochs},
          {"rbf_lr", m.rbf_lr}}},
        {"coupling", c.coupling},
        {"batch_size", c.batch_size},
        {"interpolant",
         {{"mode", i.mode},
          {"width", i.width},
          {"depth", i.depth},
          {"lr", i.lr},
          {"epochs", i.epochs},
          {"patience", i.patience},
          {"fd_step", i.fd_step},
          {"use_time", i.use_time},
          {"gate", i.gate},
          {"normalize_by_straight_energy", i.normalize_by_straight_energy}}},
        {"vector_field",
         {{"width", v.width},
          {"depth", v.depth},
          {"lr", v.lr},
          {"weight_decay", v.weight_decay},
          {"epochs", v.epochs},
          {"patience", v.patience},
          {"norm_mode", v.norm_mode}}},
        {"inference",
         {{"steps", c.inference.steps},
          {"eval_points", c.inference.eval_points},
          {"emd_max_points", c.inference.emd_max_points},
          {"plot_trajectories", c.inference.plot_trajectories}}},
        {"protocol",
         {{"kind", c.protocol.kind}, {"left_out", c.protocol.left_out}, {"rollout_from", c.protocol.rollout_from}}},
        {"seed", c.seed},
        {"output_dir", c.output_dir}};
}

/// Missing keys keep their defaults; unknown keys are rejected. The result is validated.
inline ExperimentConfig config_from_json(const Json& j) {
    ExperimentConfig c;
    detail::ObjectReader r(j, "config");
    r.get("version", c.version);
    r.get("name", c.name);
    if (const Json* o = r.object("dataset")) {
        detail::ObjectReader s(*o, "dataset");
        DatasetSpec& d = c.dataset;
        s.get("kind", d.kind);
        s.get("n", d.n);
        s.get("spread", d.spread);
        s.get("radial_noise", d.radial_noise);
        s.get("marginals", d.marginals);
        s.get("dim", d.dim);
        s.get("step", d.step);
        s.get("sd", d.sd);
        s.get("path", d.path);
        s.get("time_column", d.time_column);
        s.get("features", d.features);
        s.get("whiten", d.whiten);
        s.finish();
    }
    r.get("split_fraction", c.split_fraction);
    if (const Json* o = r.object("metric")) {
        detail::ObjectReader s(*o, "metric");
        MetricSpec& m = c.metric;
        s.get("kind", m.kind);
        s.get("sigma", m.sigma);
        s.get("epsilon", m.epsilon);
        s.get("nearest", m.nearest);
        s.get("clusters", m.clusters);
        s.get("kappa", m.kappa);
        s.get("epsilon_rule", m.epsilon_rule);
        s.get("power", m.power);
        s.get("rbf_epochs", m.rbf_epochs);
        s.get("rbf_lr", m.rbf_lr);
        s.finish();
    }
    r.get("coupling", c.coupling);
    r.get("batch_size", c.batch_size);
    if (const Json* o = r.object("interpolant")) {
        detail::ObjectReader s(*o, "interpolant");
        InterpolantSpec& i = c.interpolant;
        s.get("mode", i.mode);
        s.get("width", i.width);
        s.get("depth", i.depth);
        s.get("lr", i.lr);
        s.get("epochs", i.epochs);
        s.get("patience", i.patience);
        s.get("fd_step", i.fd_step);
        s.get("use_time", i.use_time);
        s.get("gate", i.gate);
        s.get("normalize_by_straight_energy", i.normalize_by_straight_energy);
        s.finish();
    }
    if (const Json* o = r.object("vector_field")) {
        detail::ObjectReader s(*o, "vector_field");
        VectorFieldSpec& v = c.vector_field;
        s.get("width", v.width);
        s.get("depth", v.depth);
        s.get("lr", v.lr);
        s.get("weight_decay", v.weight_decay);
        s.get("epochs", v.epochs);
        s.get("patience", v.patience);
        s.get("norm_mode", v.norm_mode);
        s.finish();
    }
    if (const Json* o = r.object("inference")) {
        detail::ObjectReader s(*o, "inference");
        s.get("steps", c.inference.steps);
        s.get("eval_points", c.inference.eval_points);
        s.get("emd_max_points", c.inference.emd_max_points);
        s.get("plot_trajectories", c.inference.plot_trajectories);
        s.finish();
    }
    if (const Json* o = r.object("protocol")) {
        detail::ObjectReader s(*o, "protocol");
        s.get("kind", c.protocol.kind);
        s.get("left_out", c.protocol.left_out);
        s.get("rollout_from", c.protocol.rollout_from);
        s.finish();
    }
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    r.finish();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << to_json(c).dump(2) << '\n';
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

// ---------------------------------------------------------------------------
// hashing
// ---------------------------------------------------------------------------

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256: digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

inline std::string file_sha256(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return sha256_hex(os.str());
}

/// Hash of everything that affects results; the output location is excluded.
inline std::string config_hash(const ExperimentConfig& c) {
    Json j = to_json(c);
    j.erase("output_dir");
    return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"arch-land",        "arch-cfm",          "arch-icfm",   "sphere-land", "sphere-cfm",
            "gaussian-line-loo", "gaussian-line-cfm", "eb-land-loo", "eb-cfm-loo",  "cite-rbf-loo"};
}

/// Shipped configurations; CSV presets still need dataset.path.
inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    c.name = name;
    auto baseline = [&c] {
        c.metric.kind = "identity";
        c.interpolant.mode = "none";
    };
    if (name == "arch-land") {
        c.dataset.kind = "arch";
    } else if (name == "arch-cfm") {
        c.dataset.kind = "arch";
        baseline();
    } else if (name == "arch-icfm") {
        c.dataset.kind = "arch";
        baseline();
        c.coupling = "independent";
    } else if (name == "sphere-land") {
        c.dataset.kind = "sphere";
    } else if (name == "sphere-cfm") {
        c.dataset.kind = "sphere";
        baseline();
    } else if (name == "gaussian-line-loo" || name == "gaussian-line-cfm") {
        c.dataset.kind = "gaussian_line";
        c.dataset.n = 300;
        c.dataset.marginals = 3;
        c.dataset.dim = 2;
        c.protocol.kind = "leave_one_out";
        c.metric.kind = "identity";
        c.interpolant.mode = name == "gaussian-line-loo" ? "train" : "none";
        c.interpolant.epochs = 20;
        c.vector_field.epochs = 50;
    } else if (name == "eb-land-loo" || name == "eb-cfm-loo") {
        c.dataset.kind = "csv";
        c.dataset.whiten = true;
        c.protocol.kind = "leave_one_out";
        c.protocol.left_out = {1, 2, 3};
        if (name == "eb-cfm-loo") {
            baseline();
        }
    } else if (name == "cite-rbf-loo") {
        c.dataset.kind = "csv";
        c.protocol.kind = "leave_one_out";
        c.protocol.left_out = {1, 2};
        c.metric.kind = "rbf";
        c.metric.kappa = 1.5;
        c.metric.epsilon_rule = "complement";
        c.interpolant.width = 1024;
        c.vector_field.width = 1024;
    } else {
        throw ValidationError("unknown preset '" + name + "'");
    }
    return c;
}

} // namespace mfm
