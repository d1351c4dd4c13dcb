#pragma once

// Versioned flat-text archive shared by every checkpoint in the project.
//
//   mfm-archive 1
//   kind <kind>
//   meta <key> <value>            (zero or more)
//   tensor <name> <rows> <cols>   (followed by `rows` lines of row-major values)
//   end
//
// Values use the shortest decimal form that parses back to the same double,
// so save/load round-trips bit-exactly.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfm/nn/mlp.hpp"
#include "mfm/types.hpp"

namespace mfm::nn {

inline constexpr int kArchiveVersion = 1;

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (!s.empty() && *first == '+') {
        ++first;
    }
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) {
        // from_chars rejects "inf"/"nan" spellings on some libraries; fall back.
        if (s == "nan" || s == "-nan") {
            return std::numeric_limits<double>::quiet_NaN();
        }
        if (s == "inf") {
            return std::numeric_limits<double>::infinity();
        }
        if (s == "-inf") {
            return -std::numeric_limits<double>::infinity();
        }
        throw IoError("cannot parse number '" + std::string(s) + "'");
    }
    return v;
}

struct Archive {
    std::string kind;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Matrix>> tensors;

    void set_meta(const std::string& key, const std::string& value) {
        if (key.find_first_of(" \t\n") != std::string::npos || value.find('\n') != std::string::npos) {
            throw ContractError("archive meta key/value contains whitespace: " + key);
        }
        for (auto& [k, v] : meta) {
            if (k == key) {
                v = value;
                return;
            }
        }
        meta.emplace_back(key, value);
    }

    void set_meta(const std::string& key, double value) { set_meta(key, format_double(value)); }

    [[nodiscard]] bool has_meta(const std::string& key) const {
        for (const auto& [k, v] : meta) {
            if (k == key) {
                return true;
            }
        }
        return false;
    }

    [[nodiscard]] const std::string& meta_value(const std::string& key) const {
        for (const auto& [k, v] : meta) {
            if (k == key) {
                return v;
            }
        }
        throw IoError("archive '" + kind + "': missing meta '" + key + "'");
    }

    [[nodiscard]] double meta_double(const std::string& key) const { return parse_double(meta_value(key)); }

    void add_tensor(const std::string& name, Matrix m) { tensors.emplace_back(name, std::move(m)); }

    [[nodiscard]] const Matrix& tensor(const std::string& name) const {
        for (const auto& [n, m] : tensors) {
            if (n == name) {
                return m;
            }
        }
        throw IoError("archive '" + kind + "': missing tensor '" + name + "'");
    }

    [[nodiscard]] std::string to_string() const {
        std::ostringstream os;
        os << "mfm-archive " << kArchiveVersion << '\n';
        os << "kind " << kind << '\n';
        for (const auto& [k, v] : meta) {
            os << "meta " << k << ' ' << v << '\n';
        }
        for (const auto& [name, m] : tensors) {
            os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    if (c > 0) {
                        os << ' ';
                    }
                    os << format_double(m(r, c));
                }
                os << '\n';
            }
        }
        os << "end\n";
        return os.str();
    }

    static Archive parse(const std::string& text) {
        std::istringstream is(text);
        std::string tag;
        int version = 0;
        if (!(is >> tag >> version) || tag != "mfm-archive") {
            throw IoError("not an mfm archive");
        }
        if (version != kArchiveVersion) {
            throw IoError("unsupported archive version " + std::to_string(version));
        }
        Archive a;
        if (!(is >> tag >> a.kind) || tag != "kind") {
            throw IoError("archive: missing kind line");
        }
        while (is >> tag) {
            if (tag == "end") {
                return a;
            }
            if (tag == "meta") {
                std::string key;
                std::string value;
                is >> key;
                std::getline(is, value);
                if (!value.empty() && value.front() == ' ') {
                    value.erase(0, 1);
                }
                a.meta.emplace_back(key, value);
            } else if (tag == "tensor") {
                std::string name;
                Eigen::Index rows = 0;
                Eigen::Index cols = 0;
                if (!(is >> name >> rows >> cols) || rows < 0 || cols < 0) {
                    throw IoError("archive: bad tensor header");
                }
                Matrix m(rows, cols);
                std::string tok;
                for (Eigen::Index i = 0; i < rows * cols; ++i) {
                    if (!(is >> tok)) {
                        throw IoError("archive: truncated tensor '" + name + "'");
                    }
                    m.data()[i] = parse_double(tok);
                }
                a.tensors.emplace_back(name, std::move(m));
            } else {
                throw IoError("archive: unexpected token '" + tag + "'");
            }
        }
        throw IoError("archive: missing end marker");
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        out << to_string();
        if (!out) {
            throw IoError("write failed for " + path.string());
        }
    }

    static Archive load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot read " + path.string());
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }
};

/// Writes the network into `a` with tensor names prefix+"w<l>" / prefix+"b<l>".
inline void store_mlp(Archive& a, const MlpParams& p, const std::string& prefix = "") {
    p.validate();
    a.set_meta(prefix + "layers", std::to_string(p.num_layers()));
    a.set_meta(prefix + "activation", to_string(p.hidden_activation));
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        a.add_tensor(prefix + "w" + std::to_string(l), p.weights[l]);
        a.add_tensor(prefix + "b" + std::to_string(l), p.biases[l]);
    }
}

inline MlpParams load_mlp(const Archive& a, const std::string& prefix = "") {
    MlpParams p;
    const auto layers = std::stoul(a.meta_value(prefix + "layers"));
    p.hidden_activation = activation_from_string(a.meta_value(prefix + "activation"));
    for (std::size_t l = 0; l < layers; ++l) {
        p.weights.push_back(a.tensor(prefix + "w" + std::to_string(l)));
        p.biases.push_back(a.tensor(prefix + "b" + std::to_string(l)));
    }
    p.validate();
    return p;
}

inline Archive to_archive(const MlpParams& p) {
    Archive a;
    a.kind = "mlp";
    store_mlp(a, p);
    return a;
}

inline MlpParams mlp_from_archive(const Archive& a) {
    if (a.kind != "mlp") {
        throw IoError("expected an mlp archive, got '" + a.kind + "'");
    }
    return load_mlp(a);
}

} // namespace mfm::nn
