// mfm: command-line driver for the two-stage pipeline.
//
// Exit codes: 0 success, 1 invalid arguments/config/data, 2 runtime or numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mfm/mfm.hpp"

namespace {

using namespace mfm;

struct CommonArgs {
    std::string config;
    std::string preset;
    std::vector<std::uint64_t> seeds;
    std::string out;
    std::string data;
};

void add_common(CLI::App* app, CommonArgs& a, bool many_seeds = false) {
    auto* cfg = app->add_option("--config", a.config, "experiment config (JSON)");
    auto* pre = app->add_option("--preset", a.preset, "shipped preset name (see `mfm presets`)");
    cfg->excludes(pre);
    if (many_seeds) {
        app->add_option("--seed", a.seeds, "seed(s); repeat or list to run several");
    } else {
        app->add_option("--seed", a.seeds, "seed")->expected(1);
    }
    app->add_option("--out", a.out, "output directory (overrides output_dir)");
    app->add_option("--data", a.data, "CSV path (overrides dataset.path)");
}

ExperimentConfig resolve(const CommonArgs& a) {
    ExperimentConfig c;
    if (!a.config.empty()) {
        c = load_config(a.config);
    } else if (!a.preset.empty()) {
        c = preset(a.preset);
    } else {
        throw ValidationError("one of --config or --preset is required");
    }
    if (!a.seeds.empty()) {
        c.seed = a.seeds.front();
    }
    if (!a.out.empty()) {
        c.output_dir = a.out;
    }
    if (!a.data.empty()) {
        c.dataset.path = a.data;
    }
    c.validate();
    return c;
}

void print_reports(const std::vector<EvalReport>& reports) {
    for (const auto& r : reports) {
        std::printf("%-24s %.6f", r.metric.c_str(), r.value);
        if (r.left_out) {
            std::printf("  (left out %zu)", *r.left_out);
        }
        std::printf("  seed %llu\n", static_cast<unsigned long long>(r.seed));
    }
}

int cmd_generate(const std::string& dataset, std::size_t n, std::uint64_t seed, std::size_t marginals,
                 std::size_t dim, const std::string& out) {
    const fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
    std::vector<std::string> files;
    if (dataset == "arch" || dataset == "sphere") {
        const SyntheticData s = dataset == "arch" ? generate_arch(n, seed) : generate_sphere(n, seed);
        save_points_csv(dir / "source.csv", s.source);
        save_points_csv(dir / "target.csv", s.target);
        save_points_csv(dir / "truth.csv", s.truth);
        files = {"source.csv", "target.csv", "truth.csv"};
    } else if (dataset == "gaussian_line") {
        save_marginals_csv(dir / "marginals.csv", generate_gaussian_line(n, marginals, dim, seed));
        files = {"marginals.csv"};
    } else {
        throw ValidationError("unknown dataset '" + dataset + "' (arch, sphere, gaussian_line)");
    }
    Json m = {{"dataset", dataset}, {"n", n}, {"seed", seed}, {"files", Json::array()}};
    for (const auto& f : files) {
        m["files"].push_back({{"path", f}, {"sha256", file_sha256(dir / f)}});
    }
    std::ofstream mo(dir / "manifest.json");
    mo << m.dump(2) << '\n';
    if (!mo) {
        throw IoError("cannot write manifest in " + dir.string());
    }
    for (const auto& f : files) {
        std::printf("wrote %s\n", (dir / f).string().c_str());
    }
    return 0;
}

int cmd_stages(const CommonArgs& a, Stage until, bool require_checkpoints) {
    const ExperimentConfig c = resolve(a);
    RunOptions opt;
    opt.until = until;
    opt.require_checkpoints = require_checkpoints;
    if (c.protocol.kind == "leave_one_out") {
        const LooOutcome o = run_leave_one_out(c, opt);
        std::printf("run directory %s\n", o.dir.string().c_str());
        print_reports(o.reports);
        return 0;
    }
    const RunOutcome o = run_experiment(c, opt);
    std::printf("run directory %s\n", o.dir.string().c_str());
    print_reports(o.reports);
    return 0;
}

int cmd_loo(const CommonArgs& a) {
    ExperimentConfig c = resolve(a);
    if (c.protocol.kind != "leave_one_out") {
        c.protocol.kind = "leave_one_out";
        c.interpolant.gate = c.interpolant.gate == "auto" ? "quadratic" : c.interpolant.gate;
        c.validate();
    }
    std::vector<std::uint64_t> seeds = a.seeds;
    if (seeds.empty()) {
        seeds.push_back(c.seed);
    }
    std::vector<EvalReport> rows;
    for (std::uint64_t s : seeds) {
        c.seed = s;
        const LooOutcome o = run_leave_one_out(c);
        std::printf("run directory %s\n", o.dir.string().c_str());
        rows.insert(rows.end(), o.reports.begin(), o.reports.end());
    }
    print_reports(rows);
    const fs::path summary = fs::path(c.output_dir) / (c.name + "-loo_summary.csv");
    write_loo_summary(summary, rows);
    for (const auto& g : aggregate_loo(rows)) {
        std::printf("%-12s left_out=%-4s mean %.6f std %.6f (n=%zu)\n", g.pooling.c_str(),
                    g.left_out ? std::to_string(*g.left_out).c_str() : "all", g.mean, g.stddev, g.count);
    }
    std::printf("wrote %s\n", summary.string().c_str());
    return 0;
}

int cmd_oracle(const CommonArgs& a, std::size_t pairs, std::size_t segments) {
    const ExperimentConfig c = resolve(a);
    if (c.protocol.kind != "pairwise") {
        throw ValidationError("oracle: use a pairwise config");
    }
    if (c.metric.kind == "identity") {
        throw ValidationError("oracle: the identity metric has straight geodesics; nothing to solve");
    }
    RunOptions opt;
    opt.until = Stage::Interpolant;
    const RunOutcome run = run_experiment(c, opt);
    const std::vector<OracleRow> rows = oracle_study(c, run, pairs, segments);
    write_oracle_csv(run.dir / "oracle.csv", rows);
    write_oracle_paths_csv(run.dir / "oracle_paths.csv", rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const OracleRow& r = rows[i];
        std::printf("pair %2zu chord %.5g geodesic %.5g interpolant %.5g gap %+.3f%s\n", i, r.chord_energy,
                    r.geodesic_energy, r.interpolant_energy, r.relative_gap, r.converged ? "" : " (not converged)");
    }
    std::printf("wrote %s\n", (run.dir / "oracle.csv").string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Metric flow matching: learned-metric interpolants and flow matching"};
    app.require_subcommand(1);

    std::string gen_dataset = "arch";
    std::size_t gen_n = 5000;
    std::uint64_t gen_seed = 0;
    std::size_t gen_marginals = 3;
    std::size_t gen_dim = 2;
    std::string gen_out;
    auto* gen = app.add_subcommand("generate", "write synthetic datasets as CSV");
    gen->add_option("--dataset", gen_dataset, "arch | sphere | gaussian_line")->capture_default_str();
    gen->add_option("--n", gen_n, "points per marginal")->capture_default_str();
    gen->add_option("--seed", gen_seed, "seed")->capture_default_str();
    gen->add_option("--marginals", gen_marginals, "gaussian_line: number of marginals")->capture_default_str();
    gen->add_option("--dim", gen_dim, "gaussian_line: dimension")->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();

    CommonArgs common;
    struct Sub {
        const char* name;
        const char* help;
        Stage until;
        bool require;
    };
    const std::vector<Sub> subs = {
        {"train-metric", "stage 0: build or fit the metric", Stage::Metric, false},
        {"train-interpolant", "stages 0-1: metric, then the geodesic interpolant", Stage::Interpolant, false},
        {"train-vf", "stage 2: vector field on the frozen interpolant (stage 1 must exist)", Stage::VectorField,
         true},
        {"train", "all stages and evaluation", Stage::Eval, false},
        {"eval", "evaluate existing checkpoints", Stage::Eval, true},
    };
    std::vector<CLI::App*> stage_apps;
    for (const auto& s : subs) {
        auto* sub = app.add_subcommand(s.name, s.help);
        add_common(sub, common);
        stage_apps.push_back(sub);
    }

    auto* loo = app.add_subcommand("loo", "leave-one-out marginal reconstruction");
    add_common(loo, common, true);

    std::size_t oracle_pairs = 20;
    std::size_t oracle_segments = 64;
    auto* orc = app.add_subcommand("oracle", "compare the interpolant with discrete geodesics");
    add_common(orc, common);
    orc->add_option("--pairs", oracle_pairs, "number of endpoint pairs")->capture_default_str();
    orc->add_option("--segments", oracle_segments, "polyline segments M")->capture_default_str();

    std::string show_preset;
    auto* presets = app.add_subcommand("presets", "list presets, or print one as JSON");
    presets->add_option("name", show_preset, "preset to print");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            return cmd_generate(gen_dataset, gen_n, gen_seed, gen_marginals, gen_dim, gen_out);
        }
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (stage_apps[i]->parsed()) {
                return cmd_stages(common, subs[i].until, subs[i].require);
            }
        }
        if (loo->parsed()) {
            return cmd_loo(common);
        }
        if (orc->parsed()) {
            return cmd_oracle(common, oracle_pairs, oracle_segments);
        }
        if (presets->parsed()) {
            if (show_preset.empty()) {
                for (const auto& n : preset_names()) {
                    std::printf("%s\n", n.c_str());
                }
            } else {
                std::printf("%s\n", to_json(preset(show_preset)).dump(2).c_str());
            }
            return 0;
        }
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
