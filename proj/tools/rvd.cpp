// Command-line driver: simulate | picard | verify-kernels | decay-study | lifespan.
// Exit codes: 0 success, 2 config error, 3 field non-convergence, 4 verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rvd/io.hpp"
#include "rvd/verify.hpp"

namespace fs = std::filesystem;
using namespace rvd;

namespace {

struct CliState {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    int threads = 0;
};

RunConfig load_config(const CliState& cli) {
    RunConfig cfg = parse_config(cli.config_path, cli.overrides);
    if (!cli.out_dir.empty()) cfg.output_dir = cli.out_dir;
    if (cfg.output_dir.empty()) cfg.output_dir = "out";
    if (cli.threads > 0) cfg.threads = cli.threads;
    if (cfg.threads > 0) set_threads(cfg.threads);
    return cfg;
}

// Fail-fast output probe before any computation starts.
void prepare_output_dir(const RunConfig& cfg) {
    fs::create_directories(cfg.output_dir);
    std::ofstream probe(fs::path(cfg.output_dir) / ".write_probe");
    if (!probe) throw IoError("output directory not writable: " + cfg.output_dir);
    probe.close();
    fs::remove(fs::path(cfg.output_dir) / ".write_probe");
}

void echo_resolved(const RunConfig& cfg) {
    auto e = sample_bump(cfg.datum, cfg.n_per_axis, cfg.seed);
    RunConfig res = cfg.resolved(e.size());
    std::ofstream out(fs::path(cfg.output_dir) / "config.resolved.json");
    out << config_to_json(res).dump(2) << '\n';
}

int run_simulate(const RunConfig& cfg, RunRecord* out_record = nullptr) {
    prepare_output_dir(cfg);
    echo_resolved(cfg);

    fs::path dir(cfg.output_dir);
    std::ofstream series(dir / "series.csv");
    if (!series) throw IoError("cannot write series.csv");
    series << series_csv_header() << '\n';
    if (cfg.snapshot_stride > 0) fs::create_directories(dir / "snapshots");

    RunHooks hooks;
    hooks.on_row = [&](const RunRecordRow& row, std::size_t) {
        series << series_csv_row(row) << '\n';
        series.flush();
    };
    hooks.on_snapshot = [&](const Ensemble& e, std::size_t step) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04zu.json", step);
        write_snapshot_json(e, (dir / "snapshots" / name).string());
    };

    RunRecord rec = run_simulation(cfg, hooks);
    auto fs_rep = fs_monitor(rec, cfg.datum, rec.fs_beta);
    std::cout << "rows: " << rec.rows.size() << "  fs_beta: " << format_double(rec.fs_beta)
              << "  fs_all_ok: " << (fs_rep.fs_all_ok ? "yes" : "no")
              << "  p_bar_max: " << format_double(fs_rep.max_p_bar) << '\n';
    if (rec.aborted) {
        std::cerr << "run aborted: " << rec.abort_reason << '\n';
        if (out_record) *out_record = std::move(rec);
        return 3;
    }
    if (out_record) *out_record = std::move(rec);
    return 0;
}

int run_decay_study(const RunConfig& cfg, double fit_t0, double fit_t1) {
    RunRecord rec;
    int rc = run_simulate(cfg, &rec);
    if (rc != 0) return rc;

    fs::path plots = fs::path(cfg.output_dir) / "plots";
    fs::create_directories(plots);

    struct Column {
        const char* name;
        std::function<double(const RunRecordRow&)> get;
        bool log_correction;
    };
    std::vector<Column> cols{
        {"sup_rho", [](const RunRecordRow& r) { return r.sup_rho; }, false},
        {"sup_j", [](const RunRecordRow& r) { return r.sup_j; }, false},
        {"sup_grad_phi", [](const RunRecordRow& r) { return r.sup_grad_phi; }, false},
        {"sup_grad_a", [](const RunRecordRow& r) { return r.sup_grad_a; }, false},
        {"sup_dtA", [](const RunRecordRow& r) { return r.sup_dtA; }, false},
        {"sup_d2phi", [](const RunRecordRow& r) { return r.sup_d2phi; }, true},
        {"sup_d2a", [](const RunRecordRow& r) { return r.sup_d2a; }, true},
        {"l2_dtdxA", [](const RunRecordRow& r) { return r.l2_dtdxA; }, false},
        {"l2_sqrtrho_dtA", [](const RunRecordRow& r) { return r.l2_sqrtrho_dtA; }, false},
    };

    double t_end = rec.rows.empty() ? 0.0 : rec.rows.back().t;
    if (fit_t1 <= 0.0) fit_t1 = t_end;
    if (fit_t0 <= 0.0) fit_t0 = std::max(1.0, 0.2 * fit_t1);

    nlohmann::json fits = nlohmann::json::object();
    for (const auto& col : cols) {
        std::vector<double> t, v;
        for (const auto& r : rec.rows) {
            t.push_back(r.t);
            v.push_back(col.get(r));
        }
        try {
            auto fit = decay_fit(t, v, fit_t0, fit_t1, col.log_correction);
            fits[col.name] = {{"exponent", fit.exponent},
                              {"r_squared", fit.r_squared},
                              {"points", fit.points},
                              {"log_correction", col.log_correction}};
            std::string title = std::string(col.name) + (col.log_correction ? " (log-corrected fit)" : "");
            write_decay_svg((plots / (std::string(col.name) + ".svg")).string(), title, t, v, fit,
                            fit_t0, fit_t1);
            std::cout << col.name << ": exponent " << format_double(fit.exponent) << " (r2 "
                      << format_double(fit.r_squared) << ")\n";
        } catch (const FitUndefinedError& err) {
            fits[col.name] = {{"error", err.what()}};
            std::cout << col.name << ": fit undefined (" << err.what() << ")\n";
        }
    }
    std::ofstream jf(fs::path(cfg.output_dir) / "fits.json");
    jf << fits.dump(2) << '\n';
    return 0;
}

int run_picard_cmd(const RunConfig& cfg, int iterates, double t_bar) {
    prepare_output_dir(cfg);
    echo_resolved(cfg);
    auto life = lifespan_bound(cfg.datum);
    if (t_bar <= 0.0) {
        if (!std::isfinite(life.t_star))
            throw ConfigError("t_bar", "zero datum has an infinite life span; pass --t-bar");
        t_bar = life.t_star / 4.0;
    }
    auto result = run_picard(cfg, iterates, t_bar);
    std::ofstream out(fs::path(cfg.output_dir) / "picard.csv");
    out << "iterate,sup_difference\n";
    for (const auto& it : result.iterates) {
        out << it.index << ',' << format_double(it.sup_difference) << '\n';
        std::cout << "iterate " << it.index << ": sup_difference "
                  << format_double(it.sup_difference) << '\n';
    }
    return 0;
}

int run_lifespan(const RunConfig& cfg) {
    prepare_output_dir(cfg);
    std::vector<double> times;
    std::size_t n_steps = static_cast<std::size_t>(std::llround(cfg.t_final / cfg.dt));
    for (std::size_t i = 0; i <= n_steps; ++i) times.push_back(i * cfg.dt);
    auto rep = lifespan_bound(cfg.datum, times);
    nlohmann::json j;
    j["c_f0"] = rep.c_f0;
    j["t_star"] = std::isfinite(rep.t_star) ? nlohmann::json(rep.t_star) : nlohmann::json("inf");
    j["p0"] = rep.p0;
    j["t"] = rep.sample_times;
    j["p_curve"] = rep.p_curve;
    std::ofstream out(fs::path(cfg.output_dir) / "lifespan.json");
    out << j.dump(2) << '\n';
    std::cout << "c_f0: " << format_double(rep.c_f0) << "  t_star: "
              << (std::isfinite(rep.t_star) ? format_double(rep.t_star) : "inf") << '\n';
    return 0;
}

int run_verify() {
    auto results = verify_kernels();
    bool all = true;
    for (const auto& r : results) {
        std::printf("%-28s %s  (worst %.3e, limit %.1e)\n", r.name.c_str(),
                    r.pass ? "PASS" : "FAIL", r.worst, r.limit);
        all = all && r.pass;
    }
    return all ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Smoothed-particle solver and verification suite for the relativistic "
                 "Vlasov-Darwin system in generalized variables"};
    app.require_subcommand(1);
    app.fallthrough();

    CliState cli;
    app.add_option("--config", cli.config_path, "JSON run configuration");
    app.add_option("--set", cli.overrides, "key=value override (repeatable, dotted paths)");
    app.add_option("--out", cli.out_dir, "output directory");
    app.add_option("--threads", cli.threads, "worker threads (default: RVD_THREADS or all cores)");

    auto* sim = app.add_subcommand("simulate", "run the time-stepping driver");
    auto* pic = app.add_subcommand("picard", "run the local-existence iteration mode");
    int iterates = 6;
    double t_bar = 0.0;
    pic->add_option("--iterates", iterates, "number of Picard iterates");
    pic->add_option("--t-bar", t_bar, "iteration horizon (default: t_star / 4)");
    auto* ver = app.add_subcommand("verify-kernels", "run the kernel/dynamics verification suite");
    auto* dec = app.add_subcommand("decay-study", "run and fit decay exponents, emit SVG panels");
    double fit_t0 = 0.0, fit_t1 = 0.0;
    dec->add_option("--fit-t0", fit_t0, "fit window start (default: max(1, t_final/5))");
    dec->add_option("--fit-t1", fit_t1, "fit window end (default: t_final)");
    auto* life = app.add_subcommand("lifespan", "evaluate the a-priori life-span bound");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ver->parsed()) return run_verify();
        RunConfig cfg = load_config(cli);
        if (sim->parsed()) return run_simulate(cfg);
        if (pic->parsed()) return run_picard_cmd(cfg, iterates, t_bar);
        if (dec->parsed()) return run_decay_study(cfg, fit_t0, fit_t1);
        if (life->parsed()) return run_lifespan(cfg);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return 2;
    } catch (const NonConvergenceError& err) {
        std::cerr << "field solve failed: " << err.what() << '\n';
        return 3;
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 2;
    }
    return 0;
}
