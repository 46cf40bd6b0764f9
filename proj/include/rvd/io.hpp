#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rvd/diagnostics.hpp"
#include "rvd/simulation.hpp"

namespace rvd {

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

namespace detail {

inline const nlohmann::json& config_schema() {
    static const nlohmann::json schema = {
        {"datum", {{"delta", 0.0}, {"x_radius", 1.0}, {"p_radius", 1.0}, {"kappa", 2}}},
        {"n_per_axis", 4},
        {"seed", 0},
        {"dt", 0.01},
        {"t_final", 0.0},
        {"epsilon", 0.0},
        {"grid", {{"h", 0.0}, {"dims", 0}}},
        {"probes", {{"n", 12}, {"extent", 4.8}}},
        {"field_policy", "frozen"},
        {"solver", {{"tol", -1.0}, {"damping", 1.0}, {"max_iter", 200}, {"chunk", 256}}},
        {"diag_stride", 1},
        {"snapshot_stride", 0},
        {"output_dir", ""},
        {"abort_on_monitor", false},
        {"fs_beta", 0.0},
        {"meas_scale", 0.1},
        {"threads", 0},
    };
    return schema;
}

inline void reject_unknown_keys(const nlohmann::json& value, const nlohmann::json& schema,
                                const std::string& path) {
    if (!value.is_object()) return;
    for (auto it = value.begin(); it != value.end(); ++it) {
        std::string sub = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) throw ConfigError(sub, "unknown configuration key");
        reject_unknown_keys(it.value(), schema.at(it.key()), sub);
    }
}

inline nlohmann::json parse_scalar(const std::string& text) {
    nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
    if (v.is_discarded()) return nlohmann::json(text);  // bare string value
    return v;
}

template <class T>
T get_field(const nlohmann::json& j, const std::string& path, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path.empty() ? key : path + "." + key, "wrong value type");
    }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, detail::config_schema(), "");
    RunConfig cfg;
    if (j.contains("datum")) {
        const auto& d = j.at("datum");
        cfg.datum.delta = detail::get_field(d, "datum", "delta", cfg.datum.delta);
        cfg.datum.x_radius = detail::get_field(d, "datum", "x_radius", cfg.datum.x_radius);
        cfg.datum.p_radius = detail::get_field(d, "datum", "p_radius", cfg.datum.p_radius);
        cfg.datum.kappa = detail::get_field(d, "datum", "kappa", cfg.datum.kappa);
    }
    cfg.n_per_axis = detail::get_field(j, "", "n_per_axis", cfg.n_per_axis);
    cfg.seed = detail::get_field<std::uint64_t>(j, "", "seed", cfg.seed);
    cfg.dt = detail::get_field(j, "", "dt", cfg.dt);
    cfg.t_final = detail::get_field(j, "", "t_final", cfg.t_final);
    cfg.softening = detail::get_field(j, "", "epsilon", cfg.softening);
    if (j.contains("grid")) {
        cfg.grid_h = detail::get_field(j.at("grid"), "grid", "h", cfg.grid_h);
        cfg.grid_dims = detail::get_field(j.at("grid"), "grid", "dims", cfg.grid_dims);
    }
    if (j.contains("probes")) {
        cfg.probes.n = detail::get_field(j.at("probes"), "probes", "n", cfg.probes.n);
        cfg.probes.extent = detail::get_field(j.at("probes"), "probes", "extent", cfg.probes.extent);
    }
    std::string policy = detail::get_field<std::string>(j, "", "field_policy", "frozen");
    if (policy == "frozen")
        cfg.field_policy = FieldPolicy::frozen_per_step;
    else if (policy == "per-stage")
        cfg.field_policy = FieldPolicy::per_stage;
    else
        throw ConfigError("field_policy", "must be \"frozen\" or \"per-stage\"");
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        cfg.solver.tol = detail::get_field(s, "solver", "tol", cfg.solver.tol);
        cfg.solver.damping = detail::get_field(s, "solver", "damping", cfg.solver.damping);
        cfg.solver.max_iter = detail::get_field(s, "solver", "max_iter", cfg.solver.max_iter);
        cfg.solver.parallel_chunk = detail::get_field(s, "solver", "chunk", cfg.solver.parallel_chunk);
    }
    cfg.diag_stride = detail::get_field(j, "", "diag_stride", cfg.diag_stride);
    cfg.snapshot_stride = detail::get_field(j, "", "snapshot_stride", cfg.snapshot_stride);
    cfg.output_dir = detail::get_field<std::string>(j, "", "output_dir", cfg.output_dir);
    cfg.abort_on_monitor = detail::get_field(j, "", "abort_on_monitor", cfg.abort_on_monitor);
    cfg.fs_beta = detail::get_field(j, "", "fs_beta", cfg.fs_beta);
    cfg.meas_scale = detail::get_field(j, "", "meas_scale", cfg.meas_scale);
    cfg.threads = detail::get_field(j, "", "threads", cfg.threads);
    cfg.validate();
    return cfg;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["datum"] = {{"delta", cfg.datum.delta},
                  {"x_radius", cfg.datum.x_radius},
                  {"p_radius", cfg.datum.p_radius},
                  {"kappa", cfg.datum.kappa}};
    j["n_per_axis"] = cfg.n_per_axis;
    j["seed"] = cfg.seed;
    j["dt"] = cfg.dt;
    j["t_final"] = cfg.t_final;
    j["epsilon"] = cfg.softening;
    j["grid"] = {{"h", cfg.grid_h}, {"dims", cfg.grid_dims}};
    j["probes"] = {{"n", cfg.probes.n}, {"extent", cfg.probes.extent}};
    j["field_policy"] = cfg.field_policy == FieldPolicy::frozen_per_step ? "frozen" : "per-stage";
    j["solver"] = {{"tol", cfg.solver.tol},
                   {"damping", cfg.solver.damping},
                   {"max_iter", cfg.solver.max_iter},
                   {"chunk", cfg.solver.parallel_chunk}};
    j["diag_stride"] = cfg.diag_stride;
    j["snapshot_stride"] = cfg.snapshot_stride;
    j["output_dir"] = cfg.output_dir;
    j["abort_on_monitor"] = cfg.abort_on_monitor;
    j["fs_beta"] = cfg.fs_beta;
    j["meas_scale"] = cfg.meas_scale;
    j["threads"] = cfg.threads;
    return j;
}

// Applies dotted-path overrides ("datum.delta=0.01") on top of the file JSON.
inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json j;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config", "cannot open file: " + path);
        j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError("config", "malformed JSON in " + path);
        if (!j.is_object()) throw ConfigError("config", "top level must be a JSON object");
    } else {
        j = nlohmann::json::object();
    }
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("overrides", "expected key=value: " + ov);
        std::string key = ov.substr(0, eq);
        nlohmann::json value = detail::parse_scalar(ov.substr(eq + 1));
        nlohmann::json* node = &j;
        std::size_t pos = 0;
        while (true) {
            auto dot = key.find('.', pos);
            std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
            if (part.empty()) throw ConfigError(key, "empty key segment");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Series CSV (frozen column contract)
// ---------------------------------------------------------------------------

inline const char* series_csv_header() {
    return "t,sup_rho,sup_j,sup_grad_phi,sup_grad_a,sup_dtA,sup_d2phi,sup_d2a,l2_dtdxA,"
           "l2_sqrtrho_dtA,energy,gauge_residual,continuity_residual,x_bar,p_bar,h_drift,"
           "fs_ok_1,fs_ok_2";
}

// Shortest round-trip decimal formatting.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string series_csv_row(const RunRecordRow& r) {
    std::string out;
    auto add = [&](double v) {
        out += format_double(v);
        out += ',';
    };
    add(r.t);
    add(r.sup_rho);
    add(r.sup_j);
    add(r.sup_grad_phi);
    add(r.sup_grad_a);
    add(r.sup_dtA);
    add(r.sup_d2phi);
    add(r.sup_d2a);
    add(r.l2_dtdxA);
    add(r.l2_sqrtrho_dtA);
    add(r.energy);
    add(r.gauge_residual);
    add(r.continuity_residual);
    add(r.x_bar);
    add(r.p_bar);
    add(r.h_drift);
    out += r.fs_ok_1 ? "1," : "0,";
    out += r.fs_ok_2 ? "1" : "0";
    return out;
}

inline void write_series_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << series_csv_header() << '\n';
    for (const auto& r : rec.rows) out << series_csv_row(r) << '\n';
}

inline RunRecord read_series_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty series file " + path);
    if (line != series_csv_header()) throw IoError("unexpected series header in " + path);
    RunRecord rec;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> vals;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            auto comma = line.find(',', pos);
            std::string tok = line.substr(pos, comma == std::string::npos ? comma : comma - pos);
            double v = 0.0;
            auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (res.ec != std::errc()) throw IoError("bad numeric field in " + path);
            vals.push_back(v);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (vals.size() != 18) throw IoError("wrong column count in " + path);
        RunRecordRow r;
        r.t = vals[0];
        r.sup_rho = vals[1];
        r.sup_j = vals[2];
        r.sup_grad_phi = vals[3];
        r.sup_grad_a = vals[4];
        r.sup_dtA = vals[5];
        r.sup_d2phi = vals[6];
        r.sup_d2a = vals[7];
        r.l2_dtdxA = vals[8];
        r.l2_sqrtrho_dtA = vals[9];
        r.energy = vals[10];
        r.gauge_residual = vals[11];
        r.continuity_residual = vals[12];
        r.x_bar = vals[13];
        r.p_bar = vals[14];
        r.h_drift = vals[15];
        r.fs_ok_1 = vals[16] != 0.0;
        r.fs_ok_2 = vals[17] != 0.0;
        rec.rows.push_back(r);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Marker snapshots
// ---------------------------------------------------------------------------

inline void write_snapshot_json(const Ensemble& e, const std::string& path) {
    nlohmann::json j;
    j["t"] = e.time;
    j["softening"] = e.softening;
    j["n"] = e.size();
    auto markers = nlohmann::json::array();
    for (const auto& m : e.markers)
        markers.push_back({m.x.x, m.x.y, m.x.z, m.pi.x, m.pi.y, m.pi.z, m.w});
    j["markers"] = std::move(markers);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump();
}

// ---------------------------------------------------------------------------
// SVG decay panels
// ---------------------------------------------------------------------------

// Log-log panel of one series with its fitted slope annotated.
inline void write_decay_svg(const std::string& path, const std::string& title,
                            const std::vector<double>& t, const std::vector<double>& v,
                            const DecayFit& fit, double t0, double t1) {
    const int w = 640, h = 440, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] <= 0.0 || v[i] <= 0.0) continue;
        double x = std::log10(t[i]), y = std::log10(v[i]);
        pts.push_back({x, y});
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    if (pts.empty()) {
        xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
    }
    if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
    if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
        << "</text>\n";
    // axes
    svg << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    for (int k = std::ceil(xmin); k <= std::floor(xmax); ++k) {
        svg << "<line x1='" << px(k) << "' y1='" << h - mb << "' x2='" << px(k) << "' y2='"
            << h - mb + 5 << "' stroke='black'/>\n";
        svg << "<text x='" << px(k) << "' y='" << h - mb + 20
            << "' text-anchor='middle' font-size='11'>1e" << k << "</text>\n";
    }
    for (int k = std::ceil(ymin); k <= std::floor(ymax); ++k) {
        svg << "<line x1='" << ml - 5 << "' y1='" << py(k) << "' x2='" << ml << "' y2='" << py(k)
            << "' stroke='black'/>\n";
        svg << "<text x='" << ml - 8 << "' y='" << py(k) + 4
            << "' text-anchor='end' font-size='11'>1e" << k << "</text>\n";
    }
    svg << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 12
        << "' text-anchor='middle' font-size='12'>t</text>\n";
    // data polyline
    if (!pts.empty()) {
        svg << "<polyline fill='none' stroke='#1f77b4' stroke-width='1.5' points='";
        for (const auto& [x, y] : pts) svg << px(x) << ',' << py(y) << ' ';
        svg << "'/>\n";
    }
    // fit segment over the window
    if (t1 > t0 && fit.points >= 2) {
        double x0 = std::log10(t0), x1 = std::log10(t1);
        // anchor the fit line at the data midpoint of the window
        double xm = 0.0, ym = 0.0;
        int cnt = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] < t0 || t[i] > t1 || v[i] <= 0.0) continue;
            xm += std::log10(t[i]);
            ym += std::log10(v[i]);
            ++cnt;
        }
        if (cnt > 0) {
            xm /= cnt;
            ym /= cnt;
            double s = fit.exponent;  // slope in log10-log10 equals the exponent
            svg << "<line x1='" << px(x0) << "' y1='" << py(ym + s * (x0 - xm)) << "' x2='"
                << px(x1) << "' y2='" << py(ym + s * (x1 - xm))
                << "' stroke='#d62728' stroke-dasharray='6,4' stroke-width='1.5'/>\n";
        }
        svg << "<text x='" << w - mr - 8 << "' y='" << mt + 16
            << "' text-anchor='end' font-size='13' fill='#d62728'>slope " << std::fixed
            << fit.exponent << " (r2 " << fit.r_squared << ")</text>\n";
    }
    svg << "</svg>\n";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << svg.str();
}

}  // namespace rvd
