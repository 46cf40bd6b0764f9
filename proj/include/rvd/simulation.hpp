#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "rvd/diagnostics.hpp"
#include "rvd/dynamics.hpp"
#include "rvd/field_solver.hpp"
#include "rvd/phase_space.hpp"

namespace rvd {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct ProbeGridSpec {
    int n = 12;           // probes per axis
    double extent = 4.8;  // cube [-extent, extent]^3
    double spacing() const { return 2.0 * extent / n; }
};

enum class FieldPolicy { frozen_per_step, per_stage };

struct RunConfig {
    BumpDatum datum;
    int n_per_axis = 4;
    std::uint64_t seed = 0;
    double dt = 0.01;
    double t_final = 0.0;
    double softening = 0.0;  // 0: 0.2 * marker pitch
    double grid_h = 0.0;     // 0: marker pitch
    int grid_dims = 0;       // 0: cbrt(N) + 6
    ProbeGridSpec probes;
    FieldPolicy field_policy = FieldPolicy::frozen_per_step;
    SolverOptions solver;
    int diag_stride = 1;
    int snapshot_stride = 0;  // 0: no snapshots
    std::string output_dir;
    bool abort_on_monitor = false;
    double fs_beta = 0.0;     // 0: calibrate at t = 0 with a factor-2 margin
    double meas_scale = 0.1;  // measurement aperture max(eps, meas_scale (X0 + t))
    int threads = 0;

    double marker_pitch() const { return 2.0 * datum.x_radius / n_per_axis; }

    // Kernel width for probe and sup-norm measurements: the field is read at
    // the resolution the spreading marker set supports, so single-marker
    // near-field spikes do not stand in for the smooth-field sup norms.
    double measurement_aperture(double t) const {
        double eps = softening > 0.0 ? softening : 0.2 * marker_pitch();
        if (meas_scale <= 0.0) return eps;
        return std::max(eps, meas_scale * (datum.x_radius + t));
    }

    void validate() const {
        datum.validate();
        if (n_per_axis < 2) throw ConfigError("n_per_axis", "must be >= 2");
        if (!(dt > 0.0)) throw ConfigError("dt", "must be > 0");
        if (!(t_final >= 0.0)) throw ConfigError("t_final", "must be >= 0");
        if (softening < 0.0) throw ConfigError("epsilon", "must be >= 0 (0 selects the default rule)");
        if (grid_h < 0.0) throw ConfigError("grid.h", "must be >= 0 (0 selects the default rule)");
        if (grid_dims < 0) throw ConfigError("grid.dims", "must be >= 0 (0 selects the default rule)");
        if (probes.n < 2) throw ConfigError("probes.n", "must be >= 2");
        if (!(probes.extent > 0.0)) throw ConfigError("probes.extent", "must be > 0");
        if (!(solver.damping > 0.0 && solver.damping <= 1.0))
            throw ConfigError("solver.damping", "must lie in (0, 1]");
        if (solver.max_iter < 1) throw ConfigError("solver.max_iter", "must be >= 1");
        if (diag_stride < 1) throw ConfigError("diag_stride", "must be >= 1");
        if (snapshot_stride < 0) throw ConfigError("snapshot_stride", "must be >= 0");
        if (threads < 0) throw ConfigError("threads", "must be >= 0");
        if (fs_beta < 0.0) throw ConfigError("fs_beta", "must be >= 0");
        if (meas_scale < 0.0) throw ConfigError("meas_scale", "must be >= 0");
    }

    // Fill the derived defaults; n_markers comes from the sampled ensemble.
    RunConfig resolved(std::size_t n_markers) const {
        RunConfig r = *this;
        if (r.softening == 0.0) r.softening = 0.2 * marker_pitch();
        if (r.grid_h == 0.0) r.grid_h = marker_pitch();
        if (r.grid_dims == 0)
            r.grid_dims = static_cast<int>(std::lround(std::cbrt(double(std::max<std::size_t>(n_markers, 8))))) + 6;
        return r;
    }
};

inline std::vector<Vec3> make_probe_points(const ProbeGridSpec& spec) {
    std::vector<Vec3> pts;
    pts.reserve(static_cast<std::size_t>(spec.n) * spec.n * spec.n);
    double h = spec.spacing();
    for (int i = 0; i < spec.n; ++i)
        for (int j = 0; j < spec.n; ++j)
            for (int k = 0; k < spec.n; ++k)
                pts.push_back({-spec.extent + (i + 0.5) * h, -spec.extent + (j + 0.5) * h,
                               -spec.extent + (k + 0.5) * h});
    return pts;
}

// ---------------------------------------------------------------------------
// Life span
// ---------------------------------------------------------------------------

struct LifespanReport {
    double c_f0 = 0.0;
    double t_star = std::numeric_limits<double>::infinity();
    double p0 = 0.0;
    std::vector<double> sample_times;
    std::vector<double> p_curve;

    double p_of(double t) const {
        if (c_f0 == 0.0) return p0;
        if (t >= t_star) return std::numeric_limits<double>::infinity();
        return p0 / (1.0 - c_f0 * p0 * t);
    }
};

// P(t) = P0 (1 - C(f0) P0 t)^{-1} with C(f0) = 3 (2 pi)^{2/3} |f0|_1^{1/3} |f0|_inf^{2/3}.
inline LifespanReport lifespan_bound(const BumpDatum& datum,
                                     const std::vector<double>& sample_times = {}) {
    auto n = datum_norms(datum);
    LifespanReport rep;
    rep.p0 = datum.p_radius;
    if (n.linf <= 0.0) return rep;  // infinite life span sentinel
    rep.c_f0 = 3.0 * std::pow(2.0 * M_PI, 2.0 / 3.0) * std::cbrt(n.l1) * std::pow(n.linf, 2.0 / 3.0);
    rep.t_star = 1.0 / (rep.c_f0 * datum.p_radius);
    for (double t : sample_times) {
        if (t >= rep.t_star) break;
        rep.sample_times.push_back(t);
        rep.p_curve.push_back(rep.p_of(t));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Simulation driver
// ---------------------------------------------------------------------------

struct RunHooks {
    std::function<void(const RunRecordRow&, std::size_t)> on_row;         // finalized rows, in order
    std::function<void(const Ensemble&, std::size_t)> on_snapshot;        // at snapshot_stride
};

// Auxiliary phase-space states advanced through the same per-step fields as
// the markers without sourcing them (flow probes, Picard bundles).
struct AuxState {
    Vec3 x;
    Vec3 pi;
};

class Simulation {
public:
    Simulation(const RunConfig& cfg_in, Ensemble initial, std::vector<AuxState> aux = {})
        : cfg(cfg_in.resolved(initial.size())), e(std::move(initial)), aux_states(std::move(aux)) {
        cfg.validate();
        e.softening = cfg.softening;
        probes.points = make_probe_points(cfg.probes);
        record.dt = cfg.dt;
        sf = solve_self_consistent_A(e, cfg.solver);
        solver_opts = cfg.solver;
        solver_opts.tol = sf.tolerance;  // freeze the absolute tolerance for the whole run
    }

    static Ensemble sample(const RunConfig& cfg) {
        auto e = sample_bump(cfg.datum, cfg.n_per_axis, cfg.seed);
        e.softening = cfg.resolved(e.size()).softening;
        return e;
    }

    const RunConfig& resolved_config() const { return cfg; }
    const Ensemble& ensemble() const { return e; }
    const SelfField& self_field() const { return sf; }
    const std::vector<AuxState>& aux() const { return aux_states; }
    const ProbeSet& probe_set() const { return probes; }
    RunRecord& run_record() { return record; }

    // Records the row for the current state; call once per step before advance().
    void record_row(std::size_t step_index) {
        auto geo = fit_grid_geometry(e, cfg.grid_h, cfg.grid_dims);
        const double aperture = cfg.measurement_aperture(e.time);
        std::vector<FieldSample> probe_fields =
            eval_fields(e, sf, probes.points, cfg.solver.parallel_chunk, aperture);
        marker_fields = eval_fields(e, sf, marker_positions(), cfg.solver.parallel_chunk);
        probes.store(probe_fields);

        RunRecordRow row;
        row.t = e.time;
        auto dep = deposit_grid(e, sf, geo);
        row.grid_expanded = geo.expanded;
        auto norms = grid_norms(dep.rho, dep.j);
        row.sup_rho = norms.sup_rho;
        row.sup_j = norms.sup_j;
        row.l1_rho = norms.l1_rho;
        row.l1_j = norms.l1_j;
        row.sup_dxrho = norms.sup_dxrho;
        row.sup_dxj = norms.sup_dxj;

        auto radii = support_radii(e);
        row.x_bar = radii.x_bar;
        row.p_bar = radii.p_bar;

        // gauge defect at the fixed probes
        for (const auto& f : probe_fields)
            row.gauge_residual = std::max(row.gauge_residual, std::abs(trace(f.grad_a)));

        auto parts = energy(e, sf, probe_fields, cfg.probes.spacing());
        row.energy = parts.total;
        row.energy_kinetic = parts.kinetic;
        row.energy_field = parts.field;

        double h_sum = 0.0, w_sum = 0.0;
        for (std::size_t k = 0; k < e.size(); ++k) {
            h_sum += e.markers[k].w * hamiltonian(e.markers[k].pi, sf.a_at_markers[k], marker_fields[k].phi);
            w_sum += e.markers[k].w;
        }
        double h_mean = w_sum > 0.0 ? h_sum / w_sum : 0.0;
        if (step_index == 0) h_mean0 = h_mean;
        row.h_drift = h_mean0 != 0.0 ? (h_mean - h_mean0) / std::abs(h_mean0) : 0.0;

        if (step_index % cfg.diag_stride == 0) {
            auto sups = field_sups_on_support(e, sf, dep.rho, cfg.solver.parallel_chunk, aperture);
            auto moll = mollified_norms(e, sf, dep.rho, aperture);
            row.sup_grad_phi = sups.sup_grad_phi;
            row.sup_grad_a = sups.sup_grad_a;
            row.sup_d2phi = sups.sup_d2phi;
            row.sup_d2a = sups.sup_d2a;
            row.sup_phi = sups.sup_phi;
            row.sup_a = sups.sup_a;
            row.poisson_residual = poisson_residual(e, sf, dep.rho, cfg.solver.parallel_chunk);
            double margin = bounded_map_margin(sf, norms).margin;
            for (const auto& m : potential_bound_check(norms, sups, &moll))
                margin = std::max(margin, m.margin);
            row.bound_margin_max = margin;
            last_diag = row;
        } else {
            row.sup_grad_phi = last_diag.sup_grad_phi;
            row.sup_grad_a = last_diag.sup_grad_a;
            row.sup_d2phi = last_diag.sup_d2phi;
            row.sup_d2a = last_diag.sup_d2a;
            row.sup_phi = last_diag.sup_phi;
            row.sup_a = last_diag.sup_a;
            row.poisson_residual = last_diag.poisson_residual;
            row.bound_margin_max = last_diag.bound_margin_max;
            row.diag_fresh = false;
        }

        // continuity against the previous step on its grid geometry
        if (have_prev_geo) {
            auto cur_on_prev = deposit_grid(e, sf, prev_geo);
            VectorGrid j_mid(prev_geo.origin, prev_geo.h, prev_geo.dims);
            for (std::size_t c = 0; c < j_mid.values.size(); ++c)
                j_mid.values[c] = 0.5 * (prev_j.values[c] + cur_on_prev.j.values[c]);
            row.continuity_residual = continuity_residual(cur_on_prev.rho, prev_rho, j_mid, cfg.dt);
        }
        prev_geo = geo;
        prev_rho = dep.rho;
        prev_j = dep.j;
        have_prev_geo = true;

        pending.push_back({row, gather_rho_at_probes(dep.rho)});
        try_finalize(false);
    }

    // One RK4 step of the markers and aux states; re-solves the field for the
    // new state with a warm start.
    void advance() {
        const std::size_t n = e.size();
        const std::size_t na = aux_states.size();
        std::vector<RhsSample> k1(n), k2(n), k3(n), k4(n);
        std::vector<RhsSample> a1(na), a2(na), a3(na), a4(na);

        std::vector<VectorSource> frozen;
        if (cfg.field_policy == FieldPolicy::frozen_per_step)
            frozen = frozen_sources(e, sf.a_at_markers);

        auto stage = [&](std::vector<RhsSample>& k, std::vector<RhsSample>& ak,
                         const std::vector<RhsSample>& pk, const std::vector<RhsSample>& pak,
                         double frac, bool reuse_marker_fields) {
            std::vector<Vec3> targets;
            targets.reserve((reuse_marker_fields ? 0 : n) + na);
            std::vector<Vec3> stage_pi(n);
            Ensemble stage_e;
            const Ensemble* source_e = &e;
            for (std::size_t i = 0; i < n; ++i)
                stage_pi[i] = e.markers[i].pi + (frac * cfg.dt) * pk[i].pi_dot;
            if (cfg.field_policy == FieldPolicy::per_stage && frac > 0.0) {
                stage_e = e;
                for (std::size_t i = 0; i < n; ++i) {
                    stage_e.markers[i].x = e.markers[i].x + (frac * cfg.dt) * pk[i].x_dot;
                    stage_e.markers[i].pi = stage_pi[i];
                }
                stage_e.time = e.time + frac * cfg.dt;
                source_e = &stage_e;
            }
            if (!reuse_marker_fields)
                for (std::size_t i = 0; i < n; ++i)
                    targets.push_back(e.markers[i].x + (frac * cfg.dt) * pk[i].x_dot);
            for (std::size_t i = 0; i < na; ++i)
                targets.push_back(aux_states[i].x + (frac * cfg.dt) * pak[i].x_dot);

            std::vector<FieldSample> fields;
            if (cfg.field_policy == FieldPolicy::frozen_per_step) {
                KernelConfig kcfg{cfg.softening, cfg.solver.parallel_chunk};
                fields = field_kernel_sum(frozen, targets, kcfg);
            } else {
                SelfField stage_sf = frac > 0.0
                                         ? solve_self_consistent_A(*source_e, solver_opts, &sf)
                                         : sf;
                fields = eval_fields(*source_e, stage_sf, targets, cfg.solver.parallel_chunk);
            }
            std::size_t off = 0;
            if (reuse_marker_fields) {
                for (std::size_t i = 0; i < n; ++i) k[i] = characteristic_rhs(stage_pi[i], marker_fields[i]);
            } else {
                for (std::size_t i = 0; i < n; ++i) k[i] = characteristic_rhs(stage_pi[i], fields[i]);
                off = n;
            }
            for (std::size_t i = 0; i < na; ++i) {
                Vec3 pi = aux_states[i].pi + (frac * cfg.dt) * pak[i].pi_dot;
                ak[i] = characteristic_rhs(pi, fields[off + i]);
            }
        };

        std::vector<RhsSample> zero(n), azero(na);
        bool have_marker_fields = marker_fields.size() == n;
        stage(k1, a1, zero, azero, 0.0, have_marker_fields);
        stage(k2, a2, k1, a1, 0.5, false);
        stage(k3, a3, k2, a2, 0.5, false);
        stage(k4, a4, k3, a3, 1.0, false);

        const double c = cfg.dt / 6.0;
        for (std::size_t i = 0; i < n; ++i) {
            e.markers[i].x += c * (k1[i].x_dot + 2.0 * k2[i].x_dot + 2.0 * k3[i].x_dot + k4[i].x_dot);
            e.markers[i].pi += c * (k1[i].pi_dot + 2.0 * k2[i].pi_dot + 2.0 * k3[i].pi_dot + k4[i].pi_dot);
        }
        for (std::size_t i = 0; i < na; ++i) {
            aux_states[i].x += c * (a1[i].x_dot + 2.0 * a2[i].x_dot + 2.0 * a3[i].x_dot + a4[i].x_dot);
            aux_states[i].pi += c * (a1[i].pi_dot + 2.0 * a2[i].pi_dot + 2.0 * a3[i].pi_dot + a4[i].pi_dot);
        }
        e.time += cfg.dt;
        marker_fields.clear();
        sf = solve_self_consistent_A(e, solver_opts, &sf);
    }

    void finish(const RunHooks& hooks = {}) {
        try_finalize(true);
        flush_rows(hooks);
    }

    void flush_rows(const RunHooks& hooks) {
        if (!hooks.on_row) {
            flushed = record.rows.size();
            return;
        }
        while (flushed < record.rows.size()) {
            hooks.on_row(record.rows[flushed], flushed);
            ++flushed;
        }
    }

private:
    std::vector<Vec3> marker_positions() const {
        std::vector<Vec3> p(e.size());
        for (std::size_t i = 0; i < e.size(); ++i) p[i] = e.markers[i].x;
        return p;
    }

    std::vector<double> gather_rho_at_probes(const ScalarGrid& rho) const {
        std::vector<double> out(probes.points.size());
        for (std::size_t p = 0; p < probes.points.size(); ++p)
            out[p] = std::max(0.0, gather(rho, probes.points[p]));
        return out;
    }

    struct Pending {
        RunRecordRow row;
        std::vector<double> rho_at_probes;
    };

    // Rows finalize once their time-derivative stencils are available:
    // centered in the interior, one-sided second order at both ends.
    void try_finalize(bool at_end) {
        while (!pending.empty()) {
            std::size_t j = record.rows.size();
            bool interior_ready = probes.steps() >= j + 2 && j >= 1;
            bool start_ready = j == 0 && probes.steps() >= 3;
            bool end_ready = at_end;
            if (!(interior_ready || start_ready || end_ready)) break;
            Pending p = std::move(pending.front());
            pending.pop_front();
            finalize_row(p, j);
            record.rows.push_back(p.row);
        }
    }

    void finalize_row(Pending& p, std::size_t j) {
        RunRecordRow& row = p.row;
        if (probes.steps() >= 3) {
            auto l2 = transversal_l2_from(p, std::min(j, probes.steps() - 1));
            row.sup_dtA = l2.sup_dtA;
            row.l2_dtdxA = l2.l2_dtdxA;
            row.l2_sqrtrho_dtA = l2.l2_sqrtrho_dtA;
        }
        if (record.fs_beta == 0.0) {
            if (cfg.fs_beta > 0.0) {
                record.fs_beta = cfg.fs_beta;
            } else if (j == 0) {
                double s1 = row.sup_dtA + row.sup_grad_a + row.sup_grad_phi;
                double s2 = row.sup_d2a + row.sup_d2phi;
                record.fs_beta = 2.0 * std::max(s1, s2);
            }
        }
        if (record.fs_beta > 0.0) {
            double s1 = row.sup_dtA + row.sup_grad_a + row.sup_grad_phi;
            double s2 = row.sup_d2a + row.sup_d2phi;
            row.fs_ok_1 = s1 <= record.fs_beta * std::pow(1.0 + row.t, -1.5);
            row.fs_ok_2 = s2 <= record.fs_beta * std::pow(1.0 + row.t, -2.5);
        }
    }

    TransversalL2 transversal_l2_from(const Pending& p, std::size_t j) {
        TransversalL2 out;
        const double vol = std::pow(cfg.probes.spacing(), 3);
        double acc_dxdt = 0.0, acc_rho = 0.0;
        for (std::size_t q = 0; q < probes.points.size(); ++q) {
            Vec3 dta = detail::time_derivative_a(probes, cfg.dt, j, q);
            out.sup_dtA = std::max(out.sup_dtA, norm(dta));
            Mat3 dtdx = grad_a_time_derivative(j, q);
            double fro = norm_fro(dtdx);
            acc_dxdt += fro * fro * vol;
            acc_rho += p.rho_at_probes[q] * norm2(dta) * vol;
        }
        out.l2_dtdxA = std::sqrt(acc_dxdt);
        out.l2_sqrtrho_dtA = std::sqrt(acc_rho);
        return out;
    }

    Mat3 grad_a_time_derivative(std::size_t i, std::size_t q) const {
        const auto& h = probes.history;
        std::size_t n = h.size();
        Mat3 r;
        if (i == 0) {
            r = (-3.0) * h[0][q].grad_a + 4.0 * h[1][q].grad_a;
            r += (-1.0) * h[2][q].grad_a;
        } else if (i + 1 >= n) {
            r = 3.0 * h[n - 1][q].grad_a + (-4.0) * h[n - 2][q].grad_a;
            r += h[n - 3][q].grad_a;
        } else {
            r = h[i + 1][q].grad_a + (-1.0) * h[i - 1][q].grad_a;
        }
        r *= 1.0 / (2.0 * cfg.dt);
        return r;
    }

    RunConfig cfg;
    Ensemble e;
    SelfField sf;
    SolverOptions solver_opts;
    ProbeSet probes;
    RunRecord record;
    std::vector<AuxState> aux_states;
    std::vector<FieldSample> marker_fields;
    std::deque<Pending> pending;
    RunRecordRow last_diag;
    GridGeometry prev_geo;
    ScalarGrid prev_rho;
    VectorGrid prev_j;
    bool have_prev_geo = false;
    double h_mean0 = 0.0;
    std::size_t flushed = 0;
};

// Full run: solve, record, step until t_final (one row per step).
inline RunRecord run_simulation(const RunConfig& cfg_in, const RunHooks& hooks = {}) {
    RunConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.threads > 0) set_threads(cfg.threads);
    Ensemble initial = Simulation::sample(cfg);
    Simulation sim(cfg, std::move(initial));
    std::size_t n_steps = static_cast<std::size_t>(std::llround(cfg.t_final / cfg.dt));
    try {
        for (std::size_t i = 0;; ++i) {
            sim.record_row(i);
            if (hooks.on_snapshot && cfg.snapshot_stride > 0 && i % cfg.snapshot_stride == 0)
                hooks.on_snapshot(sim.ensemble(), i);
            sim.flush_rows(hooks);
            if (i >= n_steps) break;
            sim.advance();
        }
    } catch (const NonConvergenceError& err) {
        sim.run_record().aborted = true;
        sim.run_record().abort_reason = err.what();
    }
    sim.finish(hooks);
    RunRecord out = std::move(sim.run_record());
    return out;
}

// ---------------------------------------------------------------------------
// Free-streaming monitor and continuation report
// ---------------------------------------------------------------------------

struct FsReport {
    double beta = 0.0;
    std::vector<bool> fs_ok_1, fs_ok_2;
    bool fs_all_ok = true;
    // continuation
    bool momentum_within_lifespan = true;  // P(t) <= P(t) envelope for t < t_star
    bool momentum_within_p0_plus_1 = true;
    double max_p_bar = 0.0;
};

inline FsReport fs_monitor(const RunRecord& record, const BumpDatum& datum, double beta = 0.0) {
    FsReport rep;
    rep.beta = beta;
    if (rep.beta <= 0.0 && !record.rows.empty()) {
        const auto& r0 = record.rows.front();
        rep.beta = 2.0 * std::max(r0.sup_dtA + r0.sup_grad_a + r0.sup_grad_phi,
                                  r0.sup_d2a + r0.sup_d2phi);
    }
    auto life = lifespan_bound(datum);
    for (const auto& row : record.rows) {
        double s1 = row.sup_dtA + row.sup_grad_a + row.sup_grad_phi;
        double s2 = row.sup_d2a + row.sup_d2phi;
        bool ok1 = s1 <= rep.beta * std::pow(1.0 + row.t, -1.5);
        bool ok2 = s2 <= rep.beta * std::pow(1.0 + row.t, -2.5);
        rep.fs_ok_1.push_back(ok1);
        rep.fs_ok_2.push_back(ok2);
        rep.fs_all_ok = rep.fs_all_ok && ok1 && ok2;
        rep.max_p_bar = std::max(rep.max_p_bar, row.p_bar);
        if (row.t < life.t_star && row.p_bar > life.p_of(row.t))
            rep.momentum_within_lifespan = false;
        if (row.p_bar > datum.p_radius + 1.0) rep.momentum_within_p0_plus_1 = false;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Flow Jacobian probes
// ---------------------------------------------------------------------------

struct FlowProbeResult {
    double vol_det = 1.0;
    double disp_det = 0.0;
    bool extrapolation_warning = false;
};

namespace detail {

inline double det6(std::array<std::array<double, 6>, 6> m) {
    double det = 1.0;
    for (int c = 0; c < 6; ++c) {
        int piv = c;
        for (int r = c + 1; r < 6; ++r)
            if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
        if (m[piv][c] == 0.0) return 0.0;
        if (piv != c) {
            std::swap(m[piv], m[c]);
            det = -det;
        }
        det *= m[c][c];
        for (int r = c + 1; r < 6; ++r) {
            double f = m[r][c] / m[c][c];
            for (int k = c; k < 6; ++k) m[r][k] -= f * m[c][k];
        }
    }
    return det;
}

}  // namespace detail

// Finite-difference Jacobians of the forward flow: center +/- h along each of
// the six phase-space axes gives 13 auxiliary characteristics per probe.
// vol_det is the 6x6 determinant of dXi(t)/dxi(0); disp_det is the 3x3 block
// dX(t)/dpi(0).
inline std::vector<FlowProbeResult> flow_jacobians(
    const RunConfig& cfg_in, const BumpDatum& datum,
    const std::vector<std::pair<Vec3, Vec3>>& probe_points, double t_final,
    double fd_scale = 1e-4) {
    RunConfig cfg = cfg_in;
    cfg.datum = datum;
    cfg.t_final = t_final;
    cfg.validate();

    std::vector<FlowProbeResult> out(probe_points.size());
    if (t_final == 0.0) return out;

    std::vector<AuxState> aux;
    std::vector<double> steps_h(probe_points.size());
    for (std::size_t p = 0; p < probe_points.size(); ++p) {
        const auto& [x0, p0] = probe_points[p];
        double h = fd_scale * std::max({1.0, norm(x0), norm(p0)});
        steps_h[p] = h;
        aux.push_back({x0, p0});
        for (int axis = 0; axis < 6; ++axis)
            for (double s : {-1.0, 1.0}) {
                AuxState st{x0, p0};
                if (axis < 3)
                    st.x[axis] += s * h;
                else
                    st.pi[axis - 3] += s * h;
                aux.push_back(st);
            }
    }

    Ensemble initial = Simulation::sample(cfg);
    Simulation sim(cfg, std::move(initial), aux);
    std::size_t n_steps = static_cast<std::size_t>(std::llround(t_final / cfg.dt));
    bool warn = false;
    for (std::size_t i = 0; i < n_steps; ++i) {
        sim.advance();
        for (const auto& st : sim.aux())
            if (norm_inf(st.x) > cfg.probes.extent) warn = true;
    }

    const auto& final_aux = sim.aux();
    for (std::size_t p = 0; p < probe_points.size(); ++p) {
        std::size_t base = p * 13;
        double inv2h = 1.0 / (2.0 * steps_h[p]);
        std::array<std::array<double, 6>, 6> jac{};
        for (int axis = 0; axis < 6; ++axis) {
            const AuxState& lo = final_aux[base + 1 + 2 * axis];
            const AuxState& hi = final_aux[base + 2 + 2 * axis];
            for (int c = 0; c < 3; ++c) {
                jac[c][axis] = (hi.x[c] - lo.x[c]) * inv2h;
                jac[3 + c][axis] = (hi.pi[c] - lo.pi[c]) * inv2h;
            }
        }
        out[p].vol_det = detail::det6(jac);
        Mat3 disp;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) disp(r, c) = jac[r][3 + c];
        out[p].disp_det = det(disp);
        out[p].extrapolation_warning = warn;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Picard iteration mode
// ---------------------------------------------------------------------------

struct PicardIterate {
    int index = 0;
    double sup_difference = 0.0;
};

struct PicardResult {
    std::vector<PicardIterate> iterates;
    std::vector<AuxState> final_states;  // converged trajectory endpoints at t_bar
    double t_bar = 0.0;
};

namespace detail {

// Kernel-source snapshots of one iterate at the step times; fields between
// snapshots interpolate linearly in time.
struct FieldTable {
    double dt = 0.0;
    std::vector<std::vector<VectorSource>> snaps;

    // batched evaluation at stage time t for a set of positions
    std::vector<FieldSample> eval(const std::vector<Vec3>& pts, double t, double eps,
                                  int chunk) const {
        KernelConfig cfg{eps, chunk};
        if (snaps.size() == 1) return field_kernel_sum(snaps[0], pts, cfg);
        double s = t / dt;
        auto j = static_cast<std::size_t>(std::floor(s));
        if (j + 1 >= snaps.size()) j = snaps.size() - 2;
        double th = std::clamp(s - static_cast<double>(j), 0.0, 1.0);
        auto f0 = field_kernel_sum(snaps[j], pts, cfg);
        if (th == 0.0) return f0;
        auto f1 = field_kernel_sum(snaps[j + 1], pts, cfg);
        for (std::size_t i = 0; i < f0.size(); ++i) {
            f0[i].phi = (1.0 - th) * f0[i].phi + th * f1[i].phi;
            f0[i].grad_phi = (1.0 - th) * f0[i].grad_phi + th * f1[i].grad_phi;
            f0[i].a = (1.0 - th) * f0[i].a + th * f1[i].a;
            Mat3 g = (1.0 - th) * f0[i].grad_a + th * f1[i].grad_a;
            f0[i].grad_a = g;
        }
        return f0;
    }
};

}  // namespace detail

// Mirrors the local-existence iteration: trajectories of iterate n+1 are
// integrated over [0, t_bar] in the time-dependent fields produced by iterate
// n; iterate 0 uses the static initial fields. sup_difference is the largest
// trajectory distance between consecutive iterates over markers and times.
inline PicardResult run_picard(const RunConfig& cfg_in, int n_iterates, double t_bar) {
    RunConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.threads > 0) set_threads(cfg.threads);
    auto life = lifespan_bound(cfg.datum);
    if (!(t_bar < life.t_star))
        throw ConfigError("t_bar", "must lie strictly inside the guaranteed existence interval");
    if (n_iterates < 1) throw ConfigError("n_iterates", "must be >= 1");

    Ensemble e0 = Simulation::sample(cfg);
    RunConfig rcfg = cfg.resolved(e0.size());
    e0.softening = rcfg.softening;
    const std::size_t n = e0.size();
    const std::size_t n_steps = static_cast<std::size_t>(std::ceil(t_bar / rcfg.dt - 1e-12));
    const double dt = n_steps > 0 ? t_bar / static_cast<double>(n_steps) : rcfg.dt;

    PicardResult result;
    result.t_bar = t_bar;
    if (n == 0) {
        for (int it = 1; it <= n_iterates; ++it) result.iterates.push_back({it, 0.0});
        return result;
    }

    SelfField sf0 = solve_self_consistent_A(e0, rcfg.solver);
    SolverOptions sopts = rcfg.solver;
    sopts.tol = sf0.tolerance;

    detail::FieldTable table;  // iterate 0: static initial fields
    table.dt = dt;
    table.snaps.push_back(frozen_sources(e0, sf0.a_at_markers));

    // trajectories[s][k]: state of marker k at time s dt
    std::vector<std::vector<AuxState>> prev_traj;

    for (int it = 1; it <= n_iterates; ++it) {
        std::vector<std::vector<AuxState>> traj(n_steps + 1, std::vector<AuxState>(n));
        for (std::size_t k = 0; k < n; ++k) traj[0][k] = {e0.markers[k].x, e0.markers[k].pi};

        for (std::size_t s = 0; s < n_steps; ++s) {
            double t = s * dt;
            const auto& cur = traj[s];
            auto& nxt = traj[s + 1];
            std::vector<RhsSample> k1(n), k2(n), k3(n), k4(n);
            auto stage = [&](std::vector<RhsSample>& k, const std::vector<RhsSample>& pk, double frac) {
                std::vector<Vec3> pts(n);
                for (std::size_t i = 0; i < n; ++i) pts[i] = cur[i].x + (frac * dt) * pk[i].x_dot;
                auto fields = table.eval(pts, t + frac * dt, rcfg.softening, rcfg.solver.parallel_chunk);
                for (std::size_t i = 0; i < n; ++i) {
                    Vec3 pi = cur[i].pi + (frac * dt) * pk[i].pi_dot;
                    k[i] = characteristic_rhs(pi, fields[i]);
                }
            };
            std::vector<RhsSample> zero(n);
            stage(k1, zero, 0.0);
            stage(k2, k1, 0.5);
            stage(k3, k2, 0.5);
            stage(k4, k3, 1.0);
            for (std::size_t i = 0; i < n; ++i) {
                nxt[i].x = cur[i].x + (dt / 6.0) * (k1[i].x_dot + 2.0 * k2[i].x_dot +
                                                    2.0 * k3[i].x_dot + k4[i].x_dot);
                nxt[i].pi = cur[i].pi + (dt / 6.0) * (k1[i].pi_dot + 2.0 * k2[i].pi_dot +
                                                      2.0 * k3[i].pi_dot + k4[i].pi_dot);
            }
        }

        if (!prev_traj.empty()) {
            double sup = 0.0;
            for (std::size_t s = 0; s <= n_steps; ++s)
                for (std::size_t k = 0; k < n; ++k) {
                    Vec3 dx = traj[s][k].x - prev_traj[s][k].x;
                    Vec3 dp = traj[s][k].pi - prev_traj[s][k].pi;
                    sup = std::max(sup, std::sqrt(norm2(dx) + norm2(dp)));
                }
            result.iterates.push_back({it, sup});
        } else {
            result.iterates.push_back({it, std::numeric_limits<double>::quiet_NaN()});
        }

        // build the field table of this iterate: fixed-point solve per stored time
        if (it < n_iterates) {
            detail::FieldTable next;
            next.dt = dt;
            next.snaps.resize(n_steps + 1);
            SelfField warm = sf0;
            for (std::size_t s = 0; s <= n_steps; ++s) {
                Ensemble es = e0;
                es.time = s * dt;
                for (std::size_t k = 0; k < n; ++k) {
                    es.markers[k].x = traj[s][k].x;
                    es.markers[k].pi = traj[s][k].pi;
                }
                warm.time = es.time;
                warm.n_markers = es.size();
                SelfField sfs = solve_self_consistent_A(es, sopts, &warm);
                next.snaps[s] = frozen_sources(es, sfs.a_at_markers);
                warm = std::move(sfs);
            }
            table = std::move(next);
        }
        result.final_states = traj[n_steps];
        prev_traj = std::move(traj);
    }
    return result;
}

}  // namespace rvd
