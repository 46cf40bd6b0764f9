#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "rvd/darwin_kernels.hpp"
#include "rvd/dynamics.hpp"
#include "rvd/errors.hpp"
#include "rvd/phase_space.hpp"

namespace rvd {

// Converged vector potential at the marker positions.
struct SelfField {
    std::vector<Vec3> a_at_markers;
    int iterations = 0;
    double residual = 0.0;
    double tolerance = 0.0;   // the tolerance actually used
    double time = 0.0;        // ensemble time this field belongs to
    std::size_t n_markers = 0;
    std::vector<double> residual_history;  // sup-norm update per iteration
};

struct SolverOptions {
    double tol = -1.0;      // < 0: 1e-10 * max(1, |T[start]|_inf)
    double damping = 1.0;   // theta in (0, 1]
    int max_iter = 200;
    int parallel_chunk = 256;
};

// Frozen kernel sources of the ensemble: u_l = w_l v(pi_l - A_l), scalar w_l.
inline std::vector<VectorSource> frozen_sources(const Ensemble& e,
                                                const std::vector<Vec3>& a_at_markers) {
    std::vector<VectorSource> src(e.size());
    for (std::size_t l = 0; l < e.size(); ++l) {
        const Marker& m = e.markers[l];
        src[l].y = m.x;
        src[l].u = m.w * relativistic_velocity(m.pi - a_at_markers[l]);
        src[l].w_scalar = m.w;
    }
    return src;
}

// One application of the map T[A](x_k) = (1/2) sum_l [id + w(x)w] w_l v(pi_l - A_l) / s.
inline std::vector<Vec3> apply_potential_map(const Ensemble& e, const std::vector<Vec3>& a,
                                             int chunk = 256) {
    KernelConfig cfg{e.softening, chunk};
    std::vector<Vec3> targets(e.size());
    for (std::size_t k = 0; k < e.size(); ++k) targets[k] = e.markers[k].x;
    return vector_potential_sum(frozen_sources(e, a), targets, cfg);
}

// Damped fixed-point iteration A <- (1 - theta) A + theta T[A], stopping when
// sup_k |A_new - A_old| <= tol. theta halves on a residual increase, at most
// six times. Non-convergence carries the last residual.
inline SelfField solve_self_consistent_A(const Ensemble& e, const SolverOptions& opt = {},
                                         const SelfField* warm_start = nullptr) {
    if (!e.markers.empty() && !(e.softening > 0.0))
        throw ConfigError("ensemble.softening", "must be > 0 for the self-consistent solve");
    if (!(opt.damping > 0.0 && opt.damping <= 1.0))
        throw ConfigError("solver.damping", "must lie in (0, 1]");

    SelfField out;
    out.time = e.time;
    out.n_markers = e.size();
    if (e.markers.empty()) {
        out.tolerance = std::max(opt.tol, 0.0);
        return out;
    }

    std::vector<Vec3> a(e.size());
    if (warm_start) {
        if (warm_start->a_at_markers.size() != e.size())
            throw ConsistencyError("warm start does not match the ensemble size");
        a = warm_start->a_at_markers;
    }

    double theta = opt.damping;
    double tol = opt.tol;
    double prev_residual = std::numeric_limits<double>::infinity();
    int halvings = 0;

    for (int m = 0; m < opt.max_iter; ++m) {
        std::vector<Vec3> t_of_a = apply_potential_map(e, a, opt.parallel_chunk);
        if (tol <= 0.0) {
            double scale = 0.0;
            for (const auto& v : t_of_a) scale = std::max(scale, norm(v));
            tol = 1e-10 * std::max(1.0, scale);
        }
        double residual = 0.0;
        for (std::size_t k = 0; k < e.size(); ++k) {
            Vec3 next = (1.0 - theta) * a[k] + theta * t_of_a[k];
            residual = std::max(residual, norm(next - a[k]));
            a[k] = next;
        }
        out.iterations = m + 1;
        out.residual = residual;
        out.tolerance = tol;
        out.residual_history.push_back(residual);
        if (residual <= tol) {
            out.a_at_markers = std::move(a);
            return out;
        }
        if (residual > prev_residual && halvings < 6) {
            theta *= 0.5;
            ++halvings;
        }
        prev_residual = residual;
    }
    throw NonConvergenceError(out.residual, out.iterations);
}

// Field bundle (Phi, grad Phi, A, dA) at arbitrary points, sourced by the
// ensemble with the converged marker potentials. `aperture` selects the
// evaluation kernel width; measurement probes pass a coarser one than the
// dynamical softening so point-source spikes do not pollute sup norms.
inline std::vector<FieldSample> eval_fields(const Ensemble& e, const SelfField& sf,
                                            const std::vector<Vec3>& points, int chunk = 256,
                                            double aperture = 0.0) {
    if (sf.n_markers != e.size() || sf.time != e.time)
        throw ConsistencyError("self field is stale for this ensemble state");
    KernelConfig cfg{aperture > 0.0 ? aperture : e.softening, chunk};
    return field_kernel_sum(frozen_sources(e, sf.a_at_markers), points, cfg);
}

// Fixed spatial probes with per-step stored field bundles.
struct ProbeSet {
    std::vector<Vec3> points;
    std::vector<std::vector<FieldSample>> history;  // history[step][probe]

    void store(std::vector<FieldSample> samples) { history.push_back(std::move(samples)); }
    std::size_t steps() const { return history.size(); }
};

struct EmSample {
    Vec3 e_long;            // -grad Phi
    Vec3 e_trans;           // -dA/dt at the fixed probe
    Vec3 b;                 // curl A
    double gauge_residual;  // |trace dA|
};

namespace detail {

// dA/dt at step i: centered in the interior, one-sided O(dt^2) at the ends.
inline Vec3 time_derivative_a(const ProbeSet& ps, double dt, std::size_t i, std::size_t p) {
    const auto& h = ps.history;
    std::size_t n = h.size();
    if (i == 0)
        return (1.0 / (2.0 * dt)) * (-3.0 * h[0][p].a + 4.0 * h[1][p].a - h[2][p].a);
    if (i + 1 == n)
        return (1.0 / (2.0 * dt)) * (3.0 * h[n - 1][p].a - 4.0 * h[n - 2][p].a + h[n - 3][p].a);
    return (1.0 / (2.0 * dt)) * (h[i + 1][p].a - h[i - 1][p].a);
}

}  // namespace detail

// Electromagnetic field at the probes for stored step i (default: the last
// interior step). Requires at least 3 stored steps.
inline std::vector<EmSample> em_fields_from_potentials(const ProbeSet& ps, double dt,
                                                       std::ptrdiff_t at = -1) {
    if (ps.steps() < 3) throw HistoryError("need at least 3 stored steps for time differencing");
    std::size_t i = at < 0 ? ps.steps() - 2 : static_cast<std::size_t>(at);
    if (i >= ps.steps()) throw HistoryError("probe history index out of range");
    std::vector<EmSample> out(ps.points.size());
    for (std::size_t p = 0; p < ps.points.size(); ++p) {
        const FieldSample& f = ps.history[i][p];
        out[p].e_long = -f.grad_phi;
        out[p].e_trans = -detail::time_derivative_a(ps, dt, i, p);
        out[p].b = curl_from_jacobian(f.grad_a);
        out[p].gauge_residual = std::abs(trace(f.grad_a));
    }
    return out;
}

// 4-point one-sided stencil for dA/dt, used to cross-check the centered one.
inline Vec3 dt_a_one_sided_4pt(const ProbeSet& ps, double dt, std::size_t i, std::size_t p) {
    if (i + 3 >= ps.steps()) throw HistoryError("need 4 forward samples for the one-sided stencil");
    const auto& h = ps.history;
    return (1.0 / (6.0 * dt)) *
           (-11.0 * h[i][p].a + 18.0 * h[i + 1][p].a - 9.0 * h[i + 2][p].a + 2.0 * h[i + 3][p].a);
}

}  // namespace rvd
