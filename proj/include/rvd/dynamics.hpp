#pragma once

#include <cmath>
#include <vector>

#include "rvd/darwin_kernels.hpp"
#include "rvd/phase_space.hpp"
#include "rvd/vec.hpp"

namespace rvd {

// Relativistic velocity in generalized variables (c = 1):
//   v = g / sqrt(1 + |g|^2),  g = pi - A,
// together with its momentum derivative Dv = (id - v (x) v)/sqrt(1 + |g|^2).
// Space and time derivatives follow as dv_x = -Dv dA_x, dv_t = -Dv dA_t.
struct VelocityJet {
    Vec3 v;
    Mat3 dv;
    Vec3 g;
    double gamma = 1.0;  // sqrt(1 + |g|^2)
};

inline Vec3 relativistic_velocity(const Vec3& g) {
    return g / std::sqrt(1.0 + norm2(g));
}

inline VelocityJet velocity_jet(const Vec3& pi, const Vec3& a) {
    VelocityJet out;
    out.g = pi - a;
    out.gamma = std::sqrt(1.0 + norm2(out.g));
    double inv_gamma = 1.0 / out.gamma;
    out.v = inv_gamma * out.g;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k)
            out.dv(i, k) = inv_gamma * ((i == k ? 1.0 : 0.0) - out.v[i] * out.v[k]);
    return out;
}

// H(t, x, pi) = sqrt(1 + |pi - A|^2) + Phi at c = 1.
inline double hamiltonian(const Vec3& pi, const Vec3& a, double phi) {
    return std::sqrt(1.0 + norm2(pi - a)) + phi;
}

struct RhsSample {
    Vec3 x_dot;   // v_A
    Vec3 pi_dot;  // -grad Phi + v_A^i grad A^i
};

// Characteristic field in generalized variables. The contraction v^i grad A^i
// reads (grad_a)^T v with grad_a(i,k) = dA^i/dx_k.
inline RhsSample characteristic_rhs(const Vec3& pi, const FieldSample& f) {
    RhsSample out;
    out.x_dot = relativistic_velocity(pi - f.a);
    out.pi_dot = -f.grad_phi + mul_t(f.grad_a, out.x_dot);
    return out;
}

// Classical RK4 over one step. The provider supplies the field bundle at a
// set of positions for a stage time offset in [0, dt]:
//   provider(positions, stage_dt) -> std::vector<FieldSample>
// A frozen-per-step provider ignores stage_dt.
template <class FieldProvider>
Ensemble rk4_step(const Ensemble& e, double dt, FieldProvider&& provider) {
    const std::size_t n = e.size();
    std::vector<Vec3> pos(n);
    std::vector<RhsSample> k1(n), k2(n), k3(n), k4(n);

    auto stage = [&](std::vector<RhsSample>& k, const std::vector<RhsSample>& prev, double frac) {
        for (std::size_t i = 0; i < n; ++i)
            pos[i] = e.markers[i].x + (frac * dt) * prev[i].x_dot;
        auto fields = provider(pos, frac * dt);
        for (std::size_t i = 0; i < n; ++i) {
            Vec3 pi = e.markers[i].pi + (frac * dt) * prev[i].pi_dot;
            k[i] = characteristic_rhs(pi, fields[i]);
        }
    };

    std::vector<RhsSample> zero(n);
    stage(k1, zero, 0.0);
    stage(k2, k1, 0.5);
    stage(k3, k2, 0.5);
    stage(k4, k3, 1.0);

    Ensemble out = e;
    const double c = dt / 6.0;
    for (std::size_t i = 0; i < n; ++i) {
        out.markers[i].x += c * (k1[i].x_dot + 2.0 * k2[i].x_dot + 2.0 * k3[i].x_dot + k4[i].x_dot);
        out.markers[i].pi += c * (k1[i].pi_dot + 2.0 * k2[i].pi_dot + 2.0 * k3[i].pi_dot + k4[i].pi_dot);
    }
    out.time = e.time + dt;
    return out;
}

// Same RK4 tableau for a single auxiliary phase-space point (flow probes and
// the Picard re-integration use this; the point does not source fields).
template <class FieldAt>
void rk4_point(Vec3& x, Vec3& pi, double t, double dt, FieldAt&& field_at) {
    auto rhs = [&](const Vec3& xs, const Vec3& ps, double ts) {
        return characteristic_rhs(ps, field_at(xs, ts));
    };
    RhsSample k1 = rhs(x, pi, t);
    RhsSample k2 = rhs(x + (0.5 * dt) * k1.x_dot, pi + (0.5 * dt) * k1.pi_dot, t + 0.5 * dt);
    RhsSample k3 = rhs(x + (0.5 * dt) * k2.x_dot, pi + (0.5 * dt) * k2.pi_dot, t + 0.5 * dt);
    RhsSample k4 = rhs(x + dt * k3.x_dot, pi + dt * k3.pi_dot, t + dt);
    x += (dt / 6.0) * (k1.x_dot + 2.0 * k2.x_dot + 2.0 * k3.x_dot + k4.x_dot);
    pi += (dt / 6.0) * (k1.pi_dot + 2.0 * k2.pi_dot + 2.0 * k3.pi_dot + k4.pi_dot);
}

}  // namespace rvd
