#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "rvd/darwin_kernels.hpp"
#include "rvd/dynamics.hpp"

namespace rvd {

struct VerifyResult {
    std::string name;
    bool pass = false;
    double worst = 0.0;   // worst observed error
    double limit = 0.0;   // allowed bound
};

// Analytic and finite-difference checks on the kernel and velocity algebra;
// the CI entry point behind the verify-kernels subcommand.
inline std::vector<VerifyResult> verify_kernels() {
    std::vector<VerifyResult> results;
    auto check = [&](const std::string& name, double worst, double limit) {
        results.push_back({name, worst <= limit, worst, limit});
    };

    KernelConfig cfg{0.0, 64};

    {  // single-source closed forms
        std::vector<VectorSource> src{{{0, 0, 0}, {0.37, 0, 0}, 1.0}};
        auto sc = scalar_kernel_sum(src, {{2.0, 0.0, 0.0}}, cfg);
        double worst = std::abs(sc[0].phi - 0.5);
        worst = std::max(worst, norm(sc[0].grad_phi - Vec3{-0.25, 0.0, 0.0}));
        auto on = darwin_kernel_sum(src, {{2.5, 0.0, 0.0}}, cfg);
        worst = std::max(worst, norm(on[0].a - Vec3{0.37 / 2.5, 0.0, 0.0}));
        auto off = darwin_kernel_sum(src, {{0.0, 2.5, 0.0}}, cfg);
        worst = std::max(worst, norm(off[0].a - Vec3{0.37 / 5.0, 0.0, 0.0}));
        check("single_source_closed_forms", worst, 1e-12);
    }

    std::mt19937 rng(2024);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<VectorSource> cloud;
    for (int i = 0; i < 64; ++i)
        cloud.push_back({{u(rng), u(rng), u(rng)},
                         {0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)},
                         0.5 + 0.25 * u(rng)});

    {  // kernel gradients against finite differences
        double worst = 0.0;
        const double h = 1e-4;
        for (int t = 0; t < 8; ++t) {
            Vec3 x{3.0 + u(rng), 2.0 * u(rng), 2.0 * u(rng)};
            for (int axis = 0; axis < 3; ++axis) {
                Vec3 xp = x, xm = x;
                xp[axis] += h;
                xm[axis] -= h;
                auto sc = scalar_kernel_sum(cloud, {x, xp, xm}, cfg);
                double fd = (sc[1].phi - sc[2].phi) / (2.0 * h);
                worst = std::max(worst, std::abs(sc[0].grad_phi[axis] - fd) /
                                            std::max(1e-12, std::abs(fd)));
                auto dv = darwin_kernel_sum(cloud, {x, xp, xm}, cfg);
                for (int i = 0; i < 3; ++i) {
                    double fda = (dv[1].a[i] - dv[2].a[i]) / (2.0 * h);
                    worst = std::max(worst, std::abs(dv[0].grad_a(i, axis) - fda) /
                                                std::max(1e-9, std::abs(fda)));
                }
            }
        }
        check("kernel_gradients_fd", worst, 1e-6);
    }

    {  // trace-free derivative and curl agreement
        double worst_tr = 0.0, worst_curl = 0.0;
        std::vector<Vec3> targets{{2.5, 0.4, -0.3}, {-2.8, 1.1, 2.0}, {0.2, -3.0, 1.5}};
        auto out = darwin_kernel_sum(cloud, targets, cfg);
        for (const auto& s : out) {
            worst_tr = std::max(worst_tr, std::abs(trace(s.grad_a)) / max_abs(s.grad_a));
            Vec3 c = curl_from_jacobian(s.grad_a);
            worst_curl = std::max(worst_curl, norm(c - s.curl_a) / std::max(1e-12, norm(s.curl_a)));
        }
        check("gauge_trace_free_eps0", worst_tr, 1e-12);
        check("curl_kernel_agreement", worst_curl, 1e-12);
    }

    {  // appendix identities over random states
        double worst = 0.0, worst_det = 0.0;
        const double h = 1e-5;
        std::mt19937 rs(7);
        std::uniform_real_distribution<double> uu(-1.5, 1.5);
        for (int trial = 0; trial < 1000; ++trial) {
            Vec3 pi{uu(rs), uu(rs), uu(rs)}, a{0.5 * uu(rs), 0.5 * uu(rs), 0.5 * uu(rs)};
            auto jet = velocity_jet(pi, a);
            worst_det = std::max(worst_det,
                                 std::abs(det(jet.dv) - std::pow(1.0 + norm2(jet.g), -2.5)) /
                                     std::pow(1.0 + norm2(jet.g), -2.5));
            if (trial % 16 != 0) continue;
            for (int axis = 0; axis < 3; ++axis) {
                Vec3 dp{0, 0, 0};
                dp[axis] = h;
                Vec3 fd_pi = (velocity_jet(pi + dp, a).v - velocity_jet(pi - dp, a).v) / (2.0 * h);
                Vec3 fd_a = (velocity_jet(pi, a + dp).v - velocity_jet(pi, a - dp).v) / (2.0 * h);
                for (int i = 0; i < 3; ++i) {
                    worst = std::max(worst, std::abs(jet.dv(i, axis) - fd_pi[i]));
                    worst = std::max(worst, std::abs(-jet.dv(i, axis) - fd_a[i]));
                }
            }
        }
        check("appendix_velocity_fd", worst, 1e-6);
        check("appendix_det_dv", worst_det, 1e-12);
    }

    {  // incompressibility of the characteristic field
        auto phi = [](const Vec3& x) { return 0.7 * std::sin(0.3 * x.x + 0.1 * x.y) * std::cos(0.2 * x.z); };
        auto grad_phi = [](const Vec3& x) -> Vec3 {
            double s = std::sin(0.3 * x.x + 0.1 * x.y), c = std::cos(0.3 * x.x + 0.1 * x.y);
            double cz = std::cos(0.2 * x.z), sz = std::sin(0.2 * x.z);
            return {0.7 * 0.3 * c * cz, 0.7 * 0.1 * c * cz, -0.7 * 0.2 * s * sz};
        };
        auto avec = [](const Vec3& x) -> Vec3 {
            return {0.4 * std::sin(0.2 * x.y), 0.4 * std::cos(0.3 * x.z), 0.4 * std::sin(0.1 * x.x + 0.2 * x.y)};
        };
        auto grad_a = [](const Vec3& x) {
            Mat3 g;
            g(0, 1) = 0.4 * 0.2 * std::cos(0.2 * x.y);
            g(1, 2) = -0.4 * 0.3 * std::sin(0.3 * x.z);
            g(2, 0) = 0.4 * 0.1 * std::cos(0.1 * x.x + 0.2 * x.y);
            g(2, 1) = 0.4 * 0.2 * std::cos(0.1 * x.x + 0.2 * x.y);
            return g;
        };
        auto field = [&](const Vec3& x) { return FieldSample{phi(x), grad_phi(x), avec(x), grad_a(x)}; };
        double worst = 0.0;
        const double h = 1e-4;
        std::mt19937 rs(19);
        std::uniform_real_distribution<double> uu(-2.0, 2.0);
        for (int trial = 0; trial < 1000; ++trial) {
            Vec3 x{uu(rs), uu(rs), uu(rs)}, pi{uu(rs), uu(rs), uu(rs)};
            double div = 0.0, scale = 1e-3;
            for (int axis = 0; axis < 3; ++axis) {
                Vec3 dx{0, 0, 0};
                dx[axis] = h;
                auto xp = characteristic_rhs(pi, field(x + dx));
                auto xm = characteristic_rhs(pi, field(x - dx));
                div += (xp.x_dot[axis] - xm.x_dot[axis]) / (2.0 * h);
                auto pp = characteristic_rhs(pi + dx, field(x));
                auto pm = characteristic_rhs(pi - dx, field(x));
                div += (pp.pi_dot[axis] - pm.pi_dot[axis]) / (2.0 * h);
                scale = std::max({scale, norm(xp.x_dot), norm(xp.pi_dot)});
            }
            worst = std::max(worst, std::abs(div) / scale);
        }
        check("incompressible_rhs_fd", worst, 1e-6);
    }

    return results;
}

}  // namespace rvd
