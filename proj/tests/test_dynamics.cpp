#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "rvd/dynamics.hpp"

using namespace rvd;

namespace {

// Smooth analytic (Phi, A) pair with exact derivatives, for FD cross-checks
// and frozen-field integration tests.
struct TestField {
    double amp_phi = 0.7;
    double amp_a = 0.4;

    double phi(const Vec3& x) const { return amp_phi * std::sin(0.3 * x.x + 0.1 * x.y) * std::cos(0.2 * x.z); }
    Vec3 grad_phi(const Vec3& x) const {
        double s = std::sin(0.3 * x.x + 0.1 * x.y), c = std::cos(0.3 * x.x + 0.1 * x.y);
        double cz = std::cos(0.2 * x.z), sz = std::sin(0.2 * x.z);
        return {amp_phi * 0.3 * c * cz, amp_phi * 0.1 * c * cz, -amp_phi * 0.2 * s * sz};
    }
    Vec3 a(const Vec3& x) const {
        return {amp_a * std::sin(0.2 * x.y), amp_a * std::cos(0.3 * x.z), amp_a * std::sin(0.1 * x.x + 0.2 * x.y)};
    }
    Mat3 grad_a(const Vec3& x) const {
        Mat3 g;
        g(0, 1) = amp_a * 0.2 * std::cos(0.2 * x.y);
        g(1, 2) = -amp_a * 0.3 * std::sin(0.3 * x.z);
        g(2, 0) = amp_a * 0.1 * std::cos(0.1 * x.x + 0.2 * x.y);
        g(2, 1) = amp_a * 0.2 * std::cos(0.1 * x.x + 0.2 * x.y);
        return g;
    }
    FieldSample sample(const Vec3& x) const { return {phi(x), grad_phi(x), a(x), grad_a(x)}; }
};

}  // namespace

TEST_CASE("velocity jet closed forms") {
    Vec3 a{0.2, -0.1, 0.4};
    auto rest = velocity_jet(a, a);
    CHECK(norm(rest.v) == 0.0);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) CHECK(rest.dv(i, k) == doctest::Approx(i == k ? 1.0 : 0.0));

    auto unit = velocity_jet({1.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
    CHECK(unit.v.x == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(unit.v.y == 0.0);
    CHECK(norm(unit.v) < 1.0);
}

TEST_CASE("velocity jet derivative identities over random states") {
    std::mt19937 rng(42);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    const double h = 1e-5;
    for (int trial = 0; trial < 1000; ++trial) {
        Vec3 pi{u(rng), u(rng), u(rng)}, a{0.5 * u(rng), 0.5 * u(rng), 0.5 * u(rng)};
        auto jet = velocity_jet(pi, a);
        CHECK(norm(jet.v) < 1.0);

        // det Dv = (1 + |g|^2)^{-5/2}
        double expect = std::pow(1.0 + norm2(jet.g), -2.5);
        CHECK(det(jet.dv) == doctest::Approx(expect).epsilon(1e-12));

        // symmetry and positive definiteness
        for (int i = 0; i < 3; ++i)
            for (int k = i + 1; k < 3; ++k) CHECK(jet.dv(i, k) == doctest::Approx(jet.dv(k, i)).epsilon(1e-14));
        Vec3 z{u(rng), u(rng), u(rng)};
        if (norm2(z) > 1e-8) CHECK(dot(z, mul(jet.dv, z)) > 0.0);

        if (trial >= 64) continue;  // FD checks on a subset keep the case fast
        for (int axis = 0; axis < 3; ++axis) {
            Vec3 dp{0, 0, 0};
            dp[axis] = h;
            Vec3 fd_pi = (velocity_jet(pi + dp, a).v - velocity_jet(pi - dp, a).v) / (2.0 * h);
            Vec3 fd_a = (velocity_jet(pi, a + dp).v - velocity_jet(pi, a - dp).v) / (2.0 * h);
            for (int i = 0; i < 3; ++i) {
                CHECK(jet.dv(i, axis) == doctest::Approx(fd_pi[i]).epsilon(1e-6));
                // d v / d A = -Dv
                CHECK(-jet.dv(i, axis) == doctest::Approx(fd_a[i]).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("hamiltonian values and momentum gradient") {
    Vec3 a{0.3, 0.3, 0.3};
    CHECK(hamiltonian(a, a, 0.0) == 1.0);
    CHECK(hamiltonian(a + Vec3{0, 0, std::sqrt(3.0)}, a, 0.0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(hamiltonian(a, a, 0.25) == doctest::Approx(1.25));

    std::mt19937 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double h = 1e-5;
    for (int trial = 0; trial < 100; ++trial) {
        Vec3 pi{u(rng), u(rng), u(rng)}, av{u(rng), u(rng), u(rng)};
        auto jet = velocity_jet(pi, av);
        for (int axis = 0; axis < 3; ++axis) {
            Vec3 dp{0, 0, 0};
            dp[axis] = h;
            double fd = (hamiltonian(pi + dp, av, 0.0) - hamiltonian(pi - dp, av, 0.0)) / (2.0 * h);
            CHECK(jet.v[axis] == doctest::Approx(fd).epsilon(1e-6));
        }
    }
}

TEST_CASE("characteristic right-hand side") {
    FieldSample zero;
    auto free_rhs = characteristic_rhs({1.0, 0.0, 0.0}, zero);
    CHECK(free_rhs.x_dot.x == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
    CHECK(norm(free_rhs.pi_dot) == 0.0);

    FieldSample electro;
    electro.grad_phi = {0.0, 0.0, 2.5};
    auto es = characteristic_rhs({0.0, 0.0, 0.0}, electro);
    CHECK(es.pi_dot.z == doctest::Approx(-2.5));
    CHECK(es.pi_dot.x == 0.0);
}

TEST_CASE("characteristic field is incompressible in phase space") {
    TestField tf;
    std::mt19937 rng(19);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const double h = 1e-4;
    for (int trial = 0; trial < 1000; ++trial) {
        Vec3 x{u(rng), u(rng), u(rng)}, pi{u(rng), u(rng), u(rng)};
        double div = 0.0, scale = 0.0;
        for (int axis = 0; axis < 3; ++axis) {
            Vec3 dx{0, 0, 0};
            dx[axis] = h;
            auto xp = characteristic_rhs(pi, tf.sample(x + dx));
            auto xm = characteristic_rhs(pi, tf.sample(x - dx));
            div += (xp.x_dot[axis] - xm.x_dot[axis]) / (2.0 * h);
            auto pp = characteristic_rhs(pi + dx, tf.sample(x));
            auto pm = characteristic_rhs(pi - dx, tf.sample(x));
            div += (pp.pi_dot[axis] - pm.pi_dot[axis]) / (2.0 * h);
            scale = std::max({scale, norm(xp.x_dot), norm(xp.pi_dot), 1e-3});
        }
        CHECK(std::abs(div) <= 1e-6 * scale);
    }
}

TEST_CASE("free streaming step is exact translation") {
    Ensemble e;
    e.softening = 0.1;
    e.markers.push_back({{0.1, 0.2, 0.3}, {0.5, -0.4, 0.2}, 0.0});
    e.markers.push_back({{-0.3, 0.0, 0.1}, {0.0, 0.9, -0.1}, 0.0});
    double dt = 0.37;
    auto zero_provider = [](const std::vector<Vec3>& pts, double) {
        return std::vector<FieldSample>(pts.size());
    };
    auto out = rk4_step(e, dt, zero_provider);
    CHECK(out.time == doctest::Approx(e.time + dt));
    for (std::size_t i = 0; i < e.size(); ++i) {
        Vec3 v = relativistic_velocity(e.markers[i].pi);
        CHECK(norm(out.markers[i].x - (e.markers[i].x + dt * v)) <= 1e-12);
        CHECK(norm(out.markers[i].pi - e.markers[i].pi) <= 1e-15);
        CHECK(out.markers[i].w == e.markers[i].w);
    }
}

TEST_CASE("fourth-order convergence in a frozen analytic field") {
    TestField tf;
    auto field_at = [&](const Vec3& x, double) { return tf.sample(x); };

    auto integrate = [&](double dt, double t_final) {
        Vec3 x{0.2, -0.1, 0.3}, pi{0.6, 0.2, -0.4};
        int n = static_cast<int>(std::round(t_final / dt));
        for (int s = 0; s < n; ++s) rk4_point(x, pi, s * dt, dt, field_at);
        return std::pair<Vec3, Vec3>{x, pi};
    };

    // Hamiltonian drift per unit time is O(dt^4) in a static field
    auto h_drift = [&](double dt) {
        Vec3 x{0.2, -0.1, 0.3}, pi{0.6, 0.2, -0.4};
        double h0 = hamiltonian(pi, tf.a(x), tf.phi(x));
        int n = static_cast<int>(std::round(2.0 / dt));
        for (int s = 0; s < n; ++s) rk4_point(x, pi, s * dt, dt, field_at);
        return std::abs(hamiltonian(pi, tf.a(x), tf.phi(x)) - h0);
    };
    double d1 = h_drift(0.05), d2 = h_drift(0.025);
    CHECK(d1 / d2 >= 8.0);   // ~16 for a clean 4th-order scheme
    CHECK(d1 / d2 <= 40.0);

    // Richardson: position error ratio ~ 16 against a fine reference
    auto ref = integrate(0.003125, 2.0);
    auto c1 = integrate(0.05, 2.0);
    auto c2 = integrate(0.025, 2.0);
    double e1 = norm(c1.first - ref.first);
    double e2 = norm(c2.first - ref.first);
    CHECK(e1 / e2 >= 10.0);
    CHECK(e1 / e2 <= 24.0);
}
