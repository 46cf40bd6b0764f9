#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rvd/phase_space.hpp"

using namespace rvd;

// Independent oracle: 1-D radial Simpson quadrature of the separable bump,
// |f0|_1 = delta * prod_{x,p} 4 pi R^3 int_0^1 (1-s^2)^kappa s^2 ds.
static double bump_l1_quadrature(const BumpDatum& d) {
    auto radial = [&](int kappa) {
        const int n = 20000;  // even
        double h = 1.0 / n, s = 0.0;
        auto f = [&](double t) { return std::pow(1.0 - t * t, kappa) * t * t; };
        for (int i = 1; i < n; i += 2) s += 4.0 * f(i * h);
        for (int i = 2; i < n; i += 2) s += 2.0 * f(i * h);
        return (s + f(0.0) + f(1.0)) * h / 3.0;
    };
    double rad = radial(d.kappa);
    double bx = 4.0 * M_PI * rad * std::pow(d.x_radius, 3);
    double bp = 4.0 * M_PI * rad * std::pow(d.p_radius, 3);
    return d.delta * bx * bp;
}

TEST_CASE("datum norms against closed form and quadrature oracle") {
    BumpDatum d{1.0, 1.0, 1.0, 2};
    auto n = datum_norms(d);
    CHECK(n.linf == 1.0);
    // closed form (4 pi * 8/105)^2
    double expect = std::pow(4.0 * M_PI * 8.0 / 105.0, 2);
    CHECK(n.l1 == doctest::Approx(expect).epsilon(1e-12));
    CHECK(n.l1 == doctest::Approx(bump_l1_quadrature(d)).epsilon(1e-10));
    CHECK(n.l1 == doctest::Approx(0.916).epsilon(1e-3));

    BumpDatum d3{0.5, 2.0, 0.7, 3};
    auto n3 = datum_norms(d3);
    CHECK(n3.linf == 0.5);
    CHECK(n3.l1 == doctest::Approx(bump_l1_quadrature(d3)).epsilon(1e-10));
}

TEST_CASE("zero datum") {
    BumpDatum d{0.0, 1.0, 1.0, 2};
    auto n = datum_norms(d);
    CHECK(n.l1 == 0.0);
    CHECK(n.linf == 0.0);
    auto e = sample_bump(d, 6);
    CHECK(e.markers.empty());
    CHECK(e.total_weight() == 0.0);
}

TEST_CASE("invalid datum rejected") {
    CHECK_THROWS_AS(datum_norms(BumpDatum{-1.0, 1.0, 1.0, 2}), ConfigError);
    CHECK_THROWS_AS(sample_bump(BumpDatum{1.0, 0.0, 1.0, 2}, 4), ConfigError);
    CHECK_THROWS_AS(sample_bump(BumpDatum{1.0, 1.0, -2.0, 2}, 4), ConfigError);
    CHECK_THROWS_AS(sample_bump(BumpDatum{1.0, 1.0, 1.0, 2}, 1), ConfigError);
}

TEST_CASE("midpoint sampling converges to the L1 oracle") {
    BumpDatum d{1.0, 1.0, 1.0, 2};
    double exact = bump_l1_quadrature(d);
    double w8 = sample_bump(d, 8).total_weight();
    CHECK(std::abs(w8 - exact) / exact < 0.05);

    double w16 = sample_bump(d, 16).total_weight();
    double gain = std::abs(w8 - exact) / std::abs(w16 - exact);
    CHECK(gain >= 3.0);  // second-order midpoint rule
}

TEST_CASE("sampling is deterministic") {
    BumpDatum d{0.3, 1.2, 0.8, 2};
    auto a = sample_bump(d, 5);
    auto b = sample_bump(d, 5);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.markers[i].x.x == b.markers[i].x.x);
        CHECK(a.markers[i].pi.z == b.markers[i].pi.z);
        CHECK(a.markers[i].w == b.markers[i].w);
    }
    auto j1 = sample_bump(d, 5, 7);
    auto j2 = sample_bump(d, 5, 7);
    REQUIRE(j1.size() == j2.size());
    CHECK(j1.markers[0].x.x == j2.markers[0].x.x);
    // jittered sample still integrates the datum roughly
    CHECK(j1.total_weight() == doctest::Approx(bump_l1_quadrature(d)).epsilon(0.2));
}

TEST_CASE("support radii") {
    Ensemble empty;
    auto r0 = support_radii(empty);
    CHECK(r0.x_bar == 0.0);
    CHECK(r0.p_bar == 0.0);

    BumpDatum d{1.0, 1.0, 1.0, 2};
    auto e = sample_bump(d, 8);
    auto r = support_radii(e);
    CHECK(r.x_bar <= 1.0);
    CHECK(r.p_bar <= 1.0);
    CHECK(r.x_bar > 0.5);

    // monotone under enlarging the marker set
    auto bigger = e;
    bigger.markers.push_back({{2.0, 0.0, 0.0}, {0.0, 0.0, 3.0}, 1e-6});
    auto rb = support_radii(bigger);
    CHECK(rb.x_bar >= r.x_bar);
    CHECK(rb.p_bar >= r.p_bar);
    CHECK(rb.x_bar == doctest::Approx(2.0));

    // zero-weight markers do not count
    auto ghosted = e;
    ghosted.markers.push_back({{9.0, 0.0, 0.0}, {0.0, 0.0, 9.0}, 0.0});
    auto rg = support_radii(ghosted);
    CHECK(rg.x_bar == r.x_bar);
}

TEST_CASE("free streaming support growth bound") {
    BumpDatum d{1.0, 1.0, 1.0, 2};
    auto e = sample_bump(d, 6);
    double t = 2.5;
    for (auto& m : e.markers) {
        Vec3 v = m.pi / std::sqrt(1.0 + norm2(m.pi));
        m.x += t * v;  // |v| < 1
    }
    auto r = support_radii(e);
    CHECK(r.x_bar <= 1.0 + t);
}

TEST_CASE("reported W1inf value") {
    // kappa = 2, unit radii: max profile slope 8/(3 sqrt 3)
    auto n = datum_norms(BumpDatum{1.0, 1.0, 1.0, 2});
    CHECK(n.w1inf == doctest::Approx(8.0 / (3.0 * std::sqrt(3.0))).epsilon(1e-12));
    // wide bump: slope below 1, sup value dominates
    auto nw = datum_norms(BumpDatum{1.0, 4.0, 4.0, 2});
    CHECK(nw.w1inf == doctest::Approx(1.0));
}
