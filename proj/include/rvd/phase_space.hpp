#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rvd/errors.hpp"
#include "rvd/vec.hpp"

namespace rvd {

// Compactly supported product bump
//   f0(x, pi) = delta * (1 - |x/X0|^2)_+^kappa * (1 - |pi/P0|^2)_+^kappa,
// C^1 on phase space for kappa >= 2.
struct BumpDatum {
    double delta = 0.0;      // amplitude, >= 0
    double x_radius = 1.0;   // X0 > 0
    double p_radius = 1.0;   // P0 > 0
    int kappa = 2;           // profile exponent, >= 2

    void validate(const char* path = "datum") const {
        if (!(delta >= 0.0) || !std::isfinite(delta))
            throw ConfigError(std::string(path) + ".delta", "must be >= 0");
        if (!(x_radius > 0.0)) throw ConfigError(std::string(path) + ".x_radius", "must be > 0");
        if (!(p_radius > 0.0)) throw ConfigError(std::string(path) + ".p_radius", "must be > 0");
        if (kappa < 2) throw ConfigError(std::string(path) + ".kappa", "must be >= 2");
    }

    double value(const Vec3& x, const Vec3& pi) const {
        double sx = norm2(x) / (x_radius * x_radius);
        double sp = norm2(pi) / (p_radius * p_radius);
        if (sx >= 1.0 || sp >= 1.0) return 0.0;
        return delta * std::pow(1.0 - sx, kappa) * std::pow(1.0 - sp, kappa);
    }
};

struct Marker {
    Vec3 x;    // position
    Vec3 pi;   // generalized momentum
    double w;  // phase-space weight, fixed at sampling time
};

struct Ensemble {
    std::vector<Marker> markers;
    double softening = 0.0;    // eps > 0 for self-consistent solves
    double light_speed = 1.0;  // kept explicit for unit audits
    double time = 0.0;

    std::size_t size() const { return markers.size(); }

    double total_weight() const {
        double s = 0.0;
        for (const auto& m : markers) s += m.w;
        return s;
    }
    double max_weight() const {
        double s = 0.0;
        for (const auto& m : markers) s = std::max(s, m.w);
        return s;
    }
};

struct DatumNorms {
    double l1 = 0.0;
    double linf = 0.0;
    double w1inf = 0.0;  // reported W^{1,inf} value of the concrete bump
};

namespace detail {

// int_0^1 (1-s^2)^kappa s^2 ds = sqrt(pi) Gamma(kappa+1) / (4 Gamma(kappa+5/2))
inline double radial_profile_integral(int kappa) {
    return std::sqrt(M_PI) * std::tgamma(kappa + 1.0) / (4.0 * std::tgamma(kappa + 2.5));
}

// max_s |d/ds (1-s^2)^kappa| on [0,1], attained at s = 1/sqrt(2k-1)
inline double max_profile_slope(int kappa) {
    double s = 1.0 / std::sqrt(2.0 * kappa - 1.0);
    return 2.0 * kappa * s * std::pow(1.0 - s * s, kappa - 1.0);
}

// xorshift64*, used only for the optional sampling jitter
inline std::uint64_t next_rand(std::uint64_t& state) {
    state ^= state >> 12;
    state ^= state << 25;
    state ^= state >> 27;
    return state * 0x2545F4914F6CDD1DULL;
}

inline double unit_rand(std::uint64_t& state) {
    return (next_rand(state) >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace detail

inline DatumNorms datum_norms(const BumpDatum& d) {
    d.validate();
    DatumNorms out;
    out.linf = d.delta;
    double radial = detail::radial_profile_integral(d.kappa);
    double ball_x = 4.0 * M_PI * radial * d.x_radius * d.x_radius * d.x_radius;
    double ball_p = 4.0 * M_PI * radial * d.p_radius * d.p_radius * d.p_radius;
    out.l1 = d.delta * ball_x * ball_p;
    double slope = detail::max_profile_slope(d.kappa);
    out.w1inf = d.delta * std::max({1.0, slope / d.x_radius, slope / d.p_radius});
    return out;
}

// Midpoint-rule tensor lattice over B_{X0} x B_{P0}. Zero-weight markers are
// dropped. seed == 0 places markers at cell midpoints; seed > 0 jitters each
// marker uniformly inside its cell (weights stay f0 * cell volume).
inline Ensemble sample_bump(const BumpDatum& datum, int n_per_axis, std::uint64_t seed = 0) {
    datum.validate();
    if (n_per_axis < 2) throw ConfigError("n_per_axis", "must be >= 2");

    const int n = n_per_axis;
    const double hx = 2.0 * datum.x_radius / n;
    const double hp = 2.0 * datum.p_radius / n;
    const double cell_vol = hx * hx * hx * hp * hp * hp;

    std::uint64_t rng = seed ? seed * 0x9E3779B97F4A7C15ULL + 1 : 0;
    auto coord = [&](int i, double h, double radius) { return -radius + (i + 0.5) * h; };

    Ensemble e;
    e.softening = 0.2 * hx;
    std::vector<double> xs(n), ps(n);
    for (int i = 0; i < n; ++i) xs[i] = coord(i, hx, datum.x_radius);
    for (int i = 0; i < n; ++i) ps[i] = coord(i, hp, datum.p_radius);

    for (int ix = 0; ix < n; ++ix)
        for (int iy = 0; iy < n; ++iy)
            for (int iz = 0; iz < n; ++iz) {
                Vec3 x{xs[ix], xs[iy], xs[iz]};
                if (norm2(x) >= datum.x_radius * datum.x_radius && !seed) continue;
                for (int jx = 0; jx < n; ++jx)
                    for (int jy = 0; jy < n; ++jy)
                        for (int jz = 0; jz < n; ++jz) {
                            Vec3 p{ps[jx], ps[jy], ps[jz]};
                            Vec3 xm = x, pm = p;
                            if (seed) {
                                xm.x += (detail::unit_rand(rng) - 0.5) * hx;
                                xm.y += (detail::unit_rand(rng) - 0.5) * hx;
                                xm.z += (detail::unit_rand(rng) - 0.5) * hx;
                                pm.x += (detail::unit_rand(rng) - 0.5) * hp;
                                pm.y += (detail::unit_rand(rng) - 0.5) * hp;
                                pm.z += (detail::unit_rand(rng) - 0.5) * hp;
                            }
                            double w = datum.value(xm, pm) * cell_vol;
                            if (w > 0.0) e.markers.push_back({xm, pm, w});
                        }
            }
    return e;
}

struct SupportRadii {
    double x_bar = 0.0;
    double p_bar = 0.0;
};

// Discrete X(t), P(t): maxima of |x| and |pi| over markers carrying weight.
inline SupportRadii support_radii(const Ensemble& e) {
    SupportRadii r;
    for (const auto& m : e.markers) {
        if (m.w <= 0.0) continue;
        r.x_bar = std::max(r.x_bar, norm(m.x));
        r.p_bar = std::max(r.p_bar, norm(m.pi));
    }
    return r;
}

}  // namespace rvd
