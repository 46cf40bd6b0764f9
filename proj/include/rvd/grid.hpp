#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rvd/errors.hpp"
#include "rvd/vec.hpp"

namespace rvd {

// Uniform cell-centered grid. origin is the low corner of cell (0,0,0);
// the center of cell (i,j,k) sits at origin + (i+1/2, j+1/2, k+1/2) h.
template <class T>
struct Grid3 {
    Vec3 origin;
    double h = 1.0;
    std::array<int, 3> dims{0, 0, 0};
    std::vector<T> values;

    Grid3() = default;
    Grid3(Vec3 org, double cell, std::array<int, 3> d) : origin(org), h(cell), dims(d) {
        values.assign(cell_count(), T{});
    }

    std::size_t cell_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k;
    }
    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
    }
    T& at(int i, int j, int k) { return values[index(i, j, k)]; }
    const T& at(int i, int j, int k) const { return values[index(i, j, k)]; }

    Vec3 cell_center(int i, int j, int k) const {
        return {origin.x + (i + 0.5) * h, origin.y + (j + 0.5) * h, origin.z + (k + 0.5) * h};
    }

    double cell_volume() const { return h * h * h; }

    bool same_geometry(const Grid3& o) const {
        return dims == o.dims && h == o.h && origin.x == o.origin.x && origin.y == o.origin.y &&
               origin.z == o.origin.z;
    }

    template <class F>
    void for_each_cell(F&& fn) const {
        for (int i = 0; i < dims[0]; ++i)
            for (int j = 0; j < dims[1]; ++j)
                for (int k = 0; k < dims[2]; ++k) fn(i, j, k, at(i, j, k));
    }
};

using ScalarGrid = Grid3<double>;
using VectorGrid = Grid3<Vec3>;

// Centered-difference divergence; one-sided at the boundary layer.
inline ScalarGrid divergence(const VectorGrid& g) {
    ScalarGrid out(g.origin, g.h, g.dims);
    const double inv2h = 1.0 / (2.0 * g.h);
    for (int i = 0; i < g.dims[0]; ++i)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int k = 0; k < g.dims[2]; ++k) {
                auto diff = [&](int axis) {
                    int ip = i, jp = j, kp = k, im = i, jm = j, km = k;
                    (axis == 0 ? ip : axis == 1 ? jp : kp) += 1;
                    (axis == 0 ? im : axis == 1 ? jm : km) -= 1;
                    const Vec3& hi = g.in_bounds(ip, jp, kp) ? g.at(ip, jp, kp) : g.at(i, j, k);
                    const Vec3& lo = g.in_bounds(im, jm, km) ? g.at(im, jm, km) : g.at(i, j, k);
                    double scale = (g.in_bounds(ip, jp, kp) && g.in_bounds(im, jm, km)) ? inv2h : 2.0 * inv2h;
                    return (hi[axis] - lo[axis]) * scale;
                };
                out.at(i, j, k) = diff(0) + diff(1) + diff(2);
            }
    return out;
}

template <class T, class Norm>
double grid_linf(const Grid3<T>& g, Norm&& n) {
    double s = 0.0;
    for (const auto& v : g.values) s = std::max(s, n(v));
    return s;
}

inline double grid_linf(const ScalarGrid& g) {
    return grid_linf(g, [](double v) { return std::abs(v); });
}
inline double grid_linf(const VectorGrid& g) {
    return grid_linf(g, [](const Vec3& v) { return norm(v); });
}

inline double grid_l1(const ScalarGrid& g) {
    double s = 0.0;
    for (double v : g.values) s += std::abs(v);
    return s * g.cell_volume();
}
inline double grid_l1(const VectorGrid& g) {
    double s = 0.0;
    for (const auto& v : g.values) s += norm(v);
    return s * g.cell_volume();
}

// L^q norm by cell quadrature; q = inf handled by grid_linf.
inline double grid_lq(const ScalarGrid& g, double q) {
    double s = 0.0;
    for (double v : g.values) s += std::pow(std::abs(v), q);
    return std::pow(s * g.cell_volume(), 1.0 / q);
}

// Trilinear gather of a cell-centered scalar field; zero outside.
inline double gather(const ScalarGrid& g, const Vec3& p) {
    double fx = (p.x - g.origin.x) / g.h - 0.5;
    double fy = (p.y - g.origin.y) / g.h - 0.5;
    double fz = (p.z - g.origin.z) / g.h - 0.5;
    int i = static_cast<int>(std::floor(fx));
    int j = static_cast<int>(std::floor(fy));
    int k = static_cast<int>(std::floor(fz));
    double dx = fx - i, dy = fy - j, dz = fz - k;
    double out = 0.0;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
                if (!g.in_bounds(i + a, j + b, k + c)) continue;
                double wgt = (a ? dx : 1.0 - dx) * (b ? dy : 1.0 - dy) * (c ? dz : 1.0 - dz);
                out += wgt * g.at(i + a, j + b, k + c);
            }
    return out;
}

}  // namespace rvd
