#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

#include "rvd/errors.hpp"
#include "rvd/grid.hpp"
#include "rvd/parallel.hpp"
#include "rvd/vec.hpp"

namespace rvd {

// One smoothed point source: position y, vector payload u (e.g. w * v_A) and
// scalar payload w_scalar (e.g. w for the charge density).
struct VectorSource {
    Vec3 y;
    Vec3 u;
    double w_scalar = 0.0;
};

struct KernelConfig {
    double softening = 0.0;   // eps; 0 only valid with separated source/target
    int parallel_chunk = 256; // sources per partial sum, fixed reduction order
};

struct ScalarSample {
    double phi = 0.0;
    Vec3 grad_phi;
};

struct VectorSample {
    Vec3 a;
    Mat3 grad_a;      // grad_a(i,k) = dA^i/dx_k
    Vec3 curl_a;      // from the direct omega x j kernel
};

struct FieldSample {
    double phi = 0.0;
    Vec3 grad_phi;
    Vec3 a;
    Mat3 grad_a;
};

namespace detail {

// Plummer softening: r -> s = sqrt(r^2 + eps^2) and omega -> (y - x)/s.
//   phi      += w / s
//   grad_phi += w d / s^3                      (omega / r^2 softened)
//   a        += [u + d (u.d)/s^2] / (2 s)
//   grad_a   += [u (x) d - d (x) u - id (u.d) + 3 d (x) d (u.d)/s^2] / (2 s^3)
//   curl     += (d x u) / s^3
// grad_a is the exact x-gradient of the softened a kernel; its trace is
// -(3/2) eps^2 (u.d)/s^5, vanishing algebraically at eps = 0.
struct PairAccum {
    double phi = 0.0;
    Vec3 grad_phi;
    Vec3 a;
    Mat3 grad_a;
    Vec3 curl;

    inline void add(const Vec3& x, const VectorSource& src, double eps2, bool with_scalar,
                    bool with_vector, std::atomic<bool>& singular) {
        Vec3 d = src.y - x;
        double s2 = norm2(d) + eps2;
        if (s2 == 0.0) {
            singular.store(true, std::memory_order_relaxed);
            return;
        }
        double inv_s = 1.0 / std::sqrt(s2);
        double inv_s2 = 1.0 / s2;
        double inv_s3 = inv_s * inv_s2;
        if (with_scalar) {
            phi += src.w_scalar * inv_s;
            grad_phi += (src.w_scalar * inv_s3) * d;
        }
        if (with_vector) {
            const Vec3& u = src.u;
            double ud = dot(u, d);
            a += (0.5 * inv_s) * (u + (ud * inv_s2) * d);
            double c = 0.5 * inv_s3;
            double t3 = 3.0 * ud * inv_s2;
            for (int i = 0; i < 3; ++i)
                for (int k = 0; k < 3; ++k)
                    grad_a(i, k) += c * (u[i] * d[k] - u[k] * d[i] + d[i] * d[k] * t3 - (i == k ? ud : 0.0));
            curl += inv_s3 * cross(d, u);
        }
    }

    inline void merge(const PairAccum& o) {
        phi += o.phi;
        grad_phi += o.grad_phi;
        a += o.a;
        grad_a += o.grad_a;
        curl += o.curl;
    }
};

// Sums sources in ascending index order, reduced in fixed-size chunks so the
// floating-point reduction order is independent of worker count.
template <class Emit>
void kernel_sum(const std::vector<VectorSource>& sources, const std::vector<Vec3>& targets,
                const KernelConfig& cfg, bool with_scalar, bool with_vector, Emit&& emit) {
    const double eps2 = cfg.softening * cfg.softening;
    const std::size_t chunk = cfg.parallel_chunk > 0 ? cfg.parallel_chunk : 256;
    std::atomic<bool> singular{false};

    parallel_for(targets.size(), [&](std::size_t t) {
        PairAccum total;
        for (std::size_t b = 0; b < sources.size(); b += chunk) {
            PairAccum part;
            std::size_t e = std::min(b + chunk, sources.size());
            for (std::size_t l = b; l < e; ++l)
                part.add(targets[t], sources[l], eps2, with_scalar, with_vector, singular);
            total.merge(part);
        }
        emit(t, total);
    });

    if (singular.load())
        throw SingularEvalError("kernel evaluation with eps = 0 at a source location");
}

}  // namespace detail

// Softened Coulomb sums: phi(x) = sum w / s, grad phi(x) = sum w d / s^3.
inline std::vector<ScalarSample> scalar_kernel_sum(const std::vector<VectorSource>& sources,
                                                   const std::vector<Vec3>& targets,
                                                   const KernelConfig& cfg) {
    std::vector<ScalarSample> out(targets.size());
    detail::kernel_sum(sources, targets, cfg, true, false, [&](std::size_t t, const detail::PairAccum& acc) {
        out[t] = {acc.phi, acc.grad_phi};
    });
    return out;
}

// Darwin vector-potential sums: a, its space derivative and the curl.
inline std::vector<VectorSample> darwin_kernel_sum(const std::vector<VectorSource>& sources,
                                                   const std::vector<Vec3>& targets,
                                                   const KernelConfig& cfg) {
    std::vector<VectorSample> out(targets.size());
    detail::kernel_sum(sources, targets, cfg, false, true, [&](std::size_t t, const detail::PairAccum& acc) {
        out[t] = {acc.a, acc.grad_a, acc.curl};
    });
    return out;
}

// Vector potential only; the inner loop of the self-consistency iteration.
inline std::vector<Vec3> vector_potential_sum(const std::vector<VectorSource>& sources,
                                              const std::vector<Vec3>& targets,
                                              const KernelConfig& cfg) {
    const double eps2 = cfg.softening * cfg.softening;
    const std::size_t chunk = cfg.parallel_chunk > 0 ? cfg.parallel_chunk : 256;
    std::vector<Vec3> out(targets.size());
    std::atomic<bool> singular{false};
    parallel_for(targets.size(), [&](std::size_t t) {
        Vec3 total;
        for (std::size_t b = 0; b < sources.size(); b += chunk) {
            Vec3 part;
            std::size_t e = std::min(b + chunk, sources.size());
            for (std::size_t l = b; l < e; ++l) {
                Vec3 d = sources[l].y - targets[t];
                double s2 = norm2(d) + eps2;
                if (s2 == 0.0) {
                    singular.store(true, std::memory_order_relaxed);
                    continue;
                }
                double inv_s = 1.0 / std::sqrt(s2);
                const Vec3& u = sources[l].u;
                part += (0.5 * inv_s) * (u + (dot(u, d) / s2) * d);
            }
            total += part;
        }
        out[t] = total;
    });
    if (singular.load())
        throw SingularEvalError("kernel evaluation with eps = 0 at a source location");
    return out;
}

// Full bundle (phi, grad phi, a, grad a) in one pass over the pair list.
inline std::vector<FieldSample> field_kernel_sum(const std::vector<VectorSource>& sources,
                                                 const std::vector<Vec3>& targets,
                                                 const KernelConfig& cfg) {
    std::vector<FieldSample> out(targets.size());
    detail::kernel_sum(sources, targets, cfg, true, true, [&](std::size_t t, const detail::PairAccum& acc) {
        out[t] = {acc.phi, acc.grad_phi, acc.a, acc.grad_a};
    });
    return out;
}

namespace detail {

inline void check_support_interior(const VectorGrid& j) {
    auto nonzero = [](const Vec3& v) { return v.x != 0.0 || v.y != 0.0 || v.z != 0.0; };
    for (int i = 0; i < j.dims[0]; ++i)
        for (int jj = 0; jj < j.dims[1]; ++jj)
            for (int k = 0; k < j.dims[2]; ++k) {
                bool boundary = i == 0 || jj == 0 || k == 0 || i == j.dims[0] - 1 ||
                                jj == j.dims[1] - 1 || k == j.dims[2] - 1;
                if (boundary && nonzero(j.at(i, jj, k)))
                    throw SupportOverflowError("current support touches the grid boundary");
            }
}

struct GridSources {
    std::vector<VectorSource> with_div;  // u = j * h^3, w_scalar = div j * h^3
    std::vector<Vec3> positions;
};

inline GridSources gridded_current(const VectorGrid& j) {
    check_support_interior(j);
    ScalarGrid div = divergence(j);
    GridSources out;
    const double vol = j.cell_volume();
    j.for_each_cell([&](int a, int b, int c, const Vec3& v) {
        double dv = div.at(a, b, c);
        if (v.x == 0.0 && v.y == 0.0 && v.z == 0.0 && dv == 0.0) return;
        out.with_div.push_back({j.cell_center(a, b, c), vol * v, vol * dv});
        out.positions.push_back(j.cell_center(a, b, c));
    });
    return out;
}

}  // namespace detail

// A_D(x) = int j / |y-x| + (1/2) int div j (y-x)/|y-x|, by midpoint quadrature
// of the gridded current. Equivalent to the [id + omega (x) omega] kernel form.
inline std::vector<Vec3> equivalent_vector_potential(const VectorGrid& grid_j,
                                                     const std::vector<Vec3>& targets,
                                                     const KernelConfig& cfg) {
    auto src = detail::gridded_current(grid_j);
    const double eps2 = cfg.softening * cfg.softening;
    std::vector<Vec3> out(targets.size());
    std::atomic<bool> singular{false};
    parallel_for(targets.size(), [&](std::size_t t) {
        Vec3 acc;
        for (const auto& s : src.with_div) {
            Vec3 d = s.y - targets[t];
            double s2 = norm2(d) + eps2;
            if (s2 == 0.0) {
                singular.store(true, std::memory_order_relaxed);
                continue;
            }
            double inv_s = 1.0 / std::sqrt(s2);
            acc += inv_s * s.u;                       // j / s
            acc += (0.5 * s.w_scalar * inv_s) * d;    // (1/2) div j * omega
        }
        out[t] = acc;
    });
    if (singular.load()) throw SingularEvalError("equivalent representation with eps = 0 on a cell center");
    return out;
}

// Pj(x) = j(x) + (1/4 pi) grad int div j(y) / |y-x| dy at selected targets
// (cell indices). The gradient kernel is d / s^3.
inline std::vector<Vec3> transversal_projection_at(const VectorGrid& grid_j,
                                                   const std::vector<std::array<int, 3>>& cells,
                                                   const KernelConfig& cfg) {
    auto src = detail::gridded_current(grid_j);
    const double eps2 = cfg.softening * cfg.softening;
    std::vector<Vec3> out(cells.size());
    parallel_for(cells.size(), [&](std::size_t t) {
        auto [i, j, k] = cells[t];
        Vec3 x = grid_j.cell_center(i, j, k);
        Vec3 acc;
        for (const auto& s : src.with_div) {
            if (s.w_scalar == 0.0) continue;
            Vec3 d = s.y - x;
            double s2 = norm2(d) + eps2;
            double inv_s = 1.0 / std::sqrt(s2);
            acc += (s.w_scalar * inv_s / s2) * d;
        }
        out[t] = grid_j.at(i, j, k) + (1.0 / (4.0 * M_PI)) * acc;
    });
    return out;
}

// Whole-grid transversal projection.
inline VectorGrid transversal_projection(const VectorGrid& grid_j, const KernelConfig& cfg) {
    std::vector<std::array<int, 3>> cells;
    cells.reserve(grid_j.cell_count());
    for (int i = 0; i < grid_j.dims[0]; ++i)
        for (int j = 0; j < grid_j.dims[1]; ++j)
            for (int k = 0; k < grid_j.dims[2]; ++k) cells.push_back({i, j, k});
    auto vals = transversal_projection_at(grid_j, cells, cfg);
    VectorGrid out(grid_j.origin, grid_j.h, grid_j.dims);
    for (std::size_t n = 0; n < cells.size(); ++n)
        out.at(cells[n][0], cells[n][1], cells[n][2]) = vals[n];
    return out;
}

// Interpolation inequality  sup_x int psi(y)/|y-x|^m dy <= C(m,r,s) |psi|_r^(1-lambda) |psi|_s^lambda.
inline double pallard_constant_explicit(double m) {
    return 3.0 * std::pow(4.0 * M_PI / m, m / 3.0) / (3.0 - m);
}

struct PallardReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double constant = 0.0;
    double lambda = 0.0;
};

namespace detail {

// Radius-splitting bound: g(R) = |psi|_s |1/r^m|_{L^{s'}(r<R)} + |psi|_r |1/r^m|_{L^{r'}(r>R)},
// minimized over R by golden-section on log R. Conservative for (r,s) != (1,inf).
inline double pallard_split_min(double m, double r, double s, double nr, double ns) {
    // Hoelder-conjugate norm of r^-m over the ball (inner) or its complement.
    auto inner_norm = [&](double q, double R) {
        double qp = std::isinf(q) ? 1.0 : q / (q - 1.0);
        double expo = 3.0 - m * qp;  // > 0 since s > 3/(3-m)
        return std::pow(4.0 * M_PI * std::pow(R, expo) / expo, 1.0 / qp);
    };
    auto outer_norm = [&](double q, double R) {
        if (q == 1.0) return std::pow(R, -m);  // q' = inf
        double qp = q / (q - 1.0);
        double expo = 3.0 - m * qp;  // < 0 since r < 3/(3-m)
        return std::pow(4.0 * M_PI * std::pow(R, expo) / (-expo), 1.0 / qp);
    };
    auto g = [&](double logR) {
        double R = std::exp(logR);
        return ns * inner_norm(s, R) + nr * outer_norm(r, R);
    };
    double lo = -20.0, hi = 20.0;
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = g(x1), f2 = g(x2);
    for (int it = 0; it < 200; ++it) {
        if (f1 < f2) {
            hi = x2; x2 = x1; f2 = f1;
            x1 = hi - gr * (hi - lo); f1 = g(x1);
        } else {
            lo = x1; x1 = x2; f1 = f2;
            x2 = lo + gr * (hi - lo); f2 = g(x2);
        }
    }
    return std::min(f1, f2);
}

}  // namespace detail

inline PallardReport pallard_bound(double m, const ScalarGrid& psi, double r, double s,
                                   const KernelConfig& cfg) {
    if (!(m >= 1.0 && m < 3.0)) throw InvalidExponentsError("m must lie in [1, 3)");
    double r0 = 3.0 / (3.0 - m);
    if (!(r >= 1.0 && r < r0 && r0 < s)) throw InvalidExponentsError("need 1 <= r < 3/(3-m) < s");
    for (double v : psi.values)
        if (v < 0.0) throw InvalidExponentsError("psi must be non-negative");

    PallardReport rep;
    rep.lambda = (1.0 - r / r0) / (1.0 - (std::isinf(s) ? 0.0 : r / s));

    double nr = std::isinf(r) ? grid_linf(psi) : grid_lq(psi, r);
    double ns = std::isinf(s) ? grid_linf(psi) : grid_lq(psi, s);

    if (r == 1.0 && std::isinf(s)) {
        rep.constant = pallard_constant_explicit(m);
    } else {
        double minval = detail::pallard_split_min(m, r, s, nr, ns);
        double denom = std::pow(nr, 1.0 - rep.lambda) * std::pow(ns, rep.lambda);
        rep.constant = denom > 0.0 ? minval / denom : 0.0;
    }
    rep.rhs = rep.constant * std::pow(nr, 1.0 - rep.lambda) * std::pow(ns, rep.lambda);

    // lhs: sup over cell centers of the softened Riesz sum
    const double eps2 = cfg.softening * cfg.softening;
    const double vol = psi.cell_volume();
    std::vector<Vec3> centers;
    std::vector<double> weights;
    psi.for_each_cell([&](int i, int j, int k, double v) {
        if (v != 0.0) {
            centers.push_back(psi.cell_center(i, j, k));
            weights.push_back(v * vol);
        }
    });
    std::vector<double> sums(psi.cell_count(), 0.0);
    std::vector<Vec3> targets;
    targets.reserve(psi.cell_count());
    psi.for_each_cell([&](int i, int j, int k, double) { targets.push_back(psi.cell_center(i, j, k)); });
    parallel_for(targets.size(), [&](std::size_t t) {
        double acc = 0.0;
        for (std::size_t l = 0; l < centers.size(); ++l) {
            double s2 = norm2(centers[l] - targets[t]) + eps2;
            acc += weights[l] * std::pow(s2, -0.5 * m);
        }
        sums[t] = acc;
    });
    for (double v : sums) rep.lhs = std::max(rep.lhs, v);
    return rep;
}

}  // namespace rvd
