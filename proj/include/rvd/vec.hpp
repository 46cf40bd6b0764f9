#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace rvd {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr const double& operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

    constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    constexpr Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
};

constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
constexpr Vec3 operator/(Vec3 a, double s) { return a *= (1.0 / s); }
constexpr Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
constexpr double norm2(const Vec3& a) { return dot(a, a); }
inline double norm(const Vec3& a) { return std::sqrt(norm2(a)); }
inline double norm_inf(const Vec3& a) {
    return std::max(std::abs(a.x), std::max(std::abs(a.y), std::abs(a.z)));
}

// Row-major 3x3 matrix; m[i][k] indexes row i, column k.
struct Mat3 {
    std::array<std::array<double, 3>, 3> m{};

    constexpr double& operator()(std::size_t i, std::size_t k) { return m[i][k]; }
    constexpr const double& operator()(std::size_t i, std::size_t k) const { return m[i][k]; }

    constexpr Mat3& operator+=(const Mat3& o) {
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) m[i][k] += o.m[i][k];
        return *this;
    }
    constexpr Mat3& operator*=(double s) {
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) m[i][k] *= s;
        return *this;
    }

    static constexpr Mat3 identity() {
        Mat3 r;
        r.m[0][0] = r.m[1][1] = r.m[2][2] = 1.0;
        return r;
    }
};

constexpr Mat3 operator+(Mat3 a, const Mat3& b) { return a += b; }
constexpr Mat3 operator*(double s, Mat3 a) { return a *= s; }

// y = M x
constexpr Vec3 mul(const Mat3& a, const Vec3& v) {
    return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
            a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
            a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

// y = M^T x
constexpr Vec3 mul_t(const Mat3& a, const Vec3& v) {
    return {a(0, 0) * v.x + a(1, 0) * v.y + a(2, 0) * v.z,
            a(0, 1) * v.x + a(1, 1) * v.y + a(2, 1) * v.z,
            a(0, 2) * v.x + a(1, 2) * v.y + a(2, 2) * v.z};
}

constexpr double trace(const Mat3& a) { return a(0, 0) + a(1, 1) + a(2, 2); }

constexpr double det(const Mat3& a) {
    return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
           a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
           a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

inline double norm_fro(const Mat3& a) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) s += a(i, k) * a(i, k);
    return std::sqrt(s);
}

inline double max_abs(const Mat3& a) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) s = std::max(s, std::abs(a(i, k)));
    return s;
}

// Curl read off the antisymmetric part, with a(i,k) = d A^i / d x_k.
constexpr Vec3 curl_from_jacobian(const Mat3& a) {
    return {a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1)};
}

}  // namespace rvd
