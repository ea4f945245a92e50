#pragma once

// Trilinear stencil shared by sampling, scatter (adjoint) and positional
// derivatives. Corners outside [0, n-1] on any axis are skipped, which is
// the zero-padding boundary rule.

#include <cmath>
#include <cstddef>

#include "guidedrec/volume.hpp"

namespace guidedrec::interp {

struct Stencil {
    std::size_t index[8];
    double weight[8];
    // d(weight)/d(p_axis) for each corner.
    double dweight[8][3];
    bool valid[8];
    int count = 0;  // number of valid corners
};

inline bool build_stencil(const Dims3& dims, double px, double py, double pz, Stencil& s,
                          bool with_grad = false) {
    if (!(px > -1.0 && py > -1.0 && pz > -1.0 && px < dims[0] && py < dims[1] &&
          pz < dims[2])) {
        s.count = 0;
        return false;
    }
    const double fx = std::floor(px), fy = std::floor(py), fz = std::floor(pz);
    const int ix = static_cast<int>(fx), iy = static_cast<int>(fy), iz = static_cast<int>(fz);
    const double tx = px - fx, ty = py - fy, tz = pz - fz;
    const double wx[2] = {1.0 - tx, tx}, wy[2] = {1.0 - ty, ty}, wz[2] = {1.0 - tz, tz};
    const double dx[2] = {-1.0, 1.0};
    const std::size_t nx = dims[0], nxy = static_cast<std::size_t>(dims[0]) * dims[1];
    if (ix >= 0 && iy >= 0 && iz >= 0 && ix < dims[0] - 1 && iy < dims[1] - 1 && iz < dims[2] - 1) {
        const std::size_t base = static_cast<std::size_t>(ix) + nx * static_cast<std::size_t>(iy) +
                                 nxy * static_cast<std::size_t>(iz);
        for (int c = 0; c < 8; ++c) {
            const int ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
            s.valid[c] = true;
            s.index[c] = base + ox + nx * oy + nxy * oz;
            s.weight[c] = wx[ox] * wy[oy] * wz[oz];
            if (with_grad) {
                s.dweight[c][0] = dx[ox] * wy[oy] * wz[oz];
                s.dweight[c][1] = wx[ox] * dx[oy] * wz[oz];
                s.dweight[c][2] = wx[ox] * wy[oy] * dx[oz];
            }
        }
        s.count = 8;
        return true;
    }
    int count = 0;
    for (int c = 0; c < 8; ++c) {
        const int ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
        const int x = ix + ox, y = iy + oy, z = iz + oz;
        const bool ok = x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
        s.valid[c] = ok;
        if (!ok) {
            s.weight[c] = 0.0;
            continue;
        }
        ++count;
        s.index[c] = static_cast<std::size_t>(x) + nx * static_cast<std::size_t>(y) +
                     nxy * static_cast<std::size_t>(z);
        s.weight[c] = wx[ox] * wy[oy] * wz[oz];
        if (with_grad) {
            s.dweight[c][0] = dx[ox] * wy[oy] * wz[oz];
            s.dweight[c][1] = wx[ox] * dx[oy] * wz[oz];
            s.dweight[c][2] = wx[ox] * wy[oy] * dx[oz];
        }
    }
    s.count = count;
    return count > 0;
}

// Fully interior stencil: base index and fractional offsets when all eight
// corners are in range.
inline bool interior(const Dims3& dims, double px, double py, double pz, std::size_t& base, double& tx,
                     double& ty, double& tz) {
    if (!(px >= 0.0 && py >= 0.0 && pz >= 0.0)) return false;
    const int ix = static_cast<int>(px), iy = static_cast<int>(py), iz = static_cast<int>(pz);
    if (ix >= dims[0] - 1 || iy >= dims[1] - 1 || iz >= dims[2] - 1) return false;
    tx = px - ix;
    ty = py - iy;
    tz = pz - iz;
    base = static_cast<std::size_t>(ix) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(iy) + static_cast<std::size_t>(dims[1]) * iz);
    return true;
}

inline double sample(const double* data, const Dims3& dims, double px, double py, double pz) {
    std::size_t b;
    double tx, ty, tz;
    if (interior(dims, px, py, pz, b, tx, ty, tz)) {
        const std::size_t sy = dims[0], sz = static_cast<std::size_t>(dims[0]) * dims[1];
        const double* d = data + b;
        const double c00 = d[0] + tx * (d[1] - d[0]);
        const double c10 = d[sy] + tx * (d[sy + 1] - d[sy]);
        const double c01 = d[sz] + tx * (d[sz + 1] - d[sz]);
        const double c11 = d[sz + sy] + tx * (d[sz + sy + 1] - d[sz + sy]);
        const double c0 = c00 + ty * (c10 - c00);
        const double c1 = c01 + ty * (c11 - c01);
        return c0 + tz * (c1 - c0);
    }
    Stencil s;
    if (!build_stencil(dims, px, py, pz, s)) return 0.0;
    double acc = 0.0;
    for (int c = 0; c < 8; ++c)
        if (s.valid[c]) acc += s.weight[c] * data[s.index[c]];
    return acc;
}

inline double sample_grad(const double* data, const Dims3& dims, double px, double py, double pz,
                          double grad[3]) {
    Stencil s;
    grad[0] = grad[1] = grad[2] = 0.0;
    if (!build_stencil(dims, px, py, pz, s, true)) return 0.0;
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) {
        if (!s.valid[c]) continue;
        const double d = data[s.index[c]];
        acc += s.weight[c] * d;
        grad[0] += s.dweight[c][0] * d;
        grad[1] += s.dweight[c][1] * d;
        grad[2] += s.dweight[c][2] * d;
    }
    return acc;
}

inline void scatter(double* data, const Dims3& dims, double px, double py, double pz, double value) {
    std::size_t b;
    double tx, ty, tz;
    if (interior(dims, px, py, pz, b, tx, ty, tz)) {
        const std::size_t sy = dims[0], sz = static_cast<std::size_t>(dims[0]) * dims[1];
        double* d = data + b;
        const double z0 = (1.0 - tz) * value, z1 = tz * value;
        const double a00 = (1.0 - ty) * z0, a10 = ty * z0, a01 = (1.0 - ty) * z1, a11 = ty * z1;
        d[0] += (1.0 - tx) * a00;
        d[1] += tx * a00;
        d[sy] += (1.0 - tx) * a10;
        d[sy + 1] += tx * a10;
        d[sz] += (1.0 - tx) * a01;
        d[sz + 1] += tx * a01;
        d[sz + sy] += (1.0 - tx) * a11;
        d[sz + sy + 1] += tx * a11;
        return;
    }
    Stencil s;
    if (!build_stencil(dims, px, py, pz, s)) return;
    for (int c = 0; c < 8; ++c)
        if (s.valid[c]) data[s.index[c]] += s.weight[c] * value;
}

// Vector fields stored interleaved (3 doubles per node).
inline Vec3 sample3(const double* data, const Dims3& dims, double px, double py, double pz) {
    Stencil s;
    if (!build_stencil(dims, px, py, pz, s)) return Vec3::Zero();
    double a0 = 0, a1 = 0, a2 = 0;
    for (int c = 0; c < 8; ++c) {
        if (!s.valid[c]) continue;
        const double* d = data + 3 * s.index[c];
        a0 += s.weight[c] * d[0];
        a1 += s.weight[c] * d[1];
        a2 += s.weight[c] * d[2];
    }
    return Vec3(a0, a1, a2);
}

// Returns the sampled vector and its Jacobian J(comp, axis) w.r.t. p.
inline Vec3 sample3_jac(const double* data, const Dims3& dims, double px, double py, double pz,
                        Mat3& jac) {
    Stencil s;
    jac.setZero();
    if (!build_stencil(dims, px, py, pz, s, true)) return Vec3::Zero();
    Vec3 acc = Vec3::Zero();
    for (int c = 0; c < 8; ++c) {
        if (!s.valid[c]) continue;
        const double* d = data + 3 * s.index[c];
        for (int comp = 0; comp < 3; ++comp) {
            acc[comp] += s.weight[c] * d[comp];
            for (int a = 0; a < 3; ++a) jac(comp, a) += s.dweight[c][a] * d[comp];
        }
    }
    return acc;
}

inline void scatter3(double* data, const Dims3& dims, double px, double py, double pz,
                     const Vec3& value) {
    Stencil s;
    if (!build_stencil(dims, px, py, pz, s)) return;
    for (int c = 0; c < 8; ++c) {
        if (!s.valid[c]) continue;
        double* d = data + 3 * s.index[c];
        d[0] += s.weight[c] * value[0];
        d[1] += s.weight[c] * value[1];
        d[2] += s.weight[c] * value[2];
    }
}

}  // namespace guidedrec::interp
