#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "guidedrec/deform.hpp"
#include "guidedrec/random.hpp"
#include "guidedrec/volume.hpp"

namespace testutil {

using guidedrec::Grid3;
using guidedrec::Volume;

inline Volume random_volume(const Grid3& g, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    guidedrec::Rng rng(seed);
    Volume v(g);
    for (double& x : v.data()) x = rng.uniform(lo, hi);
    return v;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    guidedrec::Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = sd * rng.normal();
    return v;
}

// Central difference of f along direction dir at x.
inline double directional_fd(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                             const std::vector<double>& dir, double h) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * dir[i];
    const double fp = f(x);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= 2.0 * h * dir[i];
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline double inner(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

// Sum of a few low-frequency sinusoids per component, scaled so that the
// largest node magnitude equals max_mm.
inline guidedrec::VelocityField smooth_velocity(const Grid3& g, std::uint64_t seed, double max_mm, double max_cycles = 1.5) {
    guidedrec::Rng rng(seed);
    guidedrec::VelocityField u(g);
    const guidedrec::Vec3 ext = g.extent();
    for (int c = 0; c < 3; ++c)
        for (int m = 0; m < 3; ++m) {
            const guidedrec::Vec3 freq(rng.uniform(0.5, max_cycles), rng.uniform(0.5, max_cycles), rng.uniform(0.5, max_cycles));
            const double phase = rng.uniform(0, 2 * std::numbers::pi), amp = rng.normal();
            for (int k = 0; k < g.dims[2]; ++k)
                for (int j = 0; j < g.dims[1]; ++j)
                    for (int i = 0; i < g.dims[0]; ++i) {
                        const guidedrec::Vec3 x = g.voxel_center(i, j, k).cwiseQuotient(ext);
                        u.data[3 * g.index(i, j, k) + c] +=
                            amp * std::sin(2 * std::numbers::pi * freq.dot(x) + phase);
                    }
        }
    const double peak = u.max_norm();
    for (double& x : u.data) x *= max_mm / peak;
    return u;
}

}  // namespace testutil
