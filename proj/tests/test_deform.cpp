#include <doctest.h>

#include <cmath>
#include <numbers>

#include "guidedrec/deform.hpp"
#include "guidedrec/errors.hpp"
#include "guidedrec/metrics.hpp"
#include "guidedrec/phantom.hpp"
#include "test_util.hpp"

using namespace guidedrec;

namespace {

Volume blob_volume(const Grid3& g, const Vec3& offset_mm) {
    Volume v(g);
    const Vec3 c = g.center() + offset_mm;
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const Vec3 d = g.voxel_center(i, j, k) - c;
                v.at(i, j, k) = std::exp(-d.squaredNorm() / (2 * 36.0)) +
                                0.5 * std::exp(-(d - Vec3(8, -4, 3)).squaredNorm() / (2 * 16.0));
            }
    return v;
}

bool interior(const Grid3& g, int i, int j, int k, int shell) {
    return i >= shell && j >= shell && k >= shell && i < g.dims[0] - shell && j < g.dims[1] - shell &&
           k < g.dims[2] - shell;
}

}  // namespace

TEST_CASE("integration of trivial flows") {
    const Grid3 g = Grid3::cube(16, 2.0);
    const DeformationField zero = integrate_velocity(VelocityField(g));
    for (double x : zero.data) CHECK(x == 0.0);

    // Zero padding leaks in by about one node per squaring, so the shell is
    // steps + 2 nodes deep.
    const Grid3 h = Grid3::cube(24, 2.0);
    VelocityField u(h);
    const Vec3 c(1.0, -0.5, 0.7);
    for (std::size_t n = 0; n < u.nodes(); ++n) u.set(n, c);
    const DeformationField phi = integrate_velocity(u, 6);
    for (int k = 0; k < 24; ++k)
        for (int j = 0; j < 24; ++j)
            for (int i = 0; i < 24; ++i)
                if (interior(h, i, j, k, 8)) CHECK((phi.at(h.index(i, j, k)) - c).norm() <= 1e-4 * c.norm());
}

TEST_CASE("flows of u and -u are near inverses") {
    const Grid3 g = Grid3::cube(32, 2.0);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const VelocityField u = testutil::smooth_velocity(g, seed, 4.0, 1.0);
        VelocityField neg = u;
        for (double& x : neg.data) x = -x;
        const DeformationField round = compose(integrate_velocity(u), integrate_velocity(neg));
        double worst = 0.0;
        for (int k = 0; k < 32; ++k)
            for (int j = 0; j < 32; ++j)
                for (int i = 0; i < 32; ++i)
                    if (interior(g, i, j, k, 8)) worst = std::max(worst, round.at(g.index(i, j, k)).norm() / 2.0);
        CHECK(worst <= 0.05);
    }
}

TEST_CASE("compose matches sequential warps") {
    const Grid3 g = Grid3::cube(12, 2.0);
    Volume ramp(g);
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i) ramp.at(i, j, k) = 0.3 * i - 0.1 * j + 0.2 * k;
    const DeformationField a = integrate_velocity(testutil::smooth_velocity(g, 3, 1.5));
    const DeformationField b = integrate_velocity(testutil::smooth_velocity(g, 4, 1.5));
    const Volume seq = warp(warp(ramp, a), b);
    const Volume once = warp(ramp, compose(a, b));
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i)
                if (interior(g, i, j, k, 2)) CHECK(once.at(i, j, k) == doctest::Approx(seq.at(i, j, k)).epsilon(1e-9));
}

TEST_CASE("warp") {
    const Grid3 g = Grid3::cube(10, 2.0);
    const Volume v = testutil::random_volume(g, 4);
    CHECK(warp(v, DeformationField(g)) == v);

    DeformationField shift(g);
    for (std::size_t n = 0; n < shift.nodes(); ++n) shift.set(n, Vec3(2.0, 0, 0));
    const Volume s = warp(v, shift);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 9; ++i) CHECK(s.at(i, j, k) == v.at(i + 1, j, k));

    Volume ramp(g);
    auto f = [](const Vec3& p) { return 0.01 * p[0] + 0.02 * p[1] - 0.03 * p[2] + 0.5; };
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 10; ++i) ramp.at(i, j, k) = f(g.voxel_center(i, j, k));
    const DeformationField phi = integrate_velocity(testutil::smooth_velocity(g, 9, 1.5));
    const Volume w = warp(ramp, phi);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 10; ++i) {
                if (!interior(g, i, j, k, 1)) continue;
                const std::size_t n = g.index(i, j, k);
                CHECK(std::abs(w[n] - f(g.voxel_center(i, j, k) + phi.at(n))) < 1e-6);
            }
}

TEST_CASE("warp VJP") {
    const Grid3 g = Grid3::cube(8, 2.0);
    const Volume v = testutil::random_volume(g, 12);
    // Displacements that keep every sample at least 0.25 voxel from a lattice plane.
    DeformationField phi(g);
    Rng rng(13);
    for (double& x : phi.data) x = 2.0 * ((rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.3, 0.7));
    const Volume up = testutil::random_volume(g, 14, -1, 1);

    const WarpGradients zero = warp_vjp(v, phi, Volume(g));
    for (double x : zero.volume.data()) CHECK(x == 0.0);
    for (double x : zero.field.data) CHECK(x == 0.0);

    const WarpGradients wg = warp_vjp(v, phi, up);
    auto f_phi = [&](const std::vector<double>& x) {
        DeformationField p(g);
        p.data = x;
        return dot(up, warp(v, p));
    };
    for (int t = 0; t < 5; ++t) {
        // Small random directions stay inside the same interpolation cells.
        const auto dir = testutil::random_vector(phi.data.size(), 40 + t);
        const double fd = testutil::directional_fd(f_phi, phi.data, dir, 1e-6);
        CHECK(testutil::rel_err(fd, testutil::inner(wg.field.data, dir)) < 1e-3);
    }
    const Volume other = testutil::random_volume(g, 15, -1, 1);
    CHECK(dot(warp(other, phi), up) == doctest::Approx(dot(other, wg.volume)).epsilon(1e-12));

    const Volume flat(g, 0.8);
    DeformationField small(g);
    for (double& x : small.data) x = rng.uniform(-0.5, 0.5);
    const WarpGradients wf = warp_vjp(flat, small, up, false, true);
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j)
            for (int i = 0; i < 8; ++i)
                if (interior(g, i, j, k, 1)) CHECK(wf.field.at(g.index(i, j, k)).norm() < 1e-12);
}

TEST_CASE("smoothness loss") {
    Grid3 g;
    g.dims = {5, 4, 3};
    VelocityField c(g);
    for (std::size_t n = 0; n < c.nodes(); ++n) c.set(n, Vec3(1, 2, 3));
    CHECK(smoothness_loss(c, 0.7) == 0.0);

    const double s = 0.3, lambda = 0.1;
    VelocityField ramp(g);
    for (int k = 0; k < 3; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 5; ++i) ramp.data[3 * g.index(i, j, k) + 1] = s * i;
    // Only x-differences of component 1 are nonzero: (5-1)*4*3 terms.
    CHECK(smoothness_loss(ramp, lambda) == doctest::Approx(lambda * s * s * 48));

    VelocityField r(g);
    Rng rng(2);
    for (double& x : r.data) x = rng.normal();
    VectorField grad;
    smoothness_loss(r, lambda, &grad);
    auto f = [&](const std::vector<double>& x) {
        VectorField h(g);
        h.data = x;
        return smoothness_loss(h, lambda);
    };
    const auto dir = testutil::random_vector(r.data.size(), 5);
    CHECK(testutil::rel_err(testutil::directional_fd(f, r.data, dir, 1e-5), testutil::inner(grad.data, dir)) < 1e-3);
}

TEST_CASE("integration VJP") {
    const Grid3 g = Grid3::cube(6, 2.0);
    const Grid3 fine = Grid3::cube(12, 1.0);
    const VelocityField u = testutil::smooth_velocity(g, 21, 2.0);
    DeformationField up(fine);
    Rng rng(3);
    for (double& x : up.data) x = rng.uniform(-1, 1);
    IntegrationTape tape;
    velocity_to_deformation(u, fine, 4, &tape);
    const VelocityField grad = velocity_to_deformation_vjp(tape, g, up);
    auto f = [&](const std::vector<double>& x) {
        VelocityField h(g);
        h.data = x;
        const DeformationField phi = velocity_to_deformation(h, fine, 4);
        return testutil::inner(phi.data, up.data);
    };
    for (int t = 0; t < 4; ++t) {
        const auto dir = testutil::random_vector(u.data.size(), 60 + t);
        CHECK(testutil::rel_err(testutil::directional_fd(f, u.data, dir, 1e-6), testutil::inner(grad.data, dir)) < 1e-3);
    }
}

TEST_CASE("Jacobian determinant") {
    const Grid3 g = Grid3::cube(10, 2.0);
    const Volume unit = jacobian_det(DeformationField(g));
    for (double x : unit.data()) CHECK(x == 1.0);

    DeformationField dil(g);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 10; ++i)
                dil.set(g.index(i, j, k), 0.1 * (g.voxel_center(i, j, k) - g.center()));
    const Volume det = jacobian_det(dil);
    for (int k = 1; k < 9; ++k)
        for (int j = 1; j < 9; ++j)
            for (int i = 1; i < 9; ++i) CHECK(det.at(i, j, k) == doctest::Approx(1.331).epsilon(1e-12));

    const Grid3 h = Grid3::cube(16, 2.0);
    for (std::uint64_t seed = 100; seed < 200; ++seed)
        CHECK(min_jacobian_det(integrate_velocity(testutil::smooth_velocity(h, seed, 4.0))) > 0.0);
}

TEST_CASE("registration") {
    const Grid3 g = Grid3::cube(24, 2.0);
    RegisterConfig cfg;
    cfg.iters_per_level = 60;

    SUBCASE("identical volumes need no motion") {
        const Volume v = blob_volume(g, Vec3::Zero());
        const RegisterResult r = register_volumes(v, v, cfg);
        double sq = 0.0;
        for (double x : r.velocity.data) sq += x * x;
        CHECK(std::sqrt(sq / r.velocity.nodes()) / 2.0 <= 0.05);
    }
    SUBCASE("a two-voxel shift is recovered") {
        const Volume v1 = blob_volume(g, Vec3::Zero());
        const Volume v2 = blob_volume(g, Vec3(-4.0, 0, 0));
        const RegisterResult r = register_volumes(v1, v2, cfg);
        const DeformationField phi = velocity_to_deformation(r.velocity, g, cfg.steps);
        // Displacement where the blob carries signal: v2(x) = v1(x + 4 mm e_x).
        Vec3 sum = Vec3::Zero();
        double weight = 0.0;
        for (std::size_t n = 0; n < phi.nodes(); ++n) {
            if (v2[n] < 0.3) continue;
            sum += phi.at(n);
            weight += 1.0;
        }
        const Vec3 mean = sum / weight;
        CHECK(std::abs(mean[0] - 4.0) / 2.0 <= 0.3);
        CHECK(std::abs(mean[1]) / 2.0 <= 0.3);
        CHECK(std::abs(mean[2]) / 2.0 <= 0.3);
        for (std::size_t l = 1; l < r.objective_trace.size(); ++l)
            if (r.level_of_iteration[l] == r.level_of_iteration[l - 1])
                CHECK(r.objective_trace[l] <= r.objective_trace[l - 1]);
    }
    SUBCASE("a phantom deformation is largely undone") {
        const Grid3 pg = Grid3::cube(32, 4.0);
        const Phantom p = generate_phantom(pg, 5);
        LongitudinalChange ch;
        ch.twist_deg = 6.0;
        ch.jaw_deg = 12.0;
        ch.compression = 0.9;
        ch.rigid_translation_mm = Vec3(2.0, -1.0, 1.5);
        const ChangedPhantom moved = apply_longitudinal_change(p, ch);
        const RegisterResult r = register_volumes(p.volume, moved.volume);
        const Volume s = warp(p.volume, velocity_to_deformation(r.velocity, pg));
        CHECK(psnr(s, moved.volume) >= psnr(p.volume, moved.volume) + 6.0);
    }
    CHECK_THROWS_AS(register_volumes(Volume(g), Volume(Grid3::cube(8, 2.0))), UsageError);
}

TEST_CASE("control grid and field persistence") {
    const Grid3 g = Grid3::cube(64, 2.0);
    const Grid3 c = control_grid(g, 4);
    CHECK(c.dims == Dims3{16, 16, 16});
    CHECK((c.extent() - g.extent()).norm() < 1e-12);

    const VelocityField u = testutil::smooth_velocity(Grid3::cube(5, 3.0), 1, 2.0);
    const auto dir = std::filesystem::temp_directory_path() / "guidedrec_test_field";
    save_field(dir, "u", u, "velocity");
    const VectorField back = load_field(dir, "u");
    CHECK(back.grid == u.grid);
    for (std::size_t n = 0; n < u.data.size(); ++n) CHECK(back.data[n] == static_cast<float>(u.data[n]));
    std::filesystem::remove_all(dir);
}
