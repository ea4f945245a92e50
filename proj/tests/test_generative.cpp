#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "guidedrec/errors.hpp"
#include "guidedrec/generative.hpp"
#include "test_util.hpp"

using namespace guidedrec;

namespace {

// Smooth random volumes with values well inside (0, 1).
std::vector<Volume> blob_training(const Grid3& g, int count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Volume> out;
    for (int c = 0; c < count; ++c) {
        Volume v(g, 0.5);
        for (int b = 0; b < 3; ++b) {
            const Vec3 center = g.center() + Vec3(rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-4, 4));
            const double amp = rng.uniform(-0.15, 0.15);
            for (int k = 0; k < g.dims[2]; ++k)
                for (int j = 0; j < g.dims[1]; ++j)
                    for (int i = 0; i < g.dims[0]; ++i) {
                        const double r2 = (g.voxel_center(i, j, k) - center).squaredNorm();
                        v.at(i, j, k) += amp * std::exp(-r2 / 18.0);
                    }
        }
        for (double& x : v.data()) x += 0.01 * rng.normal();
        out.push_back(std::move(v));
    }
    return out;
}

struct Fixture {
    Grid3 grid = Grid3::cube(8, 2.0);
    std::vector<Volume> train = blob_training(grid, 12, 42);
    GenerativePrior prior = fit_prior(train, 3, default_scale_dims(grid));
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "bases are orthonormal and sigma is positive") {
    REQUIRE(prior.scales.size() == 3);
    for (const auto& sc : prior.scales) {
        for (std::size_t a = 0; a < sc.basis.size(); ++a)
            for (std::size_t b = 0; b < sc.basis.size(); ++b)
                CHECK(std::abs(dot(sc.basis[a], sc.basis[b]) - (a == b ? 1.0 : 0.0)) < 1e-6);
        for (double s : sc.sigma) CHECK(s > 0.0);
        CHECK(sc.noise_amplitude >= 0.0);
    }
    CHECK(prior.latent_dim() == 3);
}

TEST_CASE("rank-1 family is captured by one component") {
    const Grid3 g = Grid3::cube(6, 2.0);
    const Volume tmpl = testutil::random_volume(g, 7, 0.1, 0.9);
    std::vector<Volume> train;
    std::vector<double> cs;
    for (int c = 0; c < 10; ++c) {
        const double k = 0.5 + 0.1 * c;
        cs.push_back(k);
        Volume v = tmpl;
        for (double& x : v.data()) x *= k;
        train.push_back(std::move(v));
    }
    const GenerativePrior p = fit_prior(train, 2, {g.dims});
    CHECK(p.scales[0].explained_variance > 0.99);
    // sigma of the leading coefficient is the population spread of c times |template|.
    double mean_c = 0.0;
    for (double c : cs) mean_c += c / cs.size();
    double var_c = 0.0;
    for (double c : cs) var_c += (c - mean_c) * (c - mean_c) / cs.size();
    const double expected = std::sqrt(var_c) * std::sqrt(dot(tmpl, tmpl));
    CHECK(p.scales[0].sigma[0] == doctest::Approx(expected).epsilon(1e-5));
    CHECK(p.scales[0].sigma[1] < 1e-4 * p.scales[0].sigma[0]);
}

TEST_CASE_FIXTURE(Fixture, "training volumes are reproduced within the residual bound") {
    double bound = 0.0;
    for (const auto& sc : prior.scales) bound += sc.noise_amplitude;
    double sq = 0.0;
    for (const Volume& v : train) {
        LatentParams g = mean_latent(prior);
        std::vector<Volume> recon;
        for (std::size_t s = 0; s < prior.scales.size(); ++s) {
            const PriorScale& sc = prior.scales[s];
            Volume target = resample(v, sc.grid);
            for (const Volume& r : recon) {
                const Volume up = resample(r, sc.grid);
                for (std::size_t n = 0; n < target.size(); ++n) target[n] -= up[n];
            }
            for (std::size_t n = 0; n < target.size(); ++n) target[n] -= sc.mean[n];
            Volume rec = sc.mean;
            for (std::size_t k = 0; k < sc.basis.size(); ++k) {
                g.w[s][k] = dot(target, sc.basis[k]);
                for (std::size_t n = 0; n < rec.size(); ++n) rec[n] += g.w[s][k] * sc.basis[k][n];
            }
            recon.push_back(std::move(rec));
        }
        const Volume out = synthesize_linear(prior, g);
        for (std::size_t n = 0; n < out.size(); ++n) sq += (out[n] - v[n]) * (out[n] - v[n]);
    }
    const double rms = std::sqrt(sq / (train.size() * grid.size()));
    CHECK(rms <= bound + 1e-6);
}

TEST_CASE_FIXTURE(Fixture, "synthesis") {
    SUBCASE("mean latent gives the clamped sum of scale means") {
        const Volume v = synthesize(prior, mean_latent(prior));
        Volume expected(grid);
        for (const auto& sc : prior.scales) {
            Volume field = sc.mean;
            for (std::size_t k = 0; k < sc.basis.size(); ++k)
                for (std::size_t n = 0; n < field.size(); ++n) field[n] += sc.mu[k] * sc.basis[k][n];
            const Volume up = resample(field, grid);
            for (std::size_t n = 0; n < up.size(); ++n) expected[n] += up[n];
        }
        for (std::size_t n = 0; n < v.size(); ++n)
            CHECK(v[n] == doctest::Approx(std::clamp(expected[n], 0.0, 1.0)).epsilon(1e-12));
    }
    SUBCASE("doubling a coefficient deviation doubles the residual") {
        const LatentParams base = mean_latent(prior);
        LatentParams one = base, two = base;
        one.w[1][2] += 0.3;
        two.w[1][2] += 0.6;
        const Volume v0 = synthesize_linear(prior, base), v1 = synthesize_linear(prior, one),
                     v2 = synthesize_linear(prior, two);
        for (std::size_t n = 0; n < v0.size(); ++n)
            CHECK(v2[n] - v0[n] == doctest::Approx(2.0 * (v1[n] - v0[n])).epsilon(1e-9));
    }
    SUBCASE("unit-RMS noise at the finest scale shifts the output by its amplitude") {
        const std::size_t s = prior.scales.size() - 1;
        const double a = prior.scales[s].noise_amplitude;
        REQUIRE(a > 0.0);
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            LatentParams g = mean_latent(prior);
            double ss = 0.0;
            for (double& x : g.n[s]) {
                x = rng.normal();
                ss += x * x;
            }
            const double scale = 1.0 / std::sqrt(ss / g.n[s].size());
            for (double& x : g.n[s]) x *= scale;
            const Volume v0 = synthesize_linear(prior, mean_latent(prior)), v1 = synthesize_linear(prior, g);
            double d = 0.0;
            for (std::size_t n = 0; n < v0.size(); ++n) d += (v1[n] - v0[n]) * (v1[n] - v0[n]);
            CHECK(std::sqrt(d / v0.size()) == doctest::Approx(a).epsilon(0.05));
        }
    }
}

TEST_CASE_FIXTURE(Fixture, "synthesis VJP") {
    const LatentParams g = mean_latent(prior);
    const Volume up = testutil::random_volume(grid, 9, -1, 1);
    const Volume pre = synthesize_linear(prior, g);
    for (double x : pre.data()) REQUIRE((x > 0.05 && x < 0.95));

    const LatentParams zero = synthesize_vjp(prior, g, Volume(grid));
    for (double x : zero.flatten()) CHECK(x == 0.0);

    const LatentParams grad = synthesize_vjp(prior, g, up);
    for (std::size_t s = 0; s < prior.scales.size(); ++s)
        for (std::size_t k = 0; k < prior.scales[s].basis.size(); ++k)
            CHECK(grad.w[s][k] == doctest::Approx(dot(up, resample(prior.scales[s].basis[k], grid))).epsilon(1e-10));

    auto f = [&](const std::vector<double>& flat) {
        LatentParams h = g;
        h.unflatten(flat);
        return dot(up, synthesize(prior, h));
    };
    const auto x0 = g.flatten();
    const auto gflat = grad.flatten();
    Rng rng(2);
    for (int t = 0; t < 25; ++t) {
        const std::size_t idx = static_cast<std::size_t>(rng.uniform() * x0.size());
        std::vector<double> e(x0.size(), 0.0);
        e[idx] = 1.0;
        const double fd = testutil::directional_fd(f, x0, e, 1e-4);
        if (std::abs(gflat[idx]) < 1e-8) {
            CHECK(std::abs(fd) < 1e-6);
        } else {
            CHECK(testutil::rel_err(fd, gflat[idx]) < 1e-3);
        }
    }
}

TEST_CASE_FIXTURE(Fixture, "latent sampling") {
    CHECK(sample_latent(prior, 3) == sample_latent(prior, 3));
    CHECK(!(sample_latent(prior, 3) == sample_latent(prior, 4)));
    const LatentParams m = mean_latent(prior);
    for (std::size_t s = 0; s < prior.scales.size(); ++s) CHECK(m.w[s] == prior.scales[s].mu);

    const int n = 10000;
    const std::size_t s = 1;
    const std::size_t d = prior.scales[s].mu.size();
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    for (int i = 0; i < n; ++i) {
        const LatentParams g = sample_latent(prior, 1000 + i);
        for (std::size_t k = 0; k < d; ++k) {
            sum[k] += g.w[s][k];
            sq[k] += g.w[s][k] * g.w[s][k];
        }
    }
    for (std::size_t k = 0; k < d; ++k) {
        const double mean = sum[k] / n;
        const double sd = std::sqrt(sq[k] / n - mean * mean);
        const double sigma = prior.scales[s].sigma[k];
        CHECK(std::abs(mean - prior.scales[s].mu[k]) < 0.05 * sigma);
        CHECK(sd == doctest::Approx(sigma).epsilon(0.05));
    }
}

TEST_CASE_FIXTURE(Fixture, "regularizer") {
    const RegWeights wts;
    SUBCASE("Gaussian terms at their minima") {
        const RegTerms t = reg_loss(prior, mean_latent(prior), wts, nullptr);
        double lw = 0.0, count = 0.0;
        for (const auto& sc : prior.scales) {
            for (double s : sc.sigma) lw += std::log(s * std::sqrt(2.0 * std::numbers::pi));
            count += sc.grid.size();
        }
        CHECK(t.latent == doctest::Approx(lw).epsilon(1e-12));
        CHECK(t.noise == doctest::Approx(0.5 * count * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
    }
    SUBCASE("collinear centered latents sit at the von Mises minimum") {
        LatentParams g = mean_latent(prior);
        for (std::size_t s = 0; s < g.w.size(); ++s)
            for (std::size_t k = 0; k < g.w[s].size(); ++k) g.w[s][k] += 0.1 * (k + 1);
        const RegTerms t = reg_loss(prior, g, wts, nullptr);
        const double pairs = 3.0;
        CHECK(t.collinear == doctest::Approx(pairs * vonmises_neglog(0.0, wts.kappa)).epsilon(1e-12));
        LatentParams h = g;
        h.w[2][0] -= 0.3;
        CHECK(reg_loss(prior, h, wts, nullptr).collinear > t.collinear);
    }
    SUBCASE("gradient matches finite differences") {
        RegWeights w2{0.3, 0.2, 0.1, 4.0};
        const LatentParams g = sample_latent(prior, 8);
        LatentParams grad;
        const RegTerms t = reg_loss(prior, g, w2, &grad);
        CHECK(t.total == doctest::Approx(w2.lambda_w * t.latent + w2.lambda_c * t.collinear + w2.lambda_n * t.noise));
        auto f = [&](const std::vector<double>& flat) {
            LatentParams h = g;
            h.unflatten(flat);
            return reg_loss(prior, h, w2, nullptr).total;
        };
        const auto x0 = g.flatten(), gf = grad.flatten();
        for (int t2 = 0; t2 < 5; ++t2) {
            const auto dir = testutil::random_vector(x0.size(), 30 + t2);
            const double fd = testutil::directional_fd(f, x0, dir, 1e-5);
            CHECK(testutil::rel_err(fd, testutil::inner(gf, dir)) < 1e-3);
        }
        // Individual w coordinates, where the collinearity term lives.
        for (std::size_t idx = 0; idx < 9; ++idx) {
            std::vector<double> e(x0.size(), 0.0);
            e[idx] = 1.0;
            CHECK(testutil::rel_err(testutil::directional_fd(f, x0, e, 1e-5), gf[idx]) < 1e-3);
        }
    }
    CHECK_THROWS_AS(reg_loss(prior, mean_latent(prior), RegWeights{0.1, 0.1, 0.1, 0.0}, nullptr), UsageError);
}

TEST_CASE("von Mises and Bessel values") {
    const double kappa = 10.0;
    // log(2 pi I0(10)) evaluated with 30-digit arithmetic.
    const double oracle = 9.78084914952804103805552487305;
    CHECK(vonmises_neglog(std::numbers::pi / 2, kappa) == doctest::Approx(oracle).epsilon(1e-13));
    CHECK(vonmises_neglog(0.0, kappa) == doctest::Approx(oracle - kappa).epsilon(1e-13));
    CHECK(vonmises_neglog(std::numbers::pi, kappa) == doctest::Approx(oracle + kappa).epsilon(1e-13));
    CHECK(std::exp(log_bessel_i0(10.0)) == doctest::Approx(2815.71662846625447).epsilon(1e-13));
    for (double x : {0.0, 0.5, 3.0, 25.0, 120.0, 600.0})
        CHECK(log_bessel_i0(x) == doctest::Approx(std::log(std::cyl_bessel_i(0.0, x))).epsilon(1e-12));
    // Either side of the switch between series and asymptotic expansion,
    // against 30-digit values.
    CHECK(log_bessel_i0(699.0) == doctest::Approx(694.806415050681272078730569768).epsilon(1e-14));
    CHECK(log_bessel_i0(701.0) == doctest::Approx(696.804985967345261555925627791).epsilon(1e-14));
    CHECK(log_bessel_i0(1e4) == doctest::Approx(1e4 - 0.5 * std::log(2 * std::numbers::pi * 1e4) +
                                                 std::log1p(1.0 / 8e4 + 9.0 / (2.0 * 6.4e9)))
                                   .epsilon(1e-12));
}

TEST_CASE_FIXTURE(Fixture, "persistence round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "guidedrec_test_prior";
    std::filesystem::remove_all(dir);
    save_prior(prior, dir);
    const GenerativePrior back = load_prior(dir);
    const LatentParams g = sample_latent(prior, 11);
    CHECK(synthesize_linear(back, g) == synthesize_linear(prior, g));
    for (std::size_t s = 0; s < prior.scales.size(); ++s) {
        CHECK(back.scales[s].mu == prior.scales[s].mu);
        CHECK(back.scales[s].sigma == prior.scales[s].sigma);
    }
    std::filesystem::remove_all(dir);
    CHECK_THROWS(load_prior(dir));
}

TEST_CASE("fit_prior input checks") {
    const Grid3 g = Grid3::cube(4, 2.0);
    const auto few = blob_training(g, 3, 1);
    CHECK_THROWS_AS(fit_prior(few, 3, default_scale_dims(g)), UsageError);
    CHECK_THROWS_AS(fit_prior(few, 0, default_scale_dims(g)), UsageError);
}
