#include "guidedrec/generative.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "guidedrec/errors.hpp"
#include "guidedrec/json_io.hpp"
#include "guidedrec/random.hpp"

namespace guidedrec {

std::size_t LatentParams::flat_size() const {
    std::size_t n = 0;
    for (const auto& x : w) n += x.size();
    for (const auto& x : this->n) n += x.size();
    return n;
}

std::vector<double> LatentParams::flatten() const {
    std::vector<double> out;
    out.reserve(flat_size());
    for (const auto& x : w) out.insert(out.end(), x.begin(), x.end());
    for (const auto& x : n) out.insert(out.end(), x.begin(), x.end());
    return out;
}

void LatentParams::unflatten(std::span<const double> flat) {
    if (flat.size() != flat_size()) throw UsageError("LatentParams::unflatten: size mismatch");
    std::size_t pos = 0;
    for (auto& x : w) {
        std::copy_n(flat.begin() + pos, x.size(), x.begin());
        pos += x.size();
    }
    for (auto& x : n) {
        std::copy_n(flat.begin() + pos, x.size(), x.begin());
        pos += x.size();
    }
}

LatentParams LatentParams::zeros_like() const {
    LatentParams z;
    for (const auto& x : w) z.w.emplace_back(x.size(), 0.0);
    for (const auto& x : n) z.n.emplace_back(x.size(), 0.0);
    return z;
}

void GenerativePrior::check_latent(const LatentParams& g) const {
    if (g.w.size() != scales.size() || g.n.size() != scales.size())
        throw UsageError("latent scale count does not match prior");
    for (std::size_t s = 0; s < scales.size(); ++s) {
        if (g.w[s].size() != scales[s].basis.size())
            throw UsageError(fmt::format("latent w[{}] has dimension {}, prior expects {}", s,
                                         g.w[s].size(), scales[s].basis.size()));
        if (g.n[s].size() != scales[s].grid.size())
            throw UsageError(fmt::format("noise grid n[{}] does not match scale grid", s));
    }
}

std::vector<Dims3> default_scale_dims(const Grid3& output) {
    std::vector<Dims3> dims;
    for (int f : {4, 2, 1}) {
        Dims3 d;
        for (int a = 0; a < 3; ++a) d[a] = std::max(1, output.dims[a] / f);
        dims.push_back(d);
    }
    return dims;
}

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Modified Gram-Schmidt over the rows of `basis`; rows that collapse are
// replaced by seeded random directions.
void orthonormalize_rows(Matrix& basis, std::uint64_t seed) {
    Rng rng(seed);
    for (Eigen::Index k = 0; k < basis.rows(); ++k) {
        for (int attempt = 0; attempt < 8; ++attempt) {
            for (int pass = 0; pass < 2; ++pass)
                for (Eigen::Index j = 0; j < k; ++j)
                    basis.row(k) -= basis.row(k).dot(basis.row(j)) * basis.row(j);
            const double norm = basis.row(k).norm();
            if (norm > 1e-8) {
                basis.row(k) /= norm;
                break;
            }
            for (Eigen::Index c = 0; c < basis.cols(); ++c) basis(k, c) = rng.normal();
        }
    }
}

double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

GenerativePrior fit_prior(std::span<const Volume> training, int latent_dim,
                          const std::vector<Dims3>& scale_dims) {
    const std::size_t count = training.size();
    if (latent_dim < 1) throw UsageError("fit_prior: latent dimension must be >= 1");
    if (count < static_cast<std::size_t>(latent_dim) + 1)
        throw UsageError(fmt::format("fit_prior: need at least {} training volumes, got {}",
                                     latent_dim + 1, count));
    if (scale_dims.empty()) throw UsageError("fit_prior: no scales given");
    const Grid3& out_grid = training[0].grid();
    for (const auto& v : training)
        if (!(v.grid() == out_grid)) throw UsageError("fit_prior: training volumes have mismatched grids");

    GenerativePrior prior;
    prior.output_grid = out_grid;
    // Per-volume reconstructions of each finished scale, on that scale's grid.
    std::vector<std::vector<Volume>> recon(scale_dims.size());

    for (std::size_t s = 0; s < scale_dims.size(); ++s) {
        PriorScale scale;
        scale.grid = out_grid.with_dims(scale_dims[s]);
        const Eigen::Index voxels = static_cast<Eigen::Index>(scale.grid.size());

        Matrix data(static_cast<Eigen::Index>(count), voxels);
        for (std::size_t i = 0; i < count; ++i) {
            Volume target = resample(training[i], scale.grid);
            for (std::size_t r = 0; r < s; ++r) {
                const Volume coarse = resample(recon[r][i], scale.grid);
                for (std::size_t n = 0; n < target.size(); ++n) target[n] -= coarse[n];
            }
            for (Eigen::Index n = 0; n < voxels; ++n) data(static_cast<Eigen::Index>(i), n) = target[n];
        }

        Eigen::RowVectorXd mean = data.colwise().mean();
        for (Eigen::Index n = 0; n < voxels; ++n) mean[n] = round_f32(mean[n]);
        data.rowwise() -= mean;

        const Eigen::MatrixXd gram = data * data.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
        const Eigen::VectorXd evals = eig.eigenvalues();  // ascending
        const double total_energy = std::max(evals.sum(), 0.0);

        const int d = latent_dim;
        Matrix basis(d, voxels);
        double kept_energy = 0.0;
        for (int k = 0; k < d; ++k) {
            const Eigen::Index col = static_cast<Eigen::Index>(count) - 1 - k;
            kept_energy += std::max(evals[col], 0.0);
            basis.row(k) = eig.eigenvectors().col(col).transpose() * data;
        }
        orthonormalize_rows(basis, 0x5eedULL + s);
        // Stored bases are f32-exact so persistence round-trips bit-exactly.
        basis = basis.unaryExpr([](double x) { return round_f32(x); });

        const Matrix coeffs = data * basis.transpose();  // count x d
        scale.mean = Volume(scale.grid, std::vector<double>(mean.data(), mean.data() + voxels));
        scale.mu.resize(d);
        scale.sigma.resize(d);
        for (int k = 0; k < d; ++k) {
            const double mu = coeffs.col(k).mean();
            const double var = (coeffs.col(k).array() - mu).square().mean();
            scale.mu[k] = mu;
            scale.sigma[k] = std::sqrt(var);
        }
        const double sigma_floor = std::max(1e-9, 1e-6 * *std::max_element(scale.sigma.begin(), scale.sigma.end()));
        for (auto& sg : scale.sigma) sg = std::max(sg, sigma_floor);
        scale.explained_variance = total_energy > 0.0 ? kept_energy / total_energy : 1.0;

        // Reconstructions and the post-PCA residual energy.
        const Matrix fitted = coeffs * basis;
        double residual_sq = 0.0;
        recon[s].reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            const Eigen::Index row = static_cast<Eigen::Index>(i);
            std::vector<double> rec(static_cast<std::size_t>(voxels));
            for (Eigen::Index n = 0; n < voxels; ++n) {
                rec[n] = mean[n] + fitted(row, n);
                const double r = data(row, n) - fitted(row, n);
                residual_sq += r * r;
            }
            recon[s].emplace_back(scale.grid, std::move(rec));
        }
        scale.noise_amplitude = std::sqrt(residual_sq / (static_cast<double>(count) * voxels));

        scale.basis.reserve(d);
        for (int k = 0; k < d; ++k)
            scale.basis.emplace_back(scale.grid,
                                     std::vector<double>(basis.row(k).data(), basis.row(k).data() + voxels));
        prior.scales.push_back(std::move(scale));
    }
    return prior;
}

Volume synthesize_linear(const GenerativePrior& prior, const LatentParams& g) {
    prior.check_latent(g);
    Volume out(prior.output_grid);
    for (std::size_t s = 0; s < prior.scales.size(); ++s) {
        const PriorScale& sc = prior.scales[s];
        Volume field = sc.mean;
        auto f = field.data();
        for (std::size_t k = 0; k < sc.basis.size(); ++k) {
            const double wk = g.w[s][k];
            if (wk == 0.0) continue;
            const auto b = sc.basis[k].data();
            for (std::size_t n = 0; n < f.size(); ++n) f[n] += wk * b[n];
        }
        if (sc.noise_amplitude != 0.0)
            for (std::size_t n = 0; n < f.size(); ++n) f[n] += sc.noise_amplitude * g.n[s][n];
        const Volume up = resample(field, prior.output_grid);
        for (std::size_t n = 0; n < out.size(); ++n) out[n] += up[n];
    }
    return out;
}

Volume synthesize(const GenerativePrior& prior, const LatentParams& g) {
    Volume v = synthesize_linear(prior, g);
    for (double& x : v.data()) x = std::clamp(x, 0.0, 1.0);
    return v;
}

LatentParams synthesize_vjp(const GenerativePrior& prior, const Volume& pre_clamp,
                            const Volume& upstream) {
    if (!(upstream.grid() == prior.output_grid))
        throw UsageError("synthesize_vjp: upstream gradient is not on the prior's output grid");
    Volume masked(prior.output_grid);
    for (std::size_t n = 0; n < masked.size(); ++n) {
        const double x = pre_clamp[n];
        masked[n] = (x > 0.0 && x < 1.0) ? upstream[n] : 0.0;
    }
    LatentParams grad;
    for (const PriorScale& sc : prior.scales) {
        const Volume gs = resample_adjoint(masked, sc.grid);
        std::vector<double> gw(sc.basis.size());
        for (std::size_t k = 0; k < sc.basis.size(); ++k) gw[k] = dot(gs, sc.basis[k]);
        std::vector<double> gn(gs.size());
        for (std::size_t n = 0; n < gs.size(); ++n) gn[n] = sc.noise_amplitude * gs[n];
        grad.w.push_back(std::move(gw));
        grad.n.push_back(std::move(gn));
    }
    return grad;
}

LatentParams synthesize_vjp(const GenerativePrior& prior, const LatentParams& g,
                            const Volume& upstream) {
    return synthesize_vjp(prior, synthesize_linear(prior, g), upstream);
}

LatentParams sample_latent(const GenerativePrior& prior, std::uint64_t seed) {
    Rng rng(seed);
    LatentParams g;
    for (const PriorScale& sc : prior.scales) {
        std::vector<double> w(sc.basis.size());
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = sc.mu[k] + sc.sigma[k] * rng.normal();
        g.w.push_back(std::move(w));
    }
    for (const PriorScale& sc : prior.scales) {
        std::vector<double> n(sc.grid.size());
        for (double& x : n) x = rng.normal();
        g.n.push_back(std::move(n));
    }
    return g;
}

LatentParams mean_latent(const GenerativePrior& prior) {
    LatentParams g;
    for (const PriorScale& sc : prior.scales) {
        g.w.push_back(sc.mu);
        g.n.emplace_back(sc.grid.size(), 0.0);
    }
    return g;
}

double log_bessel_i0(double x) {
    x = std::abs(x);
    if (x <= 700.0) {
        // Power series; every term is positive so summation is stable.
        const double q = 0.25 * x * x;
        double term = 1.0, sum = 1.0;
        for (int k = 1; k < 2000; ++k) {
            term *= q / (static_cast<double>(k) * k);
            sum += term;
            if (term < sum * 1e-17) break;
        }
        return std::log(sum);
    }
    // Large-argument expansion: I0(x) ~ e^x / sqrt(2 pi x) * sum_k ((2k-1)!!)^2 / (k! (8x)^k).
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 30; ++k) {
        const double f = (2.0 * k - 1.0);
        term *= f * f / (k * 8.0 * x);
        sum += term;
        if (term < 1e-17 * sum) break;
    }
    return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}

double vonmises_neglog(double theta, double kappa) {
    if (!(kappa > 0.0)) throw UsageError("vonmises_neglog: kappa must be positive");
    return -kappa * std::cos(theta) + std::log(2.0 * std::numbers::pi) + log_bessel_i0(kappa);
}

RegTerms reg_loss(const GenerativePrior& prior, const LatentParams& g, const RegWeights& weights,
                  LatentParams* grad) {
    prior.check_latent(g);
    if (!(weights.kappa > 0.0)) throw UsageError("reg_loss: kappa must be positive");
    if (weights.lambda_w < 0.0 || weights.lambda_c < 0.0 || weights.lambda_n < 0.0)
        throw UsageError("reg_loss: weights must be non-negative");
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const std::size_t scales = prior.scales.size();
    if (grad) *grad = g.zeros_like();

    RegTerms t;
    for (std::size_t s = 0; s < scales; ++s) {
        const PriorScale& sc = prior.scales[s];
        for (std::size_t k = 0; k < g.w[s].size(); ++k) {
            const double z = (g.w[s][k] - sc.mu[k]) / sc.sigma[k];
            t.latent += 0.5 * z * z + std::log(sc.sigma[k]) + half_log_2pi;
            if (grad) grad->w[s][k] += weights.lambda_w * z / sc.sigma[k];
        }
        for (std::size_t n = 0; n < g.n[s].size(); ++n) {
            const double x = g.n[s][n];
            t.noise += 0.5 * x * x + half_log_2pi;
            if (grad) grad->n[s][n] = weights.lambda_n * x;
        }
    }

    // Von Mises collinearity over every pair of centered per-scale latents.
    std::vector<Eigen::VectorXd> centered(scales);
    std::vector<double> norms(scales);
    for (std::size_t s = 0; s < scales; ++s) {
        const auto& mu = prior.scales[s].mu;
        centered[s].resize(static_cast<Eigen::Index>(g.w[s].size()));
        for (std::size_t k = 0; k < g.w[s].size(); ++k) centered[s][k] = g.w[s][k] - mu[k];
        norms[s] = centered[s].norm();
    }
    const double log_norm = std::log(2.0 * std::numbers::pi) + log_bessel_i0(weights.kappa);
    for (std::size_t i = 0; i < scales; ++i) {
        for (std::size_t j = i + 1; j < scales; ++j) {
            if (norms[i] == 0.0 || norms[j] == 0.0) continue;
            if (centered[i].size() != centered[j].size())
                throw UsageError("reg_loss: collinearity term needs equal latent dimensions");
            const double cos_t =
                std::clamp(centered[i].dot(centered[j]) / (norms[i] * norms[j]), -1.0, 1.0);
            t.collinear += -weights.kappa * cos_t + log_norm;
            if (!grad) continue;
            const double scale = -weights.lambda_c * weights.kappa;
            const Eigen::VectorXd dci =
                centered[j] / (norms[i] * norms[j]) - cos_t * centered[i] / (norms[i] * norms[i]);
            const Eigen::VectorXd dcj =
                centered[i] / (norms[i] * norms[j]) - cos_t * centered[j] / (norms[j] * norms[j]);
            for (Eigen::Index k = 0; k < dci.size(); ++k) {
                grad->w[i][k] += scale * dci[k];
                grad->w[j][k] += scale * dcj[k];
            }
        }
    }
    t.total = weights.lambda_w * t.latent + weights.lambda_c * t.collinear + weights.lambda_n * t.noise;
    return t;
}

void save_prior(const GenerativePrior& prior, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "guidedrec-prior";
    manifest["version"] = 1;
    manifest["latent_dim"] = prior.latent_dim();
    manifest["output_grid"] = grid_to_json(prior.output_grid);
    nlohmann::json scales = nlohmann::json::array();
    for (std::size_t s = 0; s < prior.scales.size(); ++s) {
        const PriorScale& sc = prior.scales[s];
        nlohmann::json js;
        js["grid"] = grid_to_json(sc.grid);
        js["mu"] = sc.mu;
        js["sigma"] = sc.sigma;
        js["noise_amplitude"] = sc.noise_amplitude;
        js["explained_variance"] = sc.explained_variance;
        js["mean"] = fmt::format("scale{}_mean.gvol", s);
        nlohmann::json bases = nlohmann::json::array();
        for (std::size_t k = 0; k < sc.basis.size(); ++k) {
            const std::string name = fmt::format("scale{}_basis{}.gvol", s, k);
            write_gvol(dir / name, sc.basis[k]);
            bases.push_back(name);
        }
        js["basis"] = bases;
        write_gvol(dir / js["mean"].get<std::string>(), sc.mean);
        scales.push_back(js);
    }
    manifest["scales"] = scales;
    write_json(dir / "manifest.json", manifest);
}

GenerativePrior load_prior(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_json(dir / "manifest.json");
    GenerativePrior prior;
    try {
        if (manifest.at("format").get<std::string>() != "guidedrec-prior")
            throw ParseError("format", "prior manifest: unexpected format tag");
        prior.output_grid = grid_from_json(manifest.at("output_grid"));
        for (const auto& js : manifest.at("scales")) {
            PriorScale sc;
            sc.grid = grid_from_json(js.at("grid"));
            sc.mu = js.at("mu").get<std::vector<double>>();
            sc.sigma = js.at("sigma").get<std::vector<double>>();
            sc.noise_amplitude = js.at("noise_amplitude").get<double>();
            sc.explained_variance = js.at("explained_variance").get<double>();
            sc.mean = read_gvol(dir / js.at("mean").get<std::string>());
            for (const auto& name : js.at("basis")) sc.basis.push_back(read_gvol(dir / name.get<std::string>()));
            if (sc.mu.size() != sc.basis.size() || sc.sigma.size() != sc.basis.size())
                throw ParseError("scales", "prior manifest: mu/sigma length differs from basis count");
            prior.scales.push_back(std::move(sc));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest", std::string("prior manifest: ") + e.what());
    }
    return prior;
}

}  // namespace guidedrec
