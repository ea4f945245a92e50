#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "guidedrec/volume.hpp"

namespace guidedrec {

// Latent parameters g = [w, n]: one coefficient vector per scale and one
// noise grid per scale.
struct LatentParams {
    std::vector<std::vector<double>> w;
    std::vector<std::vector<double>> n;

    std::size_t flat_size() const;
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);
    // Same shapes, all zeros.
    LatentParams zeros_like() const;
    bool operator==(const LatentParams&) const = default;
};

struct PriorScale {
    Grid3 grid;
    Volume mean;
    std::vector<Volume> basis;  // orthonormal over voxels
    std::vector<double> mu;
    std::vector<double> sigma;
    double noise_amplitude = 0.0;
    double explained_variance = 0.0;  // fraction of this scale's training energy
};

// Residual multi-scale linear generative model. Scale 0 is the coarsest;
// every scale spans the same physical box as `output_grid`.
struct GenerativePrior {
    Grid3 output_grid;
    std::vector<PriorScale> scales;

    int latent_dim() const { return scales.empty() ? 0 : static_cast<int>(scales[0].basis.size()); }
    void check_latent(const LatentParams& g) const;
};

GenerativePrior fit_prior(std::span<const Volume> training, int latent_dim,
                          const std::vector<Dims3>& scale_dims);

// Default scale ladder for an output grid: dims/4, dims/2, dims.
std::vector<Dims3> default_scale_dims(const Grid3& output);

// Pre-clamp synthesis sum over scales, on the output grid.
Volume synthesize_linear(const GenerativePrior& prior, const LatentParams& g);

// v(g) = clamp_[0,1](synthesize_linear(g)).
Volume synthesize(const GenerativePrior& prior, const LatentParams& g);

// Gradient of <upstream, synthesize(g)> with respect to g. Output voxels
// clamped at 0 or 1 pass no gradient.
LatentParams synthesize_vjp(const GenerativePrior& prior, const LatentParams& g,
                            const Volume& upstream);

// Same, reusing an already computed pre-clamp volume.
LatentParams synthesize_vjp(const GenerativePrior& prior, const Volume& pre_clamp,
                            const Volume& upstream);

// z ~ N(0, I); w_s = mu_s + sigma_s * z_s; n_s ~ N(0, I).
LatentParams sample_latent(const GenerativePrior& prior, std::uint64_t seed);

// The latent at the prior mode: w = mu, n = 0.
LatentParams mean_latent(const GenerativePrior& prior);

struct RegWeights {
    double lambda_w = 0.05;
    double lambda_c = 0.05;
    double lambda_n = 0.01;
    double kappa = 10.0;
};

struct RegTerms {
    double latent = 0.0;       // L_w
    double collinear = 0.0;    // L_c
    double noise = 0.0;        // L_n
    double total = 0.0;        // weighted sum
};

// R(g) = lambda_w*L_w + lambda_c*L_c + lambda_n*L_n and its gradient. The
// angle between per-scale latents uses vectors centered by mu_s.
RegTerms reg_loss(const GenerativePrior& prior, const LatentParams& g, const RegWeights& weights,
                  LatentParams* grad);

// -log of the von Mises density at angle theta with mean 0.
double vonmises_neglog(double theta, double kappa);

// log(I0(x)) for x >= 0, relative error below 1e-12 over the working range.
double log_bessel_i0(double x);

// Persistence: <dir>/manifest.json plus scale<s>_mean.gvol and
// scale<s>_basis<k>.gvol.
void save_prior(const GenerativePrior& prior, const std::filesystem::path& dir);
GenerativePrior load_prior(const std::filesystem::path& dir);

}  // namespace guidedrec
