#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedrec/adam.hpp"
#include "guidedrec/deform.hpp"
#include "guidedrec/generative.hpp"
#include "guidedrec/projector.hpp"

namespace guidedrec {

enum class Variant { no_prior, gen_only, gen_then_deform, deform_only, full };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);  // throws UsageError
inline constexpr Variant kAllVariants[] = {Variant::no_prior, Variant::gen_only, Variant::gen_then_deform,
                                           Variant::deform_only, Variant::full};

struct ReconConfig {
    // Projection loss weights.
    double lambda_2 = 1.0;
    double lambda_p = 0.1;
    // Latent regularizer.
    RegWeights reg;
    // Coupling between the warped volume and the target volume, and
    // velocity smoothness.
    double lambda_s = 0.01;
    double lambda_d = 0.1;

    int warmup_iters = 10;
    int main_iters = 300;
    double lr_g = 0.05;   // latent step; w steps are scaled by sigma
    double lr_u = 0.3;    // velocity step, mm
    double lr_v = 0.01;   // free voxel-grid step (deform-only variant)
    double lr_phi = 0.05; // raw displacement step, mm (no-prior variant)
    AdamConfig adam;
    bool alternate = false;  // update g and u on alternating iterations

    int control_factor = 4;
    int integration_steps = 6;
    RegisterConfig registration;  // second stage of gen-then-deform

    std::uint64_t seed = 0;
    Variant variant = Variant::full;

    void validate() const;
};

nlohmann::json config_to_json(const ReconConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
ReconConfig config_from_json(const nlohmann::json& j, ReconConfig base = {});

struct ProjectionLoss {
    double total = 0.0;
    double euclidean = 0.0;   // sum_i |A_i v - I_i|_2
    double perceptual = 0.0;  // sum_i L_p(A_i v, I_i)
};

// sum_i lambda_2*|A_i v - I_i|_2 + lambda_p*L_p(A_i v, I_i). Writes dL/dv
// into `grad` when given.
ProjectionLoss projection_loss(const Volume& v, std::span<const Projection> projections,
                               std::span<const ProjectionGeometry> geoms, double lambda_2,
                               double lambda_p, Volume* grad = nullptr);

struct TraceRow {
    int iteration = 0;
    std::string phase;
    double total = 0.0;
    double projection = 0.0;
    double coupling = 0.0;
    double smoothness = 0.0;
    double regularizer = 0.0;
};

struct WarmupResult {
    LatentParams g;
    std::vector<TraceRow> trace;  // objective before each update
    double final_objective = 0.0;  // objective at the returned g
};

// Adam on g over sum_i L_i(v(g), I_i) + R(g), starting from
// sample_latent(prior, cfg.seed).
WarmupResult warmup(const GenerativePrior& prior, std::span<const Projection> projections,
                    std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg);

struct JointTerms {
    double projection = 0.0;
    double coupling = 0.0;
    double smoothness = 0.0;
    double regularizer = 0.0;
    double total = 0.0;
};

// Main-phase objective J(g, u) = sum_i L_i(W(v-, Phi(u)), I_i)
// + lambda_s*|v(g) - W(v-, Phi(u))|^2 + smoothness(u) + R(g), with
// gradients when requested. u lives on the control grid.
JointTerms joint_objective(const GenerativePrior& prior, const LatentParams& g, const VelocityField& u,
                           const Volume& v_minus, std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg,
                           LatentParams* grad_g = nullptr, VelocityField* grad_u = nullptr);

struct ReconResult {
    Variant variant = Variant::full;
    Volume recovered;
    std::optional<LatentParams> g;
    std::optional<VelocityField> u;
    std::optional<DeformationField> deformation;  // on the volume grid
    std::vector<TraceRow> trace;
    std::vector<std::string> warnings;
};

// Guided joint optimization over (g, u) after warm-up; returns W(v-, Phi(u*)).
ReconResult reconstruct(const GenerativePrior& prior, const Volume& v_minus,
                        std::span<const Projection> projections,
                        std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg);

ReconResult run_variant(Variant mode, const GenerativePrior& prior, const Volume& v_minus,
                        std::span<const Projection> projections,
                        std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg);

}  // namespace guidedrec
