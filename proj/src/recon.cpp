#include "guidedrec/recon.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "guidedrec/errors.hpp"
#include "guidedrec/perceptual.hpp"

namespace guidedrec {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::no_prior: return "no-prior";
        case Variant::gen_only: return "gen-only";
        case Variant::gen_then_deform: return "gen-then-deform";
        case Variant::deform_only: return "deform-only";
        case Variant::full: return "full";
    }
    return "unknown";
}

Variant parse_variant(const std::string& name) {
    for (Variant v : kAllVariants)
        if (variant_name(v) == name) return v;
    throw UsageError("unknown variant '" + name + "'");
}

void ReconConfig::validate() const {
    for (double l : {lambda_2, lambda_p, lambda_s, lambda_d, reg.lambda_w, reg.lambda_c, reg.lambda_n})
        if (!(l >= 0.0)) throw UsageError("all loss weights must be non-negative");
    if (!(reg.kappa > 0.0)) throw UsageError("kappa must be positive");
    if (warmup_iters < 0 || main_iters < 0) throw UsageError("iteration counts must be non-negative");
    for (double lr : {lr_g, lr_u, lr_v, lr_phi})
        if (!(lr > 0.0)) throw UsageError("learning rates must be positive");
    if (control_factor < 1 || integration_steps < 1) throw UsageError("invalid deformation discretization");
}

nlohmann::json config_to_json(const ReconConfig& c) {
    return {
        {"lambda_2", c.lambda_2},
        {"lambda_p", c.lambda_p},
        {"lambda_w", c.reg.lambda_w},
        {"lambda_c", c.reg.lambda_c},
        {"lambda_n", c.reg.lambda_n},
        {"kappa", c.reg.kappa},
        {"lambda_s", c.lambda_s},
        {"lambda_D", c.lambda_d},
        {"warmup_iters", c.warmup_iters},
        {"main_iters", c.main_iters},
        {"lr_g", c.lr_g},
        {"lr_u", c.lr_u},
        {"lr_v", c.lr_v},
        {"lr_phi", c.lr_phi},
        {"adam_beta1", c.adam.beta1},
        {"adam_beta2", c.adam.beta2},
        {"adam_eps", c.adam.eps},
        {"alternate", c.alternate},
        {"control_factor", c.control_factor},
        {"integration_steps", c.integration_steps},
        {"registration",
         {{"lambda_s", c.registration.lambda_s},
          {"lambda_D", c.registration.lambda_d},
          {"levels", c.registration.levels},
          {"iters_per_level", c.registration.iters_per_level},
          {"control_factor", c.registration.control_factor},
          {"lr", c.registration.lr},
          {"steps", c.registration.steps},
          {"tolerance", c.registration.tolerance},
          {"patience", c.registration.patience}}},
        {"seed", c.seed},
        {"variant", variant_name(c.variant)},
    };
}

ReconConfig config_from_json(const nlohmann::json& j, ReconConfig c) {
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "lambda_2") c.lambda_2 = val.get<double>();
            else if (key == "lambda_p") c.lambda_p = val.get<double>();
            else if (key == "lambda_w") c.reg.lambda_w = val.get<double>();
            else if (key == "lambda_c") c.reg.lambda_c = val.get<double>();
            else if (key == "lambda_n") c.reg.lambda_n = val.get<double>();
            else if (key == "kappa") c.reg.kappa = val.get<double>();
            else if (key == "lambda_s") c.lambda_s = val.get<double>();
            else if (key == "lambda_D") c.lambda_d = val.get<double>();
            else if (key == "warmup_iters") c.warmup_iters = val.get<int>();
            else if (key == "main_iters") c.main_iters = val.get<int>();
            else if (key == "lr_g") c.lr_g = val.get<double>();
            else if (key == "lr_u") c.lr_u = val.get<double>();
            else if (key == "lr_v") c.lr_v = val.get<double>();
            else if (key == "lr_phi") c.lr_phi = val.get<double>();
            else if (key == "adam_beta1") c.adam.beta1 = val.get<double>();
            else if (key == "adam_beta2") c.adam.beta2 = val.get<double>();
            else if (key == "adam_eps") c.adam.eps = val.get<double>();
            else if (key == "alternate") c.alternate = val.get<bool>();
            else if (key == "control_factor") c.control_factor = val.get<int>();
            else if (key == "integration_steps") c.integration_steps = val.get<int>();
            else if (key == "seed") c.seed = val.get<std::uint64_t>();
            else if (key == "variant") c.variant = parse_variant(val.get<std::string>());
            else if (key == "registration") {
                for (const auto& [rk, rv] : val.items()) {
                    auto& r = c.registration;
                    if (rk == "lambda_s") r.lambda_s = rv.get<double>();
                    else if (rk == "lambda_D") r.lambda_d = rv.get<double>();
                    else if (rk == "levels") r.levels = rv.get<int>();
                    else if (rk == "iters_per_level") r.iters_per_level = rv.get<int>();
                    else if (rk == "control_factor") r.control_factor = rv.get<int>();
                    else if (rk == "lr") r.lr = rv.get<double>();
                    else if (rk == "steps") r.steps = rv.get<int>();
                    else if (rk == "tolerance") r.tolerance = rv.get<double>();
                    else if (rk == "patience") r.patience = rv.get<int>();
                    else throw UsageError("unknown registration config key '" + rk + "'");
                }
            } else {
                throw UsageError("unknown config key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("invalid config value: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

void require_finite(double x, const std::string& term) {
    if (!std::isfinite(x)) throw NumericalError(term, "non-finite value in objective term '" + term + "'");
}

void check_views(std::span<const Projection> projections, std::span<const ProjectionGeometry> geoms) {
    if (projections.size() != geoms.size()) throw UsageError("projections and geometries must be paired");
    if (projections.empty()) throw UsageError("at least one projection is required");
    for (std::size_t i = 0; i < geoms.size(); ++i)
        if (!projections[i].matches(geoms[i]))
            throw UsageError(fmt::format("projection {} does not match its detector shape", i));
}

// Per-parameter step scale for latent Adam: sigma for w, 1 for noise.
std::vector<double> latent_step_scale(const GenerativePrior& prior) {
    std::vector<double> s;
    for (const auto& sc : prior.scales) s.insert(s.end(), sc.sigma.begin(), sc.sigma.end());
    for (const auto& sc : prior.scales) s.insert(s.end(), sc.grid.size(), 1.0);
    return s;
}

void add_into(std::vector<double>& acc, const std::vector<double>& x) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

// sum_i L_i(v(g), I_i) + R(g) and its gradient in flattened latent order.
struct LatentObjective {
    double total = 0.0;
    double projection = 0.0;
    double regularizer = 0.0;
};

LatentObjective latent_objective(const GenerativePrior& prior, const LatentParams& g,
                                 std::span<const Projection> projections,
                                 std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg,
                                 std::vector<double>* grad) {
    const Volume pre = synthesize_linear(prior, g);
    Volume v = pre;
    for (double& x : v.data()) x = std::clamp(x, 0.0, 1.0);
    Volume dv;
    const ProjectionLoss pl =
        projection_loss(v, projections, geoms, cfg.lambda_2, cfg.lambda_p, grad ? &dv : nullptr);
    LatentParams rg;
    const RegTerms reg = reg_loss(prior, g, cfg.reg, grad ? &rg : nullptr);
    require_finite(reg.total, "regularizer");
    LatentObjective o{pl.total + reg.total, pl.total, reg.total};
    require_finite(o.total, "total");
    if (grad) {
        *grad = synthesize_vjp(prior, pre, dv).flatten();
        add_into(*grad, rg.flatten());
    }
    return o;
}

// Adam on g over the warm-up objective for `iters` steps.
WarmupResult optimize_latent(const GenerativePrior& prior, LatentParams g,
                             std::span<const Projection> projections,
                             std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg, int iters,
                             const std::string& phase) {
    WarmupResult out;
    std::vector<double> flat = g.flatten();
    const std::vector<double> scale = latent_step_scale(prior);
    AdamState adam(flat.size());
    std::vector<double> grad;
    for (int it = 0; it < iters; ++it) {
        const LatentObjective o = latent_objective(prior, g, projections, geoms, cfg, &grad);
        out.trace.push_back({it, phase, o.total, o.projection, 0.0, 0.0, o.regularizer});
        adam_step(adam, flat, grad, cfg.lr_g, cfg.adam, scale, "latent");
        g.unflatten(flat);
    }
    out.final_objective = latent_objective(prior, g, projections, geoms, cfg, nullptr).total;
    out.g = std::move(g);
    return out;
}

}  // namespace

ProjectionLoss projection_loss(const Volume& v, std::span<const Projection> projections,
                               std::span<const ProjectionGeometry> geoms, double lambda_2,
                               double lambda_p, Volume* grad) {
    check_views(projections, geoms);
    ProjectionLoss out;
    if (grad) *grad = Volume(v.grid());
    for (std::size_t i = 0; i < geoms.size(); ++i) {
        const Projection ax = project(v, geoms[i]);
        const Projection& meas = projections[i];
        double sq = 0.0;
        for (std::size_t n = 0; n < ax.size(); ++n) {
            const double r = ax.data[n] - meas.data[n];
            sq += r * r;
        }
        const double norm = std::sqrt(sq);
        require_finite(norm, "projection_l2");
        out.euclidean += norm;

        Projection dproj(geoms[i]);
        double lp = 0.0;
        if (lambda_p != 0.0) {
            const ImageView pv{ax.data, ax.nu, ax.nv};
            const ImageView qv{meas.data, meas.nu, meas.nv};
            lp = perceptual_loss(pv, qv, grad ? std::span<double>(dproj.data) : std::span<double>());
            require_finite(lp, "projection_perceptual");
            if (grad)
                for (double& x : dproj.data) x *= lambda_p;
        }
        out.perceptual += lp;
        if (grad) {
            if (norm > 0.0)
                for (std::size_t n = 0; n < ax.size(); ++n)
                    dproj.data[n] += lambda_2 * (ax.data[n] - meas.data[n]) / norm;
            const Volume back = project_adjoint(dproj, geoms[i], v.grid());
            for (std::size_t n = 0; n < back.size(); ++n) (*grad)[n] += back[n];
        }
    }
    out.total = lambda_2 * out.euclidean + lambda_p * out.perceptual;
    require_finite(out.total, "projection");
    return out;
}

WarmupResult warmup(const GenerativePrior& prior, std::span<const Projection> projections,
                    std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg) {
    cfg.validate();
    check_views(projections, geoms);
    return optimize_latent(prior, sample_latent(prior, cfg.seed), projections, geoms, cfg, cfg.warmup_iters,
                           "warmup");
}

namespace {

struct CoupledTerms {
    double projection = 0.0;
    double coupling = 0.0;
    double smoothness = 0.0;
};

// Projection loss of W(v-, Phi(u)), coupling to `target` and smoothness of
// u. Gradients go to d_target (w.r.t. the target volume) and d_u.
CoupledTerms coupled_terms(const VelocityField& u, const Volume& v_minus, const Volume& target,
                           std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg,
                           Volume* d_target, VelocityField* d_u) {
    const Grid3& grid = v_minus.grid();
    const bool need_grad = d_target || d_u;
    IntegrationTape tape;
    const DeformationField phi =
        velocity_to_deformation(u, grid, cfg.integration_steps, need_grad ? &tape : nullptr);
    const Volume warped = warp(v_minus, phi);

    CoupledTerms t;
    Volume d_warped;
    t.projection = projection_loss(warped, projections, geoms, cfg.lambda_2, cfg.lambda_p,
                                   need_grad ? &d_warped : nullptr)
                       .total;
    if (d_target) *d_target = Volume(grid);
    for (std::size_t n = 0; n < warped.size(); ++n) {
        const double r = target[n] - warped[n];
        t.coupling += r * r;
        if (d_target) (*d_target)[n] = 2.0 * cfg.lambda_s * r;
        if (need_grad) d_warped[n] -= 2.0 * cfg.lambda_s * r;
    }
    t.coupling *= cfg.lambda_s;
    require_finite(t.coupling, "coupling");

    VelocityField d_smooth;
    t.smoothness = smoothness_loss(u, cfg.lambda_d, d_u ? &d_smooth : nullptr);
    require_finite(t.smoothness, "smoothness");
    if (d_u) {
        const WarpGradients wg = warp_vjp(v_minus, phi, d_warped, false, true);
        *d_u = velocity_to_deformation_vjp(tape, u.grid, wg.field);
        for (std::size_t n = 0; n < d_u->data.size(); ++n) d_u->data[n] += d_smooth.data[n];
    }
    return t;
}

// Main phase shared by the full method and the deform-only variant. The
// target is either v(g) (generative) or a free voxel grid.
ReconResult joint_optimize(const GenerativePrior* prior, std::optional<LatentParams> g0,
                           std::optional<Volume> free0, const Volume& v_minus,
                           std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg,
                           std::vector<TraceRow> trace) {
    const Grid3& grid = v_minus.grid();
    const Grid3 cgrid = control_grid(grid, cfg.control_factor);
    const bool generative = g0.has_value();

    ReconResult result;
    result.trace = std::move(trace);
    VelocityField u(cgrid);
    AdamState adam_u(u.data.size());

    LatentParams g;
    std::vector<double> g_flat, g_scale;
    Volume free_volume;
    AdamState adam_t;
    if (generative) {
        g = std::move(*g0);
        g_flat = g.flatten();
        g_scale = latent_step_scale(*prior);
        adam_t = AdamState(g_flat.size());
    } else {
        free_volume = std::move(*free0);
        adam_t = AdamState(free_volume.size());
    }

    for (int it = 0; it < cfg.main_iters; ++it) {
        Volume pre, target;
        if (generative) {
            pre = synthesize_linear(*prior, g);
            target = pre;
            for (double& x : target.data()) x = std::clamp(x, 0.0, 1.0);
        } else {
            target = free_volume;
        }
        Volume d_target;
        VelocityField d_u;
        const CoupledTerms ct = coupled_terms(u, v_minus, target, projections, geoms, cfg, &d_target, &d_u);

        double reg_total = 0.0;
        LatentParams d_g_reg;
        if (generative) {
            reg_total = reg_loss(*prior, g, cfg.reg, &d_g_reg).total;
            require_finite(reg_total, "regularizer");
        }
        const double total = ct.projection + ct.coupling + ct.smoothness + reg_total;
        require_finite(total, "total");
        result.trace.push_back({it, "main", total, ct.projection, ct.coupling, ct.smoothness, reg_total});

        const bool update_u = !cfg.alternate || it % 2 == 0;
        const bool update_t = !cfg.alternate || it % 2 == 1;
        if (update_u) adam_step(adam_u, u.data, d_u.data, cfg.lr_u, cfg.adam, {}, "velocity");
        if (update_t) {
            if (generative) {
                std::vector<double> d_g = synthesize_vjp(*prior, pre, d_target).flatten();
                add_into(d_g, d_g_reg.flatten());
                adam_step(adam_t, g_flat, d_g, cfg.lr_g, cfg.adam, g_scale, "latent");
                g.unflatten(g_flat);
            } else {
                adam_step(adam_t, free_volume.data(), d_target.data(), cfg.lr_v, cfg.adam, {}, "volume");
            }
        }
    }

    DeformationField phi = velocity_to_deformation(u, grid, cfg.integration_steps);
    result.recovered = warp(v_minus, phi);
    result.deformation = std::move(phi);
    result.u = std::move(u);
    if (generative) result.g = std::move(g);
    return result;
}

ReconResult run_no_prior(const Volume& v_minus, std::span<const Projection> projections,
                         std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg) {
    const Grid3& grid = v_minus.grid();
    DeformationField phi(grid);
    AdamState adam(phi.data.size());
    ReconResult result;
    for (int it = 0; it < cfg.warmup_iters + cfg.main_iters; ++it) {
        const Volume warped = warp(v_minus, phi);
        Volume d_warped;
        const ProjectionLoss pl =
            projection_loss(warped, projections, geoms, cfg.lambda_2, cfg.lambda_p, &d_warped);
        result.trace.push_back({it, "main", pl.total, pl.total, 0.0, 0.0, 0.0});
        const WarpGradients wg = warp_vjp(v_minus, phi, d_warped, false, true);
        adam_step(adam, phi.data, wg.field.data, cfg.lr_phi, cfg.adam, {}, "displacement");
    }
    result.recovered = warp(v_minus, phi);
    result.deformation = std::move(phi);
    return result;
}

ReconResult run_gen_only(const GenerativePrior& prior, std::span<const Projection> projections,
                         std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg) {
    WarmupResult w = optimize_latent(prior, sample_latent(prior, cfg.seed), projections, geoms, cfg,
                                     cfg.warmup_iters + cfg.main_iters, "main");
    ReconResult result;
    result.recovered = synthesize(prior, w.g);
    result.g = std::move(w.g);
    result.trace = std::move(w.trace);
    return result;
}

}  // namespace

JointTerms joint_objective(const GenerativePrior& prior, const LatentParams& g, const VelocityField& u,
                           const Volume& v_minus, std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg,
                           LatentParams* grad_g, VelocityField* grad_u) {
    check_views(projections, geoms);
    const Volume pre = synthesize_linear(prior, g);
    Volume target = pre;
    for (double& x : target.data()) x = std::clamp(x, 0.0, 1.0);
    Volume d_target;
    const CoupledTerms ct = coupled_terms(u, v_minus, target, projections, geoms, cfg,
                                          grad_g ? &d_target : nullptr, grad_u);
    LatentParams d_reg;
    const RegTerms reg = reg_loss(prior, g, cfg.reg, grad_g ? &d_reg : nullptr);
    JointTerms t{ct.projection, ct.coupling, ct.smoothness, reg.total, 0.0};
    t.total = t.projection + t.coupling + t.smoothness + t.regularizer;
    require_finite(t.total, "total");
    if (grad_g) {
        std::vector<double> flat = synthesize_vjp(prior, pre, d_target).flatten();
        add_into(flat, d_reg.flatten());
        *grad_g = g.zeros_like();
        grad_g->unflatten(flat);
    }
    return t;
}

ReconResult reconstruct(const GenerativePrior& prior, const Volume& v_minus,
                        std::span<const Projection> projections,
                        std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg) {
    cfg.validate();
    check_views(projections, geoms);
    if (!(v_minus.grid() == prior.output_grid))
        throw UsageError("reconstruct: pre-acquired volume is not on the prior's output grid");
    WarmupResult w = warmup(prior, projections, geoms, cfg);
    ReconResult r = joint_optimize(&prior, std::move(w.g), std::nullopt, v_minus, projections, geoms, cfg,
                                   std::move(w.trace));
    r.variant = Variant::full;
    return r;
}

ReconResult run_variant(Variant mode, const GenerativePrior& prior, const Volume& v_minus,
                        std::span<const Projection> projections,
                        std::span<const ProjectionGeometry> geoms, const ReconConfig& cfg) {
    cfg.validate();
    check_views(projections, geoms);
    if (!(v_minus.grid() == prior.output_grid))
        throw UsageError("run_variant: pre-acquired volume is not on the prior's output grid");
    ReconResult r;
    switch (mode) {
        case Variant::full:
            return reconstruct(prior, v_minus, projections, geoms, cfg);
        case Variant::no_prior:
            r = run_no_prior(v_minus, projections, geoms, cfg);
            break;
        case Variant::gen_only:
            r = run_gen_only(prior, projections, geoms, cfg);
            break;
        case Variant::gen_then_deform: {
            r = run_gen_only(prior, projections, geoms, cfg);
            const RegisterResult reg = register_volumes(v_minus, r.recovered, cfg.registration);
            DeformationField phi =
                velocity_to_deformation(reg.velocity, v_minus.grid(), cfg.registration.steps);
            r.recovered = warp(v_minus, phi);
            r.deformation = std::move(phi);
            r.u = reg.velocity;
            if (reg.budget_exhausted) r.warnings.push_back("registration iteration budget exhausted");
            break;
        }
        case Variant::deform_only:
            r = joint_optimize(nullptr, std::nullopt, v_minus, v_minus, projections, geoms, cfg, {});
            break;
    }
    r.variant = mode;
    return r;
}

}  // namespace guidedrec
