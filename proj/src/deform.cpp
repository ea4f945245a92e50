#include "guidedrec/deform.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/LU>
#include <fmt/format.h>

#include "guidedrec/adam.hpp"
#include "guidedrec/errors.hpp"
#include "guidedrec/interp.hpp"
#include "guidedrec/json_io.hpp"

namespace guidedrec {

namespace {

// Voxel coordinate in `source` of target voxel (i, j, k) is offset + scale*(i, j, k).
struct LatticeMap {
    Vec3 scale;
    Vec3 offset;
    LatticeMap(const Grid3& source, const Grid3& target)
        : scale(target.spacing.cwiseQuotient(source.spacing)),
          offset((target.origin - source.origin).cwiseQuotient(source.spacing)) {}
};

void require_same_grid(const Grid3& a, const Grid3& b, const char* what) {
    if (!(a == b)) throw UsageError(std::string(what) + ": grid mismatch");
}

}  // namespace

double VectorField::max_norm() const {
    double m = 0.0;
    for (std::size_t n = 0; n < nodes(); ++n) m = std::max(m, at(n).norm());
    return m;
}

VectorField resample_field(const VectorField& f, const Grid3& target) {
    if (f.grid == target) return f;
    VectorField out(target);
    const LatticeMap map(f.grid, target);
    const auto& td = target.dims;
#pragma omp parallel for schedule(static)
    for (int k = 0; k < td[2]; ++k)
        for (int j = 0; j < td[1]; ++j)
            for (int i = 0; i < td[0]; ++i) {
                const Vec3 s = interp::sample3(f.data.data(), f.grid.dims, map.offset[0] + map.scale[0] * i,
                                               map.offset[1] + map.scale[1] * j,
                                               map.offset[2] + map.scale[2] * k);
                out.set(target.index(i, j, k), s);
            }
    return out;
}

VectorField resample_field_adjoint(const VectorField& on_target, const Grid3& source) {
    if (on_target.grid == source) return on_target;
    VectorField out(source);
    const Grid3& target = on_target.grid;
    const LatticeMap map(source, target);
    const auto& td = target.dims;
    for (int k = 0; k < td[2]; ++k)
        for (int j = 0; j < td[1]; ++j)
            for (int i = 0; i < td[0]; ++i)
                interp::scatter3(out.data.data(), source.dims, map.offset[0] + map.scale[0] * i,
                                 map.offset[1] + map.scale[1] * j, map.offset[2] + map.scale[2] * k,
                                 on_target.at(target.index(i, j, k)));
    return out;
}

namespace {

// phi(x) + phi(x + phi(x)) on phi's own lattice.
DeformationField self_compose(const DeformationField& phi) {
    DeformationField out(phi.grid);
    const Grid3& g = phi.grid;
    const Vec3 inv_h = g.spacing.cwiseInverse();
    const double* src = phi.data.data();
#pragma omp parallel for schedule(static)
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const std::size_t n = g.index(i, j, k);
                const double* d = src + 3 * n;
                const Vec3 s = interp::sample3(src, g.dims, i + d[0] * inv_h[0], j + d[1] * inv_h[1],
                                               k + d[2] * inv_h[2]);
                out.data[3 * n] = d[0] + s[0];
                out.data[3 * n + 1] = d[1] + s[1];
                out.data[3 * n + 2] = d[2] + s[2];
            }
    return out;
}

}  // namespace

DeformationField integrate_velocity(const VelocityField& u, int steps, IntegrationTape* tape) {
    if (steps < 1) throw UsageError("integrate_velocity: steps must be >= 1");
    DeformationField phi(u.grid);
    const double scale = std::ldexp(1.0, -steps);
    for (std::size_t n = 0; n < u.data.size(); ++n) phi.data[n] = u.data[n] * scale;
    if (tape) {
        tape->stages.clear();
        tape->steps = steps;
    }
    for (int s = 0; s < steps; ++s) {
        if (tape) tape->stages.push_back(phi);
        phi = self_compose(phi);
    }
    return phi;
}

VelocityField integrate_velocity_vjp(const IntegrationTape& tape, const DeformationField& upstream) {
    if (tape.stages.empty()) throw UsageError("integrate_velocity_vjp: empty tape");
    const Grid3& g = tape.stages.front().grid;
    require_same_grid(g, upstream.grid, "integrate_velocity_vjp");
    const Vec3 inv_h = g.spacing.cwiseInverse();
    std::vector<double> grad = upstream.data;
    for (int s = tape.steps - 1; s >= 0; --s) {
        const DeformationField& cur = tape.stages[static_cast<std::size_t>(s)];
        const double* src = cur.data.data();
        std::vector<double> next = grad;  // identity term
        for (int k = 0; k < g.dims[2]; ++k)
            for (int j = 0; j < g.dims[1]; ++j)
                for (int i = 0; i < g.dims[0]; ++i) {
                    const std::size_t n = g.index(i, j, k);
                    const Vec3 up(grad[3 * n], grad[3 * n + 1], grad[3 * n + 2]);
                    if (up[0] == 0.0 && up[1] == 0.0 && up[2] == 0.0) continue;
                    const double* d = src + 3 * n;
                    const double px = i + d[0] * inv_h[0], py = j + d[1] * inv_h[1],
                                 pz = k + d[2] * inv_h[2];
                    Mat3 jac;
                    interp::sample3_jac(src, g.dims, px, py, pz, jac);
                    interp::scatter3(next.data(), g.dims, px, py, pz, up);
                    const Vec3 pos = (jac.transpose() * up).cwiseProduct(inv_h);
                    next[3 * n] += pos[0];
                    next[3 * n + 1] += pos[1];
                    next[3 * n + 2] += pos[2];
                }
        grad.swap(next);
    }
    VelocityField out(g);
    const double scale = std::ldexp(1.0, -tape.steps);
    for (std::size_t n = 0; n < grad.size(); ++n) out.data[n] = grad[n] * scale;
    return out;
}

DeformationField velocity_to_deformation(const VelocityField& u, const Grid3& target, int steps,
                                         IntegrationTape* tape) {
    // Integrated on the control lattice, then upsampled.
    const DeformationField phi = integrate_velocity(u, steps, tape);
    if (u.grid == target) return phi;
    return DeformationField(resample_field(phi, target));
}

VelocityField velocity_to_deformation_vjp(const IntegrationTape& tape, const Grid3& control,
                                          const DeformationField& upstream) {
    if (upstream.grid == control) return integrate_velocity_vjp(tape, upstream);
    return integrate_velocity_vjp(tape, DeformationField(resample_field_adjoint(upstream, control)));
}

Volume warp(const Volume& v, const DeformationField& phi) {
    require_same_grid(v.grid(), phi.grid, "warp");
    const Grid3& g = v.grid();
    Volume out(g);
    const Vec3 inv_h = g.spacing.cwiseInverse();
    const double* src = v.data().data();
    const double* f = phi.data.data();
#pragma omp parallel for schedule(static)
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const std::size_t n = g.index(i, j, k);
                out[n] = interp::sample(src, g.dims, i + f[3 * n] * inv_h[0], j + f[3 * n + 1] * inv_h[1],
                                        k + f[3 * n + 2] * inv_h[2]);
            }
    return out;
}

WarpGradients warp_vjp(const Volume& v, const DeformationField& phi, const Volume& upstream,
                       bool need_volume, bool need_field) {
    require_same_grid(v.grid(), phi.grid, "warp_vjp");
    require_same_grid(v.grid(), upstream.grid(), "warp_vjp");
    const Grid3& g = v.grid();
    WarpGradients out{need_volume ? Volume(g) : Volume(), need_field ? DeformationField(g) : DeformationField()};
    const Vec3 inv_h = g.spacing.cwiseInverse();
    const double* src = v.data().data();
    const double* f = phi.data.data();
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const std::size_t n = g.index(i, j, k);
                const double up = upstream[n];
                if (up == 0.0) continue;
                const double px = i + f[3 * n] * inv_h[0], py = j + f[3 * n + 1] * inv_h[1],
                             pz = k + f[3 * n + 2] * inv_h[2];
                if (need_volume) interp::scatter(out.volume.data().data(), g.dims, px, py, pz, up);
                if (need_field) {
                    double grad[3];
                    interp::sample_grad(src, g.dims, px, py, pz, grad);
                    for (int a = 0; a < 3; ++a) out.field.data[3 * n + a] = up * grad[a] * inv_h[a];
                }
            }
    return out;
}

DeformationField compose(const DeformationField& first, const DeformationField& second) {
    require_same_grid(first.grid, second.grid, "compose");
    const Grid3& g = first.grid;
    DeformationField out(g);
    const Vec3 inv_h = g.spacing.cwiseInverse();
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const std::size_t n = g.index(i, j, k);
                const Vec3 b = second.at(n);
                const Vec3 a = interp::sample3(first.data.data(), g.dims, i + b[0] * inv_h[0],
                                               j + b[1] * inv_h[1], k + b[2] * inv_h[2]);
                out.set(n, a + b);
            }
    return out;
}

double smoothness_loss(const VectorField& u, double lambda, VectorField* grad) {
    const Grid3& g = u.grid;
    if (grad) *grad = VectorField(g);
    const std::size_t stride[3] = {1, static_cast<std::size_t>(g.dims[0]),
                                   static_cast<std::size_t>(g.dims[0]) * g.dims[1]};
    double acc = 0.0;
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const int idx[3] = {i, j, k};
                const std::size_t n = g.index(i, j, k);
                for (int a = 0; a < 3; ++a) {
                    if (idx[a] + 1 >= g.dims[a]) continue;
                    const std::size_t m = n + stride[a];
                    for (int c = 0; c < 3; ++c) {
                        const double d = u.data[3 * m + c] - u.data[3 * n + c];
                        acc += d * d;
                        if (grad) {
                            grad->data[3 * m + c] += 2.0 * lambda * d;
                            grad->data[3 * n + c] -= 2.0 * lambda * d;
                        }
                    }
                }
            }
    return lambda * acc;
}

Volume jacobian_det(const DeformationField& phi) {
    const Grid3& g = phi.grid;
    Volume det(g, 1.0);
    const std::size_t stride[3] = {1, static_cast<std::size_t>(g.dims[0]),
                                   static_cast<std::size_t>(g.dims[0]) * g.dims[1]};
    for (int k = 1; k + 1 < g.dims[2]; ++k)
        for (int j = 1; j + 1 < g.dims[1]; ++j)
            for (int i = 1; i + 1 < g.dims[0]; ++i) {
                const std::size_t n = g.index(i, j, k);
                Mat3 m = Mat3::Identity();
                for (int a = 0; a < 3; ++a) {
                    const Vec3 d = (phi.at(n + stride[a]) - phi.at(n - stride[a])) / (2.0 * g.spacing[a]);
                    m.col(a) += d;
                }
                det[n] = m.determinant();
            }
    return det;
}

double min_jacobian_det(const DeformationField& phi) {
    const Volume det = jacobian_det(phi);
    return *std::min_element(det.data().begin(), det.data().end());
}

Grid3 control_grid(const Grid3& volume_grid, int factor) {
    Dims3 d;
    for (int a = 0; a < 3; ++a) d[a] = std::max(2, volume_grid.dims[a] / std::max(1, factor));
    return volume_grid.with_dims(d);
}

RegisterResult register_volumes(const Volume& v1, const Volume& v2, const RegisterConfig& cfg) {
    require_same_grid(v1.grid(), v2.grid(), "register_volumes");
    if (cfg.levels < 1 || cfg.iters_per_level < 0) throw UsageError("register_volumes: invalid level schedule");
    const Grid3& grid = v1.grid();
    RegisterResult result;
    VelocityField best_u;
    for (int level = 0; level < cfg.levels; ++level) {
        const int factor = cfg.control_factor << (cfg.levels - 1 - level);
        const Grid3 cgrid = control_grid(grid, factor);
        VelocityField u = level == 0 ? VelocityField(cgrid) : VelocityField(resample_field(best_u, cgrid));
        best_u = u;
        AdamState adam(u.data.size());
        double best = std::numeric_limits<double>::infinity();
        bool converged = false;
        std::vector<double> level_trace;
        for (int it = 0; it < cfg.iters_per_level; ++it) {
            IntegrationTape tape;
            const DeformationField phi = velocity_to_deformation(u, grid, cfg.steps, &tape);
            const Volume warped = warp(v1, phi);
            Volume upstream(grid);
            double sim = 0.0;
            for (std::size_t n = 0; n < warped.size(); ++n) {
                const double r = warped[n] - v2[n];
                sim += r * r;
                upstream[n] = 2.0 * cfg.lambda_s * r;
            }
            VelocityField smooth_grad;
            const double objective = cfg.lambda_s * sim + smoothness_loss(u, cfg.lambda_d, &smooth_grad);
            if (!std::isfinite(objective)) throw NumericalError("registration", "non-finite registration objective");
            if (objective < best) {
                best = objective;
                best_u = u;
            }
            level_trace.push_back(best);
            result.objective_trace.push_back(best);
            result.level_of_iteration.push_back(level);

            const int window = cfg.patience;
            if (static_cast<int>(level_trace.size()) > window) {
                const double before = level_trace[level_trace.size() - 1 - window];
                if (before - best <= cfg.tolerance * std::max(std::abs(before), 1e-30)) {
                    converged = true;
                    break;
                }
            }

            const WarpGradients wg = warp_vjp(v1, phi, upstream, false, true);
            VelocityField grad = velocity_to_deformation_vjp(tape, cgrid, wg.field);
            for (std::size_t n = 0; n < grad.data.size(); ++n) grad.data[n] += smooth_grad.data[n];
            adam_step(adam, u.data, grad.data, cfg.lr, {}, {}, "velocity");
        }
        if (level == cfg.levels - 1) result.budget_exhausted = !converged && cfg.iters_per_level > 0;
    }
    result.velocity = best_u;
    return result;
}

void save_field(const std::filesystem::path& dir, const std::string& prefix, const VectorField& f,
                const std::string& convention) {
    std::filesystem::create_directories(dir);
    static const char* axes[3] = {"x", "y", "z"};
    nlohmann::json manifest;
    manifest["grid"] = grid_to_json(f.grid);
    manifest["convention"] = convention;
    manifest["units"] = "mm";
    for (int c = 0; c < 3; ++c) {
        Volume comp(f.grid);
        for (std::size_t n = 0; n < f.nodes(); ++n) comp[n] = f.data[3 * n + c];
        const std::string name = fmt::format("{}_{}.gvol", prefix, axes[c]);
        write_gvol(dir / name, comp);
        manifest["components"].push_back(name);
    }
    write_json(dir / (prefix + ".json"), manifest);
}

VectorField load_field(const std::filesystem::path& dir, const std::string& prefix) {
    const nlohmann::json manifest = read_json(dir / (prefix + ".json"));
    VectorField f(grid_from_json(manifest.at("grid")));
    const auto& comps = manifest.at("components");
    if (comps.size() != 3) throw ParseError("components", "field manifest must list 3 components");
    for (int c = 0; c < 3; ++c) {
        const Volume comp = read_gvol(dir / comps[c].get<std::string>());
        if (!(comp.grid() == f.grid)) throw ParseError("components", "field component grid mismatch");
        for (std::size_t n = 0; n < f.nodes(); ++n) f.data[3 * n + c] = comp[n];
    }
    return f;
}

}  // namespace guidedrec
