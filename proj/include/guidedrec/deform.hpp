#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "guidedrec/volume.hpp"

namespace guidedrec {

// 3-vector per lattice node, stored interleaved, in mm.
struct VectorField {
    Grid3 grid;
    std::vector<double> data;

    VectorField() = default;
    explicit VectorField(const Grid3& g) : grid(g), data(3 * g.size(), 0.0) { g.validate(); }

    std::size_t nodes() const noexcept { return grid.size(); }
    Vec3 at(std::size_t n) const { return Vec3(data[3 * n], data[3 * n + 1], data[3 * n + 2]); }
    void set(std::size_t n, const Vec3& x) {
        data[3 * n] = x[0];
        data[3 * n + 1] = x[1];
        data[3 * n + 2] = x[2];
    }
    double max_norm() const;
    bool operator==(const VectorField&) const = default;
};

// Stationary velocity u (mm per unit time).
struct VelocityField : VectorField {
    using VectorField::VectorField;
    VelocityField() = default;
    explicit VelocityField(VectorField f) : VectorField(std::move(f)) {}
};

// Pull-back displacement: target point x reads the source at x + phi(x).
struct DeformationField : VectorField {
    using VectorField::VectorField;
    DeformationField() = default;
    explicit DeformationField(VectorField f) : VectorField(std::move(f)) {}
};

// Componentwise trilinear resampling of a field onto another lattice, and
// its transpose.
VectorField resample_field(const VectorField& f, const Grid3& target);
VectorField resample_field_adjoint(const VectorField& on_target, const Grid3& source);

// Intermediate fields of scaling and squaring, kept for the backward pass.
struct IntegrationTape {
    std::vector<DeformationField> stages;  // phi_0 ... phi_{steps-1}
    int steps = 0;
};

// Scaling and squaring: phi_0 = u / 2^steps, phi_{k+1}(x) = phi_k(x) + phi_k(x + phi_k(x)).
DeformationField integrate_velocity(const VelocityField& u, int steps = 6,
                                    IntegrationTape* tape = nullptr);

// Gradient with respect to u of <upstream, integrate_velocity(u)>.
VelocityField integrate_velocity_vjp(const IntegrationTape& tape, const DeformationField& upstream);

// Integrate a control-grid velocity on its own lattice and upsample the
// displacement to `target`.
DeformationField velocity_to_deformation(const VelocityField& u, const Grid3& target, int steps = 6,
                                         IntegrationTape* tape = nullptr);
VelocityField velocity_to_deformation_vjp(const IntegrationTape& tape, const Grid3& control,
                                          const DeformationField& upstream);

// W(v, phi): out(x) = v(x + phi(x)), phi on v's grid.
Volume warp(const Volume& v, const DeformationField& phi);

struct WarpGradients {
    Volume volume;            // d/dv
    DeformationField field;   // d/dphi
};
WarpGradients warp_vjp(const Volume& v, const DeformationField& phi, const Volume& upstream,
                       bool need_volume = true, bool need_field = true);

// Field that warps like W(W(v, first), second).
DeformationField compose(const DeformationField& first, const DeformationField& second);

// lambda * sum over nodes, components and axes of squared forward
// differences (per voxel step). Writes the gradient when `grad` is given.
double smoothness_loss(const VectorField& u, double lambda, VectorField* grad = nullptr);

// det(I + d phi / dx) by central differences; boundary voxels are set to 1.
Volume jacobian_det(const DeformationField& phi);
double min_jacobian_det(const DeformationField& phi);

struct RegisterConfig {
    double lambda_s = 1.0;
    double lambda_d = 0.1;
    int levels = 3;
    int iters_per_level = 80;
    int control_factor = 4;  // finest control grid = volume dims / control_factor
    double lr = 0.5;         // Adam step, mm
    int steps = 6;
    double tolerance = 1e-5;  // relative improvement over `patience` iterations
    int patience = 20;
};

struct RegisterResult {
    VelocityField velocity;              // finest-level control-grid velocity
    std::vector<double> objective_trace;  // best objective so far, per iteration
    std::vector<int> level_of_iteration;
    bool budget_exhausted = false;
};

// Control grid for a volume grid at a given down-sampling factor.
Grid3 control_grid(const Grid3& volume_grid, int factor);

// Minimizes lambda_s*|v2 - W(v1, Phi(u))|^2 + smoothness_loss(u, lambda_d)
// coarse to fine. S(v1, v2) = warp(v1, velocity_to_deformation(result.velocity)).
RegisterResult register_volumes(const Volume& v1, const Volume& v2, const RegisterConfig& cfg = {});

// Three GVOL components (<prefix>_x/_y/_z.gvol) plus <prefix>.json.
void save_field(const std::filesystem::path& dir, const std::string& prefix, const VectorField& f,
                const std::string& convention);
VectorField load_field(const std::filesystem::path& dir, const std::string& prefix);

}  // namespace guidedrec
