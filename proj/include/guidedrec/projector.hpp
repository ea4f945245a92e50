#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedrec/volume.hpp"

namespace guidedrec {

enum class BeamKind { cone, parallel };

// One calibrated X-ray view. Pixel (iu, iv) is centered at
// detector_origin + iu*du*detector_u + iv*dv*detector_v.
struct ProjectionGeometry {
    BeamKind kind = BeamKind::parallel;
    Vec3 source{0, 0, 0};     // cone only
    Vec3 direction{0, 1, 0};  // parallel only, unit length
    Vec3 detector_origin{0, 0, 0};
    Vec3 detector_u{1, 0, 0};
    Vec3 detector_v{0, 0, 1};
    int nu = 1;
    int nv = 1;
    double du = 1.0;
    double dv = 1.0;
    double step = 1.0;  // ray sampling step, mm

    void validate() const;
    Vec3 pixel_center(double iu, double iv) const {
        return detector_origin + (iu * du) * detector_u + (iv * dv) * detector_v;
    }
    // Unit ray direction through a pixel center.
    Vec3 ray_direction(const Vec3& pixel) const {
        return kind == BeamKind::parallel ? direction : (pixel - source).normalized();
    }
    // Continuous detector coordinate (pixel units) of a world point, or false
    // if the point does not project onto the detector plane.
    bool detector_coordinate(const Vec3& p_world, double& iu, double& iv) const;
};

// Line integrals of normalized attenuation, u fastest.
struct Projection {
    int nu = 0;
    int nv = 0;
    double du = 1.0;
    double dv = 1.0;
    std::vector<double> data;

    Projection() = default;
    explicit Projection(const ProjectionGeometry& g, double fill = 0.0)
        : nu(g.nu), nv(g.nv), du(g.du), dv(g.dv), data(static_cast<std::size_t>(g.nu) * g.nv, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    double& at(int iu, int iv) { return data[static_cast<std::size_t>(iv) * nu + iu]; }
    double at(int iu, int iv) const { return data[static_cast<std::size_t>(iv) * nu + iu]; }
    bool matches(const ProjectionGeometry& g) const { return nu == g.nu && nv == g.nv; }
    bool operator==(const Projection&) const = default;
};

// Forward projection A: per pixel, step * sum of trilinear samples taken at
// the midpoints of uniform `step` intervals along the ray clipped to the
// support of the interpolant.
Projection project(const Volume& v, const ProjectionGeometry& geom);

// Exact transpose of project() for the given target grid.
Volume project_adjoint(const Projection& residual, const ProjectionGeometry& geom,
                       const Grid3& target);

// Unfiltered averaging backprojection: each voxel takes the mean of the
// bilinearly sampled projection values over the views that see it.
Volume backproject_average(std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const Grid3& grid);

// Anterior-posterior (+y) and lateral (+x) parallel views centered on the
// grid. pixel_pitch <= 0 selects the grid's minimum spacing.
std::pair<ProjectionGeometry, ProjectionGeometry> default_biplanar(const Grid3& grid,
                                                                   double pixel_pitch = 0.0);

double dot(const Projection& a, const Projection& b);

// GPRJ: "GPRJ" | u32 version=1 | u32 nu, nv | f64 du, dv | nu*nv f32, u fastest.
inline constexpr std::uint32_t kGprjVersion = 1;
std::vector<std::uint8_t> encode_gprj(const Projection& p);
Projection decode_gprj(std::span<const std::uint8_t> bytes);
void write_gprj(const std::filesystem::path& path, const Projection& p);
Projection read_gprj(const std::filesystem::path& path);

nlohmann::json geometry_to_json(const ProjectionGeometry& g);
ProjectionGeometry geometry_from_json(const nlohmann::json& j);

}  // namespace guidedrec
