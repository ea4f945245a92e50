#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace guidedrec {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Dims3 = std::array<int, 3>;

// Regular 3D sampling lattice. `origin` is the world position (mm) of the
// center of voxel (0,0,0); axes are aligned with world x/y/z.
struct Grid3 {
    Dims3 dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    // Throws UsageError on non-positive dims or spacing.
    void validate() const;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int i, int j, int k) const noexcept {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                                    static_cast<std::size_t>(dims[1]) * k);
    }

    Vec3 world_to_voxel(const Vec3& p_world) const {
        return (p_world - origin).cwiseQuotient(spacing);
    }
    Vec3 voxel_to_world(const Vec3& p_voxel) const {
        return origin + p_voxel.cwiseProduct(spacing);
    }
    Vec3 voxel_center(int i, int j, int k) const {
        return voxel_to_world(Vec3(i, j, k));
    }

    // World position of the grid center and the physical size of the
    // voxel-edge bounding box.
    Vec3 center() const;
    Vec3 extent() const;
    double min_spacing() const { return spacing.minCoeff(); }

    // Grid covering the same voxel-edge bounding box with different dims.
    Grid3 with_dims(const Dims3& new_dims) const;

    // Cubic grid of n^3 voxels with isotropic spacing, centered on the world
    // origin.
    static Grid3 cube(int n, double spacing_mm);

    bool operator==(const Grid3& other) const;
};

// Scalar volume with x-fastest storage (index i + nx*(j + ny*k)).
class Volume {
public:
    Volume() = default;
    explicit Volume(const Grid3& grid, double fill = 0.0);
    Volume(const Grid3& grid, std::vector<double> data);

    const Grid3& grid() const noexcept { return grid_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t n) noexcept { return data_[n]; }
    double operator[](std::size_t n) const noexcept { return data_[n]; }
    double& at(int i, int j, int k) noexcept { return data_[grid_.index(i, j, k)]; }
    double at(int i, int j, int k) const noexcept { return data_[grid_.index(i, j, k)]; }

    bool operator==(const Volume& other) const = default;

private:
    Grid3 grid_;
    std::vector<double> data_;
};

// Maps Hounsfield units to [0, 1] using the clip range [-1024, 2000].
// Throws DataIntegrityError on non-finite input.
inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 2000.0;
Volume normalize_hu(const Volume& raw);

// Trilinear interpolation at a continuous voxel coordinate. Corners outside
// the lattice read as zero.
double trilinear_sample(const Volume& v, const Vec3& p_voxel);

// Value and gradient (per voxel-coordinate unit) of the interpolant.
double trilinear_sample_grad(const Volume& v, const Vec3& p_voxel, Vec3& grad);

// Samples `v` at every voxel center of `target`.
Volume resample(const Volume& v, const Grid3& target);

// Transpose of resample(., target) as a linear map from `source`-grid
// volumes to `target`-grid volumes.
Volume resample_adjoint(const Volume& on_target, const Grid3& source);

double dot(const Volume& a, const Volume& b);

// GVOL binary format, little-endian:
//   "GVOL" | u32 version=1 | u32 nx, ny, nz | f64 sx, sy, sz | f64 ox, oy, oz |
//   nx*ny*nz f32 values, x fastest.
// Values are stored as f32, so a round trip is exact for f32-representable data.
inline constexpr std::uint32_t kGvolVersion = 1;
void write_gvol(const std::filesystem::path& path, const Volume& v);
Volume read_gvol(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_gvol(const Volume& v);
Volume decode_gvol(std::span<const std::uint8_t> bytes);

}  // namespace guidedrec
