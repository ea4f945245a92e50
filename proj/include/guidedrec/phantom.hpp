#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedrec/deform.hpp"
#include "guidedrec/projector.hpp"
#include "guidedrec/random.hpp"
#include "guidedrec/volume.hpp"

namespace guidedrec {

// Sampling ranges for procedural head-and-neck phantoms. Lengths refer to a
// 192 mm reference box and are scaled to the target grid.
struct PhantomParams {
    double soft_tissue = 0.45;
    double bone = 0.85;
    double cartilage = 0.55;
    double tumor_contrast = 0.05;
    double intensity_jitter = 0.02;
    double size_jitter = 0.06;        // relative, per axis
    double position_jitter_mm = 4.0;
    double tumor_probability = 0.5;
    bool random_pose = true;          // draw jaw opening and neck twist
    double max_pose_twist_deg = 8.0;
    double max_pose_jaw_deg = 15.0;

    void validate() const;
};

// One concrete draw from PhantomParams.
struct PhantomAnatomy {
    Vec3 scale{1, 1, 1};
    Vec3 offset{0, 0, 0};   // mm
    double soft = 0.45;
    double bone = 0.85;
    double cartilage = 0.55;
    double skull_thickness = 5.0;
    double mouth_scale = 1.0;
    double mandible_width = 1.0;
    double larynx_shift = 0.0;  // mm along z
    bool has_tumor = false;
    Vec3 tumor_center{0, 0, 0};  // reference-box mm
    double tumor_radius = 9.0;
    double tumor_intensity = 0.5;
    double pose_twist_deg = 0.0;
    double pose_jaw_deg = 0.0;
};

struct Phantom {
    Grid3 grid;
    std::uint64_t seed = 0;
    PhantomAnatomy anatomy;
    Volume volume;
    std::map<std::string, Volume> masks;  // "mouth", "larynx"; 0/1 valued
};

inline const std::vector<std::string> kStructureNames = {"mouth", "larynx"};

// Throws UsageError if the head does not fit in the grid after 10 shrinking
// retries.
Phantom generate_phantom(const Grid3& grid, std::uint64_t seed, const PhantomParams& params = {});

struct LongitudinalChange {
    double twist_deg = 0.0;       // about the inferior-superior axis, depth weighted
    double jaw_deg = 0.0;         // opening about the mandible hinge
    double compression = 1.0;     // soft-tissue radial factor, 0.85 to 1
    double tumor_scale = 1.0;     // 0.5 to 1.5
    Vec3 rigid_rotation_deg{0, 0, 0};  // axis-angle vector, |.| <= 5
    Vec3 rigid_translation_mm{0, 0, 0};  // |.| <= 5

    void validate() const;
    bool is_identity() const;
};

// A change with every mode active, magnitudes drawn from the declared ranges.
LongitudinalChange sample_change(Rng& rng);

struct ChangedPhantom {
    Volume volume;
    std::map<std::string, Volume> masks;
    DeformationField gt_deformation;  // pull-back: v_gt(x) = v_minus(x + phi(x)) away from the tumor
};

// Pull-back map x -> psi(x) of a change, in world mm.
Vec3 change_pullback(const Phantom& phantom, const LongitudinalChange& change, const Vec3& x);

// Throws UsageError if the composed field folds.
ChangedPhantom apply_longitudinal_change(const Phantom& phantom, const LongitudinalChange& change);

struct Case {
    std::string name;
    Grid3 grid;
    Volume v_minus;
    Volume v_gt;
    std::vector<Projection> projections;
    std::vector<ProjectionGeometry> geoms;
    std::map<std::string, Volume> masks_pre;
    std::map<std::string, Volume> masks_gt;
    DeformationField gt_deformation;
    LongitudinalChange change;
    std::uint64_t seed = 0;
};

// v_minus = phantom, v_gt = changed phantom, projections of v_gt. Throws
// DataIntegrityError when a non-identity change leaves the case trivial.
Case make_case(const Phantom& phantom, const LongitudinalChange& change,
               const std::vector<ProjectionGeometry>& geoms);

// Biplanar views with 2x detector oversampling, the standard pipeline.
std::vector<ProjectionGeometry> standard_views(const Grid3& grid);

// Case `index` of a seeded cohort: independent anatomy and change streams.
Case cohort_case(const Grid3& grid, std::uint64_t seed, int index, const PhantomParams& params = {});

nlohmann::json anatomy_to_json(const PhantomAnatomy& a);
PhantomAnatomy anatomy_from_json(const nlohmann::json& j);
nlohmann::json change_to_json(const LongitudinalChange& c);
LongitudinalChange change_from_json(const nlohmann::json& j);
nlohmann::json params_to_json(const PhantomParams& p);

// Directory layout: v_minus.gvol, v_gt.gvol, proj_<i>.gprj, geom_<i>.json,
// masks/<pre|gt>_<structure>.gvol, gt_def/phi_{x,y,z}.gvol + phi.json,
// change.json.
void save_case(const std::filesystem::path& dir, const Case& c);
Case load_case(const std::filesystem::path& dir);

// Writes n cases under out_dir/case_<i> plus manifest.json; returns the
// manifest.
nlohmann::json generate_cohort(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                               const Grid3& grid, const PhantomParams& params = {});

// Case directories listed in a cohort manifest, in order.
std::vector<std::filesystem::path> cohort_case_dirs(const std::filesystem::path& cohort_dir);

}  // namespace guidedrec
