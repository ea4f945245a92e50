#include "guidedrec/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>
#include <fmt/format.h>

#include "guidedrec/errors.hpp"
#include "guidedrec/json_io.hpp"

namespace guidedrec {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kReferenceBox = 192.0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double smoothstep(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double softplus(double x, double s) {
    const double t = x / s;
    return t > 30.0 ? x : s * std::log1p(std::exp(t));
}

// Approximate signed distances, mm.
double sd_ellipsoid(const Vec3& p, const Vec3& c, const Vec3& a) {
    const Vec3 d = p - c;
    const double k0 = d.cwiseQuotient(a).norm();
    const double k1 = d.cwiseQuotient(a.cwiseProduct(a)).norm();
    if (k1 == 0.0) return -a.minCoeff();
    return k0 * (k0 - 1.0) / k1;
}

double sd_superellipsoid(const Vec3& p, const Vec3& c, const Vec3& a, double e) {
    const Vec3 d = (p - c).cwiseQuotient(a).cwiseAbs();
    const double k = std::pow(std::pow(d[0], e) + std::pow(d[1], e) + std::pow(d[2], e), 1.0 / e);
    return (k - 1.0) * a.minCoeff();
}

double sd_capsule(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
    const Vec3 ab = b - a;
    const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
    return (p - (a + t * ab)).norm() - r;
}

// Elliptic cylinder along z, center (cx, cy), z in [z0, z1].
double sd_cylinder(const Vec3& p, double cx, double cy, double rx, double ry, double z0, double z1) {
    const double dx = (p[0] - cx) / rx, dy = (p[1] - cy) / ry;
    const double radial = (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(rx, ry);
    const double axial = std::abs(p[2] - 0.5 * (z0 + z1)) - 0.5 * (z1 - z0);
    return std::max(radial, axial);
}

// Primitive layout in reference-box mm (192 mm box, centered, z superior,
// y anterior).
struct Layout {
    const PhantomAnatomy& a;
    double k;  // reference mm -> world mm
    Vec3 center;

    Vec3 to_world(const Vec3& r) const { return center + a.offset + k * a.scale.cwiseProduct(r); }
    Vec3 to_ref(const Vec3& w) const { return (w - center - a.offset).cwiseQuotient(a.scale) / k; }

    Vec3 hinge() const { return to_world(Vec3(0, -6, 14)); }
    Vec3 neck_axis() const { return to_world(Vec3(0, -6, 0)); }
    double neck_bottom() const { return to_world(Vec3(0, 0, -90))[2]; }
    double neck_top() const { return to_world(Vec3(0, 0, 10))[2]; }
    double mouth_z() const { return to_world(Vec3(0, 0, 2))[2]; }
    double jaw_floor() const { return to_world(Vec3(0, 0, -30))[2]; }

    Vec3 head_center() const { return Vec3(0, 6, 24); }
    Vec3 head_axes() const { return Vec3(62, 72, 60); }
};

// Union of all primitives; `tumor_scale` re-rasterizes the tumor.
struct Sample {
    double value = 0.0;
    bool mouth = false;
    bool larynx = false;
};

Sample evaluate_reference(const PhantomAnatomy& a, const Vec3& p, double h_ref, double tumor_scale) {
    double v = 0.0;
    auto paint = [&](double sd, double value) {
        const double occ = std::clamp(0.5 - sd / h_ref, 0.0, 1.0);
        v += occ * (value - v);
    };
    paint(sd_superellipsoid(p, Vec3(0, 6, 24), Vec3(62, 72, 60), 2.4), a.soft);
    paint(sd_cylinder(p, 0, -6, 40, 42, -400, 20), a.soft);

    const double skull_outer = sd_ellipsoid(p, Vec3(0, 2, 38), Vec3(55, 65, 47));
    const double t = a.skull_thickness;
    paint(std::max(std::abs(skull_outer + 0.5 * t) - 0.5 * t, 12.0 - p[2]), a.bone);

    for (int i = 0; i < 8; ++i) {
        const double z = -92.0 + 13.0 * i;
        paint(sd_cylinder(p, 0, -30, 11, 10, z - 4.5, z + 4.5), a.bone);
    }

    const double mw = a.mandible_width;
    for (double s : {-1.0, 1.0}) {
        const Vec3 condyle(s * 44 * mw, -6, 14), angle(s * 42 * mw, 4, -14), chin(0, 50, -14);
        paint(std::min(sd_capsule(p, condyle, angle, 6), sd_capsule(p, angle, chin, 6)), a.bone);
    }
    static const double upper[][2] = {{16, 40}, {9, 47}, {3, 50}};
    static const double lower[][2] = {{15, 38}, {8, 44}, {3, 47}};
    for (double s : {-1.0, 1.0})
        for (int i = 0; i < 3; ++i) {
            paint((p - Vec3(s * upper[i][0] * mw, upper[i][1], 10)).norm() - 3.5, a.bone);
            paint((p - Vec3(s * lower[i][0] * mw, lower[i][1], -6)).norm() - 3.5, a.bone);
        }

    const double lz = a.larynx_shift;
    const double larynx_sd = sd_cylinder(p, 0, 14, 13, 13, -60 + lz, -34 + lz);
    paint(larynx_sd, a.cartilage);
    paint(sd_cylinder(p, 0, 14, 7, 7, -400, 0), 0.0);

    const double ms = a.mouth_scale;
    const double mouth_sd = sd_ellipsoid(p, Vec3(0, 34, 2), Vec3(22 * ms, 20 * ms, 6 * ms));
    paint(mouth_sd, 0.0);

    if (a.has_tumor) paint((p - a.tumor_center).norm() - a.tumor_radius * tumor_scale, a.tumor_intensity);

    return {std::clamp(v, 0.0, 1.0), mouth_sd < 0.0, larynx_sd < 0.0};
}

// Rotation about x through `hinge`, angle weighted by a smooth mask of the
// lower face.
Vec3 jaw_pullback(const Layout& L, double jaw_deg, const Vec3& x) {
    if (jaw_deg == 0.0) return x;
    const Vec3 h = L.hinge();
    const double s = L.k;
    const double w = sigmoid((L.mouth_z() - x[2]) / (9.0 * s)) * sigmoid((x[1] - h[1]) / (6.0 * s)) *
                     sigmoid((x[2] - L.jaw_floor()) / (5.0 * s));
    const double b = jaw_deg * kDeg * w;
    const double dy = x[1] - h[1], dz = x[2] - h[2];
    const double c = std::cos(b), sn = std::sin(b);
    return Vec3(x[0], h[1] + c * dy - sn * dz, h[2] + sn * dy + c * dz);
}

// Rotation about the neck axis, growing from the neck base to the head.
Vec3 twist_pullback(const Layout& L, double twist_deg, const Vec3& x) {
    if (twist_deg == 0.0) return x;
    const Vec3 ax = L.neck_axis();
    const double t = smoothstep((x[2] - L.neck_bottom()) / (L.neck_top() - L.neck_bottom()));
    const double b = twist_deg * kDeg * t;
    const double dx = x[0] - ax[0], dy = x[1] - ax[1];
    const double c = std::cos(b), sn = std::sin(b);
    return Vec3(ax[0] + c * dx - sn * dy, ax[1] + sn * dx + c * dy, x[2]);
}

// Radial soft-tissue compression outside an inner core around the neck axis.
Vec3 compression_pullback(const Layout& L, double factor, const Vec3& x) {
    if (factor == 1.0) return x;
    const Vec3 ax = L.neck_axis();
    const double dx = x[0] - ax[0], dy = x[1] - ax[1];
    const double r = std::hypot(dx, dy);
    if (r == 0.0) return x;
    const double rho = r + (1.0 / factor - 1.0) * softplus(r - 28.0 * L.k, 4.0 * L.k);
    return Vec3(ax[0] + dx * rho / r, ax[1] + dy * rho / r, x[2]);
}

Mat3 axis_angle(const Vec3& rot_deg) {
    const double angle = rot_deg.norm() * kDeg;
    if (angle == 0.0) return Mat3::Identity();
    return Eigen::AngleAxisd(angle, rot_deg.normalized()).toRotationMatrix();
}

Layout layout_for(const Grid3& grid, const PhantomAnatomy& a) {
    return {a, grid.extent().minCoeff() / kReferenceBox, grid.center()};
}

Sample evaluate_world(const Grid3& grid, const PhantomAnatomy& a, const Vec3& x, double tumor_scale) {
    const Layout L = layout_for(grid, a);
    const Vec3 posed = jaw_pullback(L, a.pose_jaw_deg, twist_pullback(L, a.pose_twist_deg, x));
    const double h_ref = grid.min_spacing() / L.k;
    return evaluate_reference(a, L.to_ref(posed), h_ref, tumor_scale);
}

template <class F>
void rasterize(const Grid3& grid, Volume& vol, std::map<std::string, Volume>& masks, F&& point_map,
               const PhantomAnatomy& a, double tumor_scale) {
    vol = Volume(grid);
    masks.clear();
    Volume mouth(grid), larynx(grid);
    const auto& d = grid.dims;
#pragma omp parallel for schedule(static)
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const std::size_t n = grid.index(i, j, k);
                const Sample s = evaluate_world(grid, a, point_map(grid.voxel_center(i, j, k)), tumor_scale);
                vol[n] = s.value;
                mouth[n] = s.mouth ? 1.0 : 0.0;
                larynx[n] = s.larynx ? 1.0 : 0.0;
            }
    masks["mouth"] = std::move(mouth);
    masks["larynx"] = std::move(larynx);
}

PhantomAnatomy draw_anatomy(Rng& rng, const PhantomParams& p, double shrink) {
    PhantomAnatomy a;
    for (int i = 0; i < 3; ++i) a.scale[i] = shrink * (1.0 + p.size_jitter * rng.uniform(-1.0, 1.0));
    for (int i = 0; i < 3; ++i) a.offset[i] = p.position_jitter_mm * rng.uniform(-1.0, 1.0);
    a.soft = p.soft_tissue + p.intensity_jitter * rng.uniform(-1.0, 1.0);
    a.bone = p.bone + p.intensity_jitter * rng.uniform(-1.0, 1.0);
    a.cartilage = p.cartilage + p.intensity_jitter * rng.uniform(-1.0, 1.0);
    a.skull_thickness = rng.uniform(4.0, 6.0);
    a.mouth_scale = rng.uniform(0.85, 1.15);
    a.mandible_width = rng.uniform(0.92, 1.08);
    a.larynx_shift = rng.uniform(-5.0, 5.0);
    a.has_tumor = rng.uniform() < p.tumor_probability;
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    a.tumor_center = Vec3(side * rng.uniform(17.0, 23.0), rng.uniform(4.0, 10.0), rng.uniform(-26.0, -14.0));
    a.tumor_radius = rng.uniform(7.0, 10.0);
    a.tumor_intensity = a.soft + p.tumor_contrast;
    if (p.random_pose) {
        a.pose_twist_deg = p.max_pose_twist_deg * rng.uniform(-1.0, 1.0);
        a.pose_jaw_deg = p.max_pose_jaw_deg * rng.uniform();
    }
    return a;
}

// Head bounding box plus a one-voxel margin must lie inside the grid.
bool head_fits(const Grid3& grid, const PhantomAnatomy& a) {
    const Layout L = layout_for(grid, a);
    const Vec3 lo = L.to_world(L.head_center() - L.head_axes());
    const Vec3 hi = L.to_world(L.head_center() + L.head_axes());
    const Vec3 glo = grid.voxel_center(0, 0, 0);
    const Vec3 ghi = grid.voxel_center(grid.dims[0] - 1, grid.dims[1] - 1, grid.dims[2] - 1);
    const double m = grid.min_spacing();
    for (int i = 0; i < 3; ++i) {
        if (i == 2) {
            if (hi[i] > ghi[i] - m) return false;  // the neck continues below the grid
        } else if (lo[i] < glo[i] + m || hi[i] > ghi[i] - m) {
            return false;
        }
    }
    return true;
}

void check_range(bool ok, const std::string& what) {
    if (!ok) throw UsageError(what);
}

double psnr_of(const Volume& a, const Volume& b) {
    double se = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) se += (a[n] - b[n]) * (a[n] - b[n]);
    const double mse = se / static_cast<double>(a.size());
    return mse == 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double dice_of(const Volume& a, const Volume& b) {
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        inter += a[n] * b[n];
        sa += a[n];
        sb += b[n];
    }
    return sa + sb == 0.0 ? 1.0 : 2.0 * inter / (sa + sb);
}

}  // namespace

void PhantomParams::validate() const {
    for (double v : {soft_tissue, bone, cartilage, soft_tissue + tumor_contrast})
        check_range(v >= 0.0 && v <= 1.0, "phantom intensities must lie in [0, 1]");
    check_range(intensity_jitter >= 0.0 && intensity_jitter < 0.1, "intensity_jitter must be in [0, 0.1)");
    check_range(size_jitter >= 0.0 && size_jitter < 0.2, "size_jitter must be in [0, 0.2)");
    check_range(position_jitter_mm >= 0.0 && position_jitter_mm <= 10.0, "position_jitter_mm must be in [0, 10]");
    check_range(tumor_probability >= 0.0 && tumor_probability <= 1.0, "tumor_probability must be in [0, 1]");
    check_range(std::abs(max_pose_twist_deg) <= 8.0, "pose twist must be within 8 degrees");
    check_range(max_pose_jaw_deg >= 0.0 && max_pose_jaw_deg <= 15.0, "pose jaw opening must be in [0, 15] degrees");
}

Phantom generate_phantom(const Grid3& grid, std::uint64_t seed, const PhantomParams& params) {
    grid.validate();
    params.validate();
    Rng rng(seed);
    double shrink = 1.0;
    for (int attempt = 0; attempt <= 10; ++attempt) {
        PhantomAnatomy a = draw_anatomy(rng, params, shrink);
        if (!head_fits(grid, a)) {
            shrink *= 0.95;
            continue;
        }
        Phantom ph;
        ph.grid = grid;
        ph.seed = seed;
        ph.anatomy = a;
        rasterize(grid, ph.volume, ph.masks, [](const Vec3& x) { return x; }, a, 1.0);
        return ph;
    }
    throw UsageError(fmt::format("phantom with seed {} does not fit in the grid after 10 retries", seed));
}

void LongitudinalChange::validate() const {
    check_range(std::abs(twist_deg) <= 8.0, "twist must be within 8 degrees");
    check_range(jaw_deg >= 0.0 && jaw_deg <= 15.0, "jaw rotation must be in [0, 15] degrees");
    check_range(compression >= 0.85 && compression <= 1.0, "compression must be in [0.85, 1]");
    check_range(tumor_scale >= 0.5 && tumor_scale <= 1.5, "tumor scale must be in [0.5, 1.5]");
    check_range(rigid_rotation_deg.norm() <= 5.0 + 1e-12, "rigid rotation must be at most 5 degrees");
    check_range(rigid_translation_mm.norm() <= 5.0 + 1e-12, "rigid translation must be at most 5 mm");
}

bool LongitudinalChange::is_identity() const {
    return twist_deg == 0.0 && jaw_deg == 0.0 && compression == 1.0 && tumor_scale == 1.0 &&
           rigid_rotation_deg.isZero(0.0) && rigid_translation_mm.isZero(0.0);
}

LongitudinalChange sample_change(Rng& rng) {
    LongitudinalChange c;
    c.twist_deg = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(3.0, 8.0);
    c.jaw_deg = rng.uniform(5.0, 15.0);
    c.compression = rng.uniform(0.85, 0.97);
    c.tumor_scale = rng.uniform(0.5, 1.5);
    auto ball = [&](double radius) -> Vec3 {
        const Vec3 d(rng.normal(), rng.normal(), rng.normal());
        return d.normalized() * radius * std::cbrt(rng.uniform());
    };
    c.rigid_rotation_deg = ball(3.0);
    c.rigid_translation_mm = ball(3.0);
    return c;
}

Vec3 change_pullback(const Phantom& phantom, const LongitudinalChange& change, const Vec3& x) {
    const Grid3& grid = phantom.grid;
    const Layout L = layout_for(grid, phantom.anatomy);
    const Vec3 c = grid.center();
    Vec3 p = axis_angle(change.rigid_rotation_deg) * (x - c) + c + change.rigid_translation_mm;
    p = twist_pullback(L, change.twist_deg, p);
    p = jaw_pullback(L, change.jaw_deg, p);
    return compression_pullback(L, change.compression, p);
}

ChangedPhantom apply_longitudinal_change(const Phantom& phantom, const LongitudinalChange& change) {
    change.validate();
    const Grid3& grid = phantom.grid;
    ChangedPhantom out;
    out.gt_deformation = DeformationField(grid);
    const auto& d = grid.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const Vec3 x = grid.voxel_center(i, j, k);
                out.gt_deformation.set(grid.index(i, j, k), change_pullback(phantom, change, x) - x);
            }
    const double jmin = min_jacobian_det(out.gt_deformation);
    if (!(jmin > 0.0)) throw UsageError(fmt::format("rejected change: deformation folds (min det {:.3g})", jmin));
    rasterize(
        grid, out.volume, out.masks, [&](const Vec3& x) { return change_pullback(phantom, change, x); },
        phantom.anatomy, change.tumor_scale);
    return out;
}

std::vector<ProjectionGeometry> standard_views(const Grid3& grid) {
    auto [ap, lat] = default_biplanar(grid, 0.5 * grid.min_spacing());
    return {ap, lat};
}

Case make_case(const Phantom& phantom, const LongitudinalChange& change,
               const std::vector<ProjectionGeometry>& geoms) {
    if (geoms.empty()) throw UsageError("make_case needs at least one view");
    ChangedPhantom changed = apply_longitudinal_change(phantom, change);
    Case c;
    c.grid = phantom.grid;
    c.seed = phantom.seed;
    c.change = change;
    c.v_minus = phantom.volume;
    c.v_gt = std::move(changed.volume);
    c.masks_pre = phantom.masks;
    c.masks_gt = std::move(changed.masks);
    c.gt_deformation = std::move(changed.gt_deformation);
    c.geoms = geoms;
    for (const auto& g : geoms) c.projections.push_back(project(c.v_gt, g));
    if (!change.is_identity()) {
        const double p = psnr_of(c.v_minus, c.v_gt);
        if (p >= 35.0) throw DataIntegrityError(fmt::format("trivial case: PSNR(v_minus, v_gt) = {:.2f} dB", p));
        if (change.jaw_deg > 0.0 || change.twist_deg != 0.0) {
            for (const auto& name : kStructureNames) {
                const double dsc = dice_of(c.masks_pre.at(name), c.masks_gt.at(name));
                if (dsc >= 0.98)
                    throw DataIntegrityError(fmt::format("trivial case: {} Dice {:.3f} after motion", name, dsc));
            }
        }
    }
    return c;
}

Case cohort_case(const Grid3& grid, std::uint64_t seed, int index, const PhantomParams& params) {
    Rng rng = Rng::derived(seed, static_cast<std::uint64_t>(index));
    const std::uint64_t phantom_seed = rng.next_u64();
    const LongitudinalChange change = sample_change(rng);
    Case c = make_case(generate_phantom(grid, phantom_seed, params), change, standard_views(grid));
    c.name = fmt::format("case_{:03d}", index);
    return c;
}

nlohmann::json anatomy_to_json(const PhantomAnatomy& a) {
    return {{"scale", vec3_to_json(a.scale)},
            {"offset_mm", vec3_to_json(a.offset)},
            {"soft", a.soft},
            {"bone", a.bone},
            {"cartilage", a.cartilage},
            {"skull_thickness", a.skull_thickness},
            {"mouth_scale", a.mouth_scale},
            {"mandible_width", a.mandible_width},
            {"larynx_shift", a.larynx_shift},
            {"has_tumor", a.has_tumor},
            {"tumor_center", vec3_to_json(a.tumor_center)},
            {"tumor_radius", a.tumor_radius},
            {"tumor_intensity", a.tumor_intensity},
            {"pose_twist_deg", a.pose_twist_deg},
            {"pose_jaw_deg", a.pose_jaw_deg}};
}

PhantomAnatomy anatomy_from_json(const nlohmann::json& j) {
    try {
        PhantomAnatomy a;
        a.scale = vec3_from_json(j.at("scale"));
        a.offset = vec3_from_json(j.at("offset_mm"));
        a.soft = j.at("soft").get<double>();
        a.bone = j.at("bone").get<double>();
        a.cartilage = j.at("cartilage").get<double>();
        a.skull_thickness = j.at("skull_thickness").get<double>();
        a.mouth_scale = j.at("mouth_scale").get<double>();
        a.mandible_width = j.at("mandible_width").get<double>();
        a.larynx_shift = j.at("larynx_shift").get<double>();
        a.has_tumor = j.at("has_tumor").get<bool>();
        a.tumor_center = vec3_from_json(j.at("tumor_center"));
        a.tumor_radius = j.at("tumor_radius").get<double>();
        a.tumor_intensity = j.at("tumor_intensity").get<double>();
        a.pose_twist_deg = j.at("pose_twist_deg").get<double>();
        a.pose_jaw_deg = j.at("pose_jaw_deg").get<double>();
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("anatomy", e.what());
    }
}

nlohmann::json change_to_json(const LongitudinalChange& c) {
    return {{"twist_deg", c.twist_deg},
            {"jaw_deg", c.jaw_deg},
            {"compression", c.compression},
            {"tumor_scale", c.tumor_scale},
            {"rigid_rotation_deg", vec3_to_json(c.rigid_rotation_deg)},
            {"rigid_translation_mm", vec3_to_json(c.rigid_translation_mm)}};
}

LongitudinalChange change_from_json(const nlohmann::json& j) {
    try {
        LongitudinalChange c;
        c.twist_deg = j.at("twist_deg").get<double>();
        c.jaw_deg = j.at("jaw_deg").get<double>();
        c.compression = j.at("compression").get<double>();
        c.tumor_scale = j.at("tumor_scale").get<double>();
        c.rigid_rotation_deg = vec3_from_json(j.at("rigid_rotation_deg"));
        c.rigid_translation_mm = vec3_from_json(j.at("rigid_translation_mm"));
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("change", e.what());
    }
}

nlohmann::json params_to_json(const PhantomParams& p) {
    return {{"soft_tissue", p.soft_tissue},
            {"bone", p.bone},
            {"cartilage", p.cartilage},
            {"tumor_contrast", p.tumor_contrast},
            {"intensity_jitter", p.intensity_jitter},
            {"size_jitter", p.size_jitter},
            {"position_jitter_mm", p.position_jitter_mm},
            {"tumor_probability", p.tumor_probability},
            {"random_pose", p.random_pose},
            {"max_pose_twist_deg", p.max_pose_twist_deg},
            {"max_pose_jaw_deg", p.max_pose_jaw_deg}};
}

void save_case(const std::filesystem::path& dir, const Case& c) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "masks", ec);
    fs::create_directories(dir / "gt_def", ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    write_gvol(dir / "v_minus.gvol", c.v_minus);
    write_gvol(dir / "v_gt.gvol", c.v_gt);
    for (std::size_t i = 0; i < c.projections.size(); ++i) {
        write_gprj(dir / fmt::format("proj_{}.gprj", i), c.projections[i]);
        write_json(dir / fmt::format("geom_{}.json", i), geometry_to_json(c.geoms[i]));
    }
    for (const auto& [name, m] : c.masks_pre) write_gvol(dir / "masks" / ("pre_" + name + ".gvol"), m);
    for (const auto& [name, m] : c.masks_gt) write_gvol(dir / "masks" / ("gt_" + name + ".gvol"), m);
    save_field(dir / "gt_def", "phi", c.gt_deformation, "pull-back");
    write_json(dir / "change.json",
               {{"name", c.name}, {"seed", c.seed}, {"views", c.projections.size()}, {"change", change_to_json(c.change)}});
}

Case load_case(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw UsageError("case directory not found: " + dir.string());
    Case c;
    const nlohmann::json meta = read_json(dir / "change.json");
    int views = 0;
    try {
        c.name = meta.at("name").get<std::string>();
        c.seed = meta.at("seed").get<std::uint64_t>();
        views = meta.at("views").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("change.json", e.what());
    }
    c.change = change_from_json(meta.at("change"));
    c.v_minus = read_gvol(dir / "v_minus.gvol");
    c.v_gt = read_gvol(dir / "v_gt.gvol");
    c.grid = c.v_minus.grid();
    if (!(c.v_gt.grid() == c.grid)) throw DataIntegrityError("v_gt and v_minus grids differ in " + dir.string());
    for (int i = 0; i < views; ++i) {
        c.projections.push_back(read_gprj(dir / fmt::format("proj_{}.gprj", i)));
        c.geoms.push_back(geometry_from_json(read_json(dir / fmt::format("geom_{}.json", i))));
    }
    for (const auto& name : kStructureNames) {
        c.masks_pre[name] = read_gvol(dir / "masks" / ("pre_" + name + ".gvol"));
        c.masks_gt[name] = read_gvol(dir / "masks" / ("gt_" + name + ".gvol"));
    }
    c.gt_deformation = DeformationField(load_field(dir / "gt_def", "phi"));
    return c;
}

nlohmann::json generate_cohort(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                               const Grid3& grid, const PhantomParams& params) {
    if (n < 1) throw UsageError("n must be >= 1");
    grid.validate();
    params.validate();
    nlohmann::json cases = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        const Case c = cohort_case(grid, seed, i, params);
        save_case(out_dir / c.name, c);
        const Phantom ph = generate_phantom(grid, c.seed, params);
        cases.push_back({{"name", c.name},
                         {"dir", c.name},
                         {"phantom_seed", c.seed},
                         {"anatomy", anatomy_to_json(ph.anatomy)},
                         {"change", change_to_json(c.change)}});
    }
    nlohmann::json manifest = {{"format", "guidedrec-cohort"},
                               {"version", 1},
                               {"n", n},
                               {"seed", seed},
                               {"grid", grid_to_json(grid)},
                               {"params", params_to_json(params)},
                               {"cases", cases}};
    write_json(out_dir / "manifest.json", manifest);
    return manifest;
}

std::vector<std::filesystem::path> cohort_case_dirs(const std::filesystem::path& cohort_dir) {
    const nlohmann::json m = read_json(cohort_dir / "manifest.json");
    std::vector<std::filesystem::path> dirs;
    try {
        for (const auto& c : m.at("cases")) dirs.push_back(cohort_dir / c.at("dir").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("cases", e.what());
    }
    return dirs;
}

}  // namespace guidedrec
