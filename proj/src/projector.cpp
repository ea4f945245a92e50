#include "guidedrec/projector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Geometry>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "binary_io.hpp"
#include "guidedrec/errors.hpp"
#include "guidedrec/interp.hpp"

namespace guidedrec {

namespace {

// A ray in voxel coordinates: p(t) = origin + t * dir, t in mm of arclength.
struct VoxelRay {
    Vec3 origin;
    Vec3 dir;
    double t0 = 0.0;
    int samples = 0;
};

VoxelRay make_ray(const ProjectionGeometry& geom, const Grid3& grid, int iu, int iv) {
    const Vec3 pixel = geom.pixel_center(iu, iv);
    const Vec3 world_dir = geom.ray_direction(pixel);
    const Vec3 world_origin = geom.kind == BeamKind::parallel ? pixel : geom.source;
    VoxelRay ray;
    ray.origin = grid.world_to_voxel(world_origin);
    ray.dir = world_dir.cwiseQuotient(grid.spacing);

    // Support of the zero-padded interpolant is the open box (-1, n).
    double t_lo = geom.kind == BeamKind::cone ? 0.0 : -std::numeric_limits<double>::infinity();
    double t_hi = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double lo = -1.0, hi = grid.dims[a];
        if (std::abs(ray.dir[a]) < 1e-15) {
            if (ray.origin[a] <= lo || ray.origin[a] >= hi) return ray;
            continue;
        }
        double ta = (lo - ray.origin[a]) / ray.dir[a];
        double tb = (hi - ray.origin[a]) / ray.dir[a];
        if (ta > tb) std::swap(ta, tb);
        t_lo = std::max(t_lo, ta);
        t_hi = std::min(t_hi, tb);
    }
    if (!(t_hi > t_lo)) return ray;
    ray.t0 = t_lo;
    ray.samples = static_cast<int>(std::ceil((t_hi - t_lo) / geom.step));
    return ray;
}

void check_geometry_pairing(std::size_t n_proj, std::size_t n_geom) {
    if (n_proj != n_geom) throw UsageError("projections and geometries must be paired");
}

}  // namespace

void ProjectionGeometry::validate() const {
    if (nu < 1 || nv < 1) throw UsageError("detector must have at least one pixel per axis");
    if (!(du > 0.0) || !(dv > 0.0)) throw UsageError("pixel pitch must be positive");
    if (!(step > 0.0)) throw UsageError("ray step must be positive");
    if (std::abs(detector_u.norm() - 1.0) > 1e-9 || std::abs(detector_v.norm() - 1.0) > 1e-9)
        throw UsageError("detector axes must be unit vectors");
    if (std::abs(detector_u.dot(detector_v)) >= 1e-6)
        throw UsageError("detector axes must be orthogonal");
    if (kind == BeamKind::parallel && std::abs(direction.norm() - 1.0) > 1e-9)
        throw UsageError("parallel-beam direction must be a unit vector");
}

bool ProjectionGeometry::detector_coordinate(const Vec3& p, double& iu, double& iv) const {
    const Vec3 normal = detector_u.cross(detector_v);
    Vec3 hit;
    if (kind == BeamKind::parallel) {
        const double denom = direction.dot(normal);
        if (std::abs(denom) < 1e-12) return false;
        const double s = (detector_origin - p).dot(normal) / denom;
        hit = p + s * direction;
    } else {
        const Vec3 d = p - source;
        const double denom = d.dot(normal);
        if (std::abs(denom) < 1e-12) return false;
        const double s = (detector_origin - source).dot(normal) / denom;
        if (!(s > 0.0)) return false;
        hit = source + s * d;
    }
    const Vec3 rel = hit - detector_origin;
    iu = rel.dot(detector_u) / du;
    iv = rel.dot(detector_v) / dv;
    return std::isfinite(iu) && std::isfinite(iv);
}

Projection project(const Volume& v, const ProjectionGeometry& geom) {
    geom.validate();
    Projection out(geom);
    const Grid3& grid = v.grid();
    const double* data = v.data().data();
    const double step = geom.step;
#pragma omp parallel for schedule(static)
    for (int iv = 0; iv < geom.nv; ++iv) {
        for (int iu = 0; iu < geom.nu; ++iu) {
            const VoxelRay ray = make_ray(geom, grid, iu, iv);
            double acc = 0.0;
            for (int k = 0; k < ray.samples; ++k) {
                const double t = ray.t0 + (k + 0.5) * step;
                acc += interp::sample(data, grid.dims, ray.origin[0] + t * ray.dir[0],
                                      ray.origin[1] + t * ray.dir[1], ray.origin[2] + t * ray.dir[2]);
            }
            out.at(iu, iv) = step * acc;
        }
    }
    return out;
}

namespace {

void adjoint_rows(const Projection& residual, const ProjectionGeometry& geom, const Grid3& grid,
                  int row_begin, int row_end, double* out) {
    const double step = geom.step;
    for (int iv = row_begin; iv < row_end; ++iv) {
        for (int iu = 0; iu < geom.nu; ++iu) {
            const double r = residual.at(iu, iv);
            if (r == 0.0) continue;
            const VoxelRay ray = make_ray(geom, grid, iu, iv);
            const double w = step * r;
            for (int k = 0; k < ray.samples; ++k) {
                const double t = ray.t0 + (k + 0.5) * step;
                interp::scatter(out, grid.dims, ray.origin[0] + t * ray.dir[0],
                                ray.origin[1] + t * ray.dir[1], ray.origin[2] + t * ray.dir[2], w);
            }
        }
    }
}

}  // namespace

Volume project_adjoint(const Projection& residual, const ProjectionGeometry& geom,
                       const Grid3& target) {
    geom.validate();
    if (!residual.matches(geom)) throw UsageError("project_adjoint: residual does not match detector");
    Volume out(target);
    int threads = 1;
#ifdef _OPENMP
    threads = std::min(omp_get_max_threads(), geom.nv);
#endif
    if (threads <= 1) {
        adjoint_rows(residual, geom, target, 0, geom.nv, out.data().data());
        return out;
    }
    // Fixed row partition per thread, summed in partition order, so the
    // result depends only on the thread count.
    std::vector<std::vector<double>> partial(threads, std::vector<double>(target.size(), 0.0));
#pragma omp parallel for schedule(static, 1) num_threads(threads)
    for (int t = 0; t < threads; ++t) {
        const int begin = static_cast<int>(static_cast<long>(geom.nv) * t / threads);
        const int end = static_cast<int>(static_cast<long>(geom.nv) * (t + 1) / threads);
        adjoint_rows(residual, geom, target, begin, end, partial[t].data());
    }
    auto data = out.data();
    for (int t = 0; t < threads; ++t)
        for (std::size_t n = 0; n < data.size(); ++n) data[n] += partial[t][n];
    return out;
}

Volume backproject_average(std::span<const Projection> projections,
                           std::span<const ProjectionGeometry> geoms, const Grid3& grid) {
    if (projections.empty()) throw UsageError("backproject_average: no projections given");
    check_geometry_pairing(projections.size(), geoms.size());
    for (std::size_t i = 0; i < geoms.size(); ++i) {
        geoms[i].validate();
        if (!projections[i].matches(geoms[i]))
            throw UsageError("backproject_average: projection " + std::to_string(i) +
                             " does not match its geometry");
    }
    Volume out(grid);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                const Vec3 p = grid.voxel_center(i, j, k);
                double sum = 0.0;
                int views = 0;
                for (std::size_t n = 0; n < geoms.size(); ++n) {
                    double u, v;
                    if (!geoms[n].detector_coordinate(p, u, v)) continue;
                    const Projection& proj = projections[n];
                    if (u < 0.0 || v < 0.0 || u > proj.nu - 1 || v > proj.nv - 1) continue;
                    const int u0 = std::min(static_cast<int>(u), std::max(proj.nu - 2, 0));
                    const int v0 = std::min(static_cast<int>(v), std::max(proj.nv - 2, 0));
                    const int u1 = std::min(u0 + 1, proj.nu - 1);
                    const int v1 = std::min(v0 + 1, proj.nv - 1);
                    const double fu = u - u0, fv = v - v0;
                    sum += (1 - fu) * (1 - fv) * proj.at(u0, v0) + fu * (1 - fv) * proj.at(u1, v0) +
                           (1 - fu) * fv * proj.at(u0, v1) + fu * fv * proj.at(u1, v1);
                    ++views;
                }
                out.at(i, j, k) = views > 0 ? sum / views : 0.0;
            }
    return out;
}

std::pair<ProjectionGeometry, ProjectionGeometry> default_biplanar(const Grid3& grid,
                                                                   double pixel_pitch) {
    grid.validate();
    const double pitch = pixel_pitch > 0.0 ? pixel_pitch : grid.min_spacing();
    const Vec3 c = grid.center();
    const Vec3 ext = grid.extent();

    auto make = [&](const Vec3& dir, const Vec3& u_axis, const Vec3& v_axis, double u_len,
                    double v_len, double depth) {
        ProjectionGeometry g;
        g.kind = BeamKind::parallel;
        g.direction = dir;
        g.detector_u = u_axis;
        g.detector_v = v_axis;
        g.nu = static_cast<int>(std::ceil(u_len / pitch - 1e-9));
        g.nv = static_cast<int>(std::ceil(v_len / pitch - 1e-9));
        g.du = g.dv = pitch;
        g.step = 0.5 * grid.min_spacing();
        g.detector_origin = c + (0.5 * depth + pitch) * dir - (0.5 * (g.nu - 1) * pitch) * u_axis -
                            (0.5 * (g.nv - 1) * pitch) * v_axis;
        return g;
    };
    // Anterior-posterior: rays along +y, detector spans x and z.
    ProjectionGeometry ap = make(Vec3::UnitY(), Vec3::UnitX(), Vec3::UnitZ(), ext[0], ext[2], ext[1]);
    // Lateral: rays along +x, detector spans y and z.
    ProjectionGeometry lat = make(Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ(), ext[1], ext[2], ext[0]);
    return {ap, lat};
}

double dot(const Projection& a, const Projection& b) {
    if (a.size() != b.size()) throw UsageError("dot: projection size mismatch");
    double acc = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) acc += a.data[n] * b.data[n];
    return acc;
}

std::vector<std::uint8_t> encode_gprj(const Projection& p) {
    binio::Writer w;
    w.reserve(4 + 12 + 16 + 4 * p.size());
    w.magic("GPRJ");
    w.u32(kGprjVersion);
    w.u32(static_cast<std::uint32_t>(p.nu));
    w.u32(static_cast<std::uint32_t>(p.nv));
    w.f64(p.du);
    w.f64(p.dv);
    for (double x : p.data) w.f32(static_cast<float>(x));
    return w.take();
}

Projection decode_gprj(std::span<const std::uint8_t> bytes) {
    binio::Reader r(bytes);
    r.expect_magic("GPRJ", "GPRJ");
    const std::uint32_t version = r.u32("version");
    if (version != kGprjVersion)
        throw ParseError("version", "GPRJ: unsupported version " + std::to_string(version));
    Projection p;
    const std::uint32_t nu = r.u32("nu");
    const std::uint32_t nv = r.u32("nv");
    if (nu == 0 || nu > (1u << 16)) throw ParseError("nu", "GPRJ: invalid nu");
    if (nv == 0 || nv > (1u << 16)) throw ParseError("nv", "GPRJ: invalid nv");
    p.nu = static_cast<int>(nu);
    p.nv = static_cast<int>(nv);
    p.du = r.f64("du");
    p.dv = r.f64("dv");
    const std::size_t n = static_cast<std::size_t>(nu) * nv;
    r.need(4 * n, "payload");
    p.data.resize(n);
    for (auto& x : p.data) x = r.f32("payload");
    if (r.remaining() != 0) throw ParseError("payload", "GPRJ: trailing bytes after payload");
    return p;
}

void write_gprj(const std::filesystem::path& path, const Projection& p) {
    binio::write_file(path, encode_gprj(p));
}

Projection read_gprj(const std::filesystem::path& path) { return decode_gprj(binio::read_file(path)); }

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }

Vec3 json_vec(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
        throw ParseError(key, std::string("geometry: '") + key + "' must be a 3-vector");
    return Vec3(j.at(key)[0].get<double>(), j.at(key)[1].get<double>(), j.at(key)[2].get<double>());
}

}  // namespace

nlohmann::json geometry_to_json(const ProjectionGeometry& g) {
    nlohmann::json j;
    j["kind"] = g.kind == BeamKind::cone ? "cone" : "parallel";
    if (g.kind == BeamKind::cone)
        j["source"] = vec_json(g.source);
    else
        j["direction"] = vec_json(g.direction);
    j["detector_origin"] = vec_json(g.detector_origin);
    j["detector_u"] = vec_json(g.detector_u);
    j["detector_v"] = vec_json(g.detector_v);
    j["nu"] = g.nu;
    j["nv"] = g.nv;
    j["du"] = g.du;
    j["dv"] = g.dv;
    j["step"] = g.step;
    return j;
}

ProjectionGeometry geometry_from_json(const nlohmann::json& j) {
    ProjectionGeometry g;
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "cone") {
            g.kind = BeamKind::cone;
            g.source = json_vec(j, "source");
        } else if (kind == "parallel") {
            g.kind = BeamKind::parallel;
            g.direction = json_vec(j, "direction");
        } else {
            throw ParseError("kind", "geometry: unknown kind '" + kind + "'");
        }
        g.detector_origin = json_vec(j, "detector_origin");
        g.detector_u = json_vec(j, "detector_u");
        g.detector_v = json_vec(j, "detector_v");
        g.nu = j.at("nu").get<int>();
        g.nv = j.at("nv").get<int>();
        g.du = j.at("du").get<double>();
        g.dv = j.at("dv").get<double>();
        g.step = j.at("step").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("geometry", std::string("geometry: ") + e.what());
    }
    g.validate();
    return g;
}

}  // namespace guidedrec
