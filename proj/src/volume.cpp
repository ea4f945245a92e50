#include "guidedrec/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "binary_io.hpp"
#include "guidedrec/errors.hpp"
#include "guidedrec/interp.hpp"

namespace guidedrec {

namespace binio {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace binio

void Grid3::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw UsageError("grid dims must be positive");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            throw UsageError("grid spacing must be finite and positive");
        if (!std::isfinite(origin[a])) throw UsageError("grid origin must be finite");
    }
}

Vec3 Grid3::center() const {
    return voxel_to_world(Vec3(dims[0] - 1, dims[1] - 1, dims[2] - 1) * 0.5);
}

Vec3 Grid3::extent() const {
    return Vec3(dims[0], dims[1], dims[2]).cwiseProduct(spacing);
}

Grid3 Grid3::with_dims(const Dims3& new_dims) const {
    Grid3 g;
    g.dims = new_dims;
    const Vec3 lo = origin - 0.5 * spacing;
    const Vec3 ext = extent();
    for (int a = 0; a < 3; ++a) g.spacing[a] = ext[a] / new_dims[a];
    g.origin = lo + 0.5 * g.spacing;
    return g;
}

Grid3 Grid3::cube(int n, double spacing_mm) {
    Grid3 g;
    g.dims = {n, n, n};
    g.spacing = Vec3::Constant(spacing_mm);
    g.origin = Vec3::Constant(-0.5 * (n - 1) * spacing_mm);
    return g;
}

bool Grid3::operator==(const Grid3& other) const {
    return dims == other.dims && spacing == other.spacing && origin == other.origin;
}

Volume::Volume(const Grid3& grid, double fill) : grid_(grid) {
    grid_.validate();
    data_.assign(grid_.size(), fill);
}

Volume::Volume(const Grid3& grid, std::vector<double> data) : grid_(grid), data_(std::move(data)) {
    grid_.validate();
    if (data_.size() != grid_.size()) throw UsageError("volume data length does not match grid");
}

Volume normalize_hu(const Volume& raw) {
    Volume out(raw.grid());
    const double range = kHuMax - kHuMin;
    for (std::size_t n = 0; n < raw.size(); ++n) {
        const double x = raw[n];
        if (!std::isfinite(x))
            throw DataIntegrityError("normalize_hu: non-finite value at voxel " + std::to_string(n));
        out[n] = std::clamp((x - kHuMin) / range, 0.0, 1.0);
    }
    return out;
}

double trilinear_sample(const Volume& v, const Vec3& p) {
    return interp::sample(v.data().data(), v.grid().dims, p[0], p[1], p[2]);
}

double trilinear_sample_grad(const Volume& v, const Vec3& p, Vec3& grad) {
    double g[3];
    const double val = interp::sample_grad(v.data().data(), v.grid().dims, p[0], p[1], p[2], g);
    grad = Vec3(g[0], g[1], g[2]);
    return val;
}

Volume resample(const Volume& v, const Grid3& target) {
    if (v.grid() == target) return v;
    Volume out(target);
    const Grid3& src = v.grid();
    const double* data = v.data().data();
    const auto& td = target.dims;
    // Voxel-to-voxel affine map between the two lattices.
    const Vec3 scale = target.spacing.cwiseQuotient(src.spacing);
    const Vec3 offset = (target.origin - src.origin).cwiseQuotient(src.spacing);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < td[2]; ++k)
        for (int j = 0; j < td[1]; ++j)
            for (int i = 0; i < td[0]; ++i) {
                const double px = offset[0] + scale[0] * i;
                const double py = offset[1] + scale[1] * j;
                const double pz = offset[2] + scale[2] * k;
                out[target.index(i, j, k)] = interp::sample(data, src.dims, px, py, pz);
            }
    return out;
}

Volume resample_adjoint(const Volume& on_target, const Grid3& source) {
    const Grid3& target = on_target.grid();
    if (target == source) return on_target;
    Volume out(source);
    double* data = out.data().data();
    const auto& td = target.dims;
    const Vec3 scale = target.spacing.cwiseQuotient(source.spacing);
    const Vec3 offset = (target.origin - source.origin).cwiseQuotient(source.spacing);
    for (int k = 0; k < td[2]; ++k)
        for (int j = 0; j < td[1]; ++j)
            for (int i = 0; i < td[0]; ++i) {
                const double val = on_target[target.index(i, j, k)];
                if (val == 0.0) continue;
                interp::scatter(data, source.dims, offset[0] + scale[0] * i, offset[1] + scale[1] * j,
                                offset[2] + scale[2] * k, val);
            }
    return out;
}

double dot(const Volume& a, const Volume& b) {
    if (!(a.grid() == b.grid())) throw UsageError("dot: grid mismatch");
    double acc = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) acc += a[n] * b[n];
    return acc;
}

std::vector<std::uint8_t> encode_gvol(const Volume& v) {
    binio::Writer w;
    w.reserve(4 + 4 * 4 + 6 * 8 + 4 * v.size());
    const Grid3& g = v.grid();
    w.magic("GVOL");
    w.u32(kGvolVersion);
    for (int a = 0; a < 3; ++a) w.u32(static_cast<std::uint32_t>(g.dims[a]));
    for (int a = 0; a < 3; ++a) w.f64(g.spacing[a]);
    for (int a = 0; a < 3; ++a) w.f64(g.origin[a]);
    for (double x : v.data()) w.f32(static_cast<float>(x));
    return w.take();
}

Volume decode_gvol(std::span<const std::uint8_t> bytes) {
    binio::Reader r(bytes);
    r.expect_magic("GVOL", "GVOL");
    const std::uint32_t version = r.u32("version");
    if (version != kGvolVersion)
        throw ParseError("version", "GVOL: unsupported version " + std::to_string(version));
    Grid3 g;
    static const char* dim_names[3] = {"nx", "ny", "nz"};
    static const char* sp_names[3] = {"sx", "sy", "sz"};
    static const char* or_names[3] = {"ox", "oy", "oz"};
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t n = r.u32(dim_names[a]);
        if (n == 0 || n > (1u << 16))
            throw ParseError(dim_names[a], std::string("GVOL: invalid ") + dim_names[a]);
        g.dims[a] = static_cast<int>(n);
    }
    for (int a = 0; a < 3; ++a) {
        g.spacing[a] = r.f64(sp_names[a]);
        if (!(g.spacing[a] > 0.0) || !std::isfinite(g.spacing[a]))
            throw ParseError(sp_names[a], std::string("GVOL: invalid ") + sp_names[a]);
    }
    for (int a = 0; a < 3; ++a) g.origin[a] = r.f64(or_names[a]);
    r.need(4 * g.size(), "payload");
    std::vector<double> data(g.size());
    for (auto& x : data) x = r.f32("payload");
    if (r.remaining() != 0) throw ParseError("payload", "GVOL: trailing bytes after payload");
    return Volume(g, std::move(data));
}

void write_gvol(const std::filesystem::path& path, const Volume& v) {
    binio::write_file(path, encode_gvol(v));
}

Volume read_gvol(const std::filesystem::path& path) { return decode_gvol(binio::read_file(path)); }

}  // namespace guidedrec
