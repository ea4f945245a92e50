#include "guidedrec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <fmt/format.h>

#include "guidedrec/adam.hpp"
#include "guidedrec/errors.hpp"

namespace guidedrec {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

void same_grid(const Volume& a, const Volume& b, const char* op) {
    if (!(a.grid() == b.grid())) throw UsageError(std::string(op) + ": volumes are on different grids");
}

Mat3 exp_so3(const Vec3& w) {
    const double angle = w.norm();
    if (angle == 0.0) return Mat3::Identity();
    return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

double ssd(const Volume& a, const Volume& b, const RigidTransform& t) {
    const Grid3& g = b.grid();
    const Vec3 c = g.center();
    double acc = 0.0;
    const auto& d = g.dims;
#pragma omp parallel for reduction(+ : acc) schedule(static)
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const Vec3 p = a.grid().world_to_voxel(t.apply(g.voxel_center(i, j, k), c));
                const double r = trilinear_sample(a, p) - b.at(i, j, k);
                acc += r * r;
            }
    return acc;
}

// SSD and its gradient with respect to a left rotation increment and the
// translation.
double ssd_grad(const Volume& a, const Volume& b, const RigidTransform& t, Vec3& d_rot, Vec3& d_trans) {
    const Grid3& g = b.grid();
    const Vec3 c = g.center();
    const Vec3 inv_sp = a.grid().spacing.cwiseInverse();
    double acc = 0.0;
    double gr[3] = {0, 0, 0}, gt[3] = {0, 0, 0};
    const auto& d = g.dims;
#pragma omp parallel for reduction(+ : acc, gr[:3], gt[:3]) schedule(static)
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const Vec3 x = g.voxel_center(i, j, k);
                const Vec3 q = t.rotation * (x - c);
                const Vec3 y = q + c + t.translation;
                Vec3 grad_vox;
                const double val = trilinear_sample_grad(a, a.grid().world_to_voxel(y), grad_vox);
                const double r = val - b.at(i, j, k);
                acc += r * r;
                const Vec3 gw = 2.0 * r * grad_vox.cwiseProduct(inv_sp);
                const Vec3 gq = q.cross(gw);
                for (int m = 0; m < 3; ++m) {
                    gt[m] += gw[m];
                    gr[m] += gq[m];
                }
            }
    d_rot = Vec3(gr[0], gr[1], gr[2]);
    d_trans = Vec3(gt[0], gt[1], gt[2]);
    return acc;
}

struct Moments {
    Vec3 centroid;
    Mat3 axes;
    bool degenerate = false;
};

Moments moments(const Volume& v) {
    const Grid3& g = v.grid();
    double mass = 0.0;
    Vec3 c = Vec3::Zero();
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const double w = std::max(0.0, v.at(i, j, k));
                mass += w;
                c += w * g.voxel_center(i, j, k);
            }
    if (!(mass > 0.0)) throw UsageError("rigid_register: volume has no positive mass");
    c /= mass;
    Mat3 cov = Mat3::Zero();
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                const double w = std::max(0.0, v.at(i, j, k));
                const Vec3 d = g.voxel_center(i, j, k) - c;
                cov += w * d * d.transpose();
            }
    cov /= mass;
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    Moments m;
    m.centroid = c;
    m.axes = es.eigenvectors();
    if (m.axes.determinant() < 0) m.axes.col(2) *= -1.0;
    const Vec3 ev = es.eigenvalues();
    const double scale = std::max(ev.maxCoeff(), 1e-300);
    m.degenerate = (ev[1] - ev[0]) < 1e-3 * scale || (ev[2] - ev[1]) < 1e-3 * scale;
    return m;
}

std::string fmt_opt(const std::optional<double>& x) { return x ? fmt::format("{:.6f}", *x) : "NA"; }

}  // namespace

double psnr(const Volume& a, const Volume& b) {
    same_grid(a, b, "psnr");
    double se = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) se += (a[n] - b[n]) * (a[n] - b[n]);
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim3d(const Volume& a, const Volume& b, int window, double k1, double k2, double range) {
    same_grid(a, b, "ssim3d");
    const auto& d = a.grid().dims;
    if (window < 1 || d[0] < window || d[1] < window || d[2] < window)
        throw UsageError("ssim3d: volume smaller than the window");
    const double c1 = (k1 * range) * (k1 * range), c2 = (k2 * range) * (k2 * range);

    // Summed-volume tables with a zero border, for a, b, a^2, b^2, ab.
    const int sx = d[0] + 1, sy = d[1] + 1, sz = d[2] + 1;
    const std::size_t total = static_cast<std::size_t>(sx) * sy * sz;
    std::vector<double> sa(total, 0.0), sb(total, 0.0), saa(total, 0.0), sbb(total, 0.0), sab(total, 0.0);
    auto id = [&](int i, int j, int k) { return static_cast<std::size_t>(i) + sx * (static_cast<std::size_t>(j) + sy * k); };
    for (int k = 1; k < sz; ++k)
        for (int j = 1; j < sy; ++j)
            for (int i = 1; i < sx; ++i) {
                const double x = a.at(i - 1, j - 1, k - 1), y = b.at(i - 1, j - 1, k - 1);
                auto fill = [&](std::vector<double>& s, double v) {
                    s[id(i, j, k)] = v + s[id(i - 1, j, k)] + s[id(i, j - 1, k)] + s[id(i, j, k - 1)] -
                                     s[id(i - 1, j - 1, k)] - s[id(i - 1, j, k - 1)] - s[id(i, j - 1, k - 1)] +
                                     s[id(i - 1, j - 1, k - 1)];
                };
                fill(sa, x);
                fill(sb, y);
                fill(saa, x * x);
                fill(sbb, y * y);
                fill(sab, x * y);
            }
    auto box = [&](const std::vector<double>& s, int i, int j, int k) {
        const int w = window;
        return s[id(i + w, j + w, k + w)] - s[id(i, j + w, k + w)] - s[id(i + w, j, k + w)] - s[id(i + w, j + w, k)] +
               s[id(i, j, k + w)] + s[id(i, j + w, k)] + s[id(i + w, j, k)] - s[id(i, j, k)];
    };
    const double n = static_cast<double>(window) * window * window;
    double acc = 0.0;
    long count = 0;
    for (int k = 0; k + window <= d[2]; ++k)
        for (int j = 0; j + window <= d[1]; ++j)
            for (int i = 0; i + window <= d[0]; ++i) {
                const double ma = box(sa, i, j, k) / n, mb = box(sb, i, j, k) / n;
                const double va = box(saa, i, j, k) / n - ma * ma;
                const double vb = box(sbb, i, j, k) / n - mb * mb;
                const double cov = box(sab, i, j, k) / n - ma * mb;
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return acc / static_cast<double>(count);
}

double dice(const Volume& a, const Volume& b) {
    same_grid(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        if ((a[n] != 0.0 && a[n] != 1.0) || (b[n] != 0.0 && b[n] != 1.0))
            throw UsageError("dice: masks must be 0/1 valued");
        const bool x = a[n] == 1.0, y = b[n] == 1.0;
        inter += x && y;
        na += x;
        nb += y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

RigidTransform RigidTransform::from_axis_angle(const Vec3& rotation_deg, const Vec3& translation_mm) {
    return {exp_so3(rotation_deg * kDeg), translation_mm};
}

RigidTransform RigidTransform::compose(const RigidTransform& inner) const {
    // R1 (R2 (x - c) + t2) + c + t1, both about the same center.
    return {rotation * inner.rotation, rotation * inner.translation + translation};
}

Volume rigid_resample(const Volume& a, const RigidTransform& t) {
    const Grid3& g = a.grid();
    const Vec3 c = g.center();
    Volume out(g);
    const auto& d = g.dims;
#pragma omp parallel for schedule(static)
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i)
                out.at(i, j, k) = trilinear_sample(a, g.world_to_voxel(t.apply(g.voxel_center(i, j, k), c)));
    return out;
}

RigidRegisterResult rigid_register(const Volume& a, const Volume& b, const RigidRegisterConfig& cfg) {
    same_grid(a, b, "rigid_register");
    const Vec3 c = b.grid().center();
    const Moments ma = moments(a), mb = moments(b);

    RigidRegisterResult result;
    result.degenerate_inertia = ma.degenerate || mb.degenerate;

    // T(cb) = ca with R mapping b's principal axes onto a's.
    std::vector<RigidTransform> candidates;
    candidates.push_back({Mat3::Identity(), ma.centroid - mb.centroid});
    if (!result.degenerate_inertia) {
        for (const Vec3& s : {Vec3(1, 1, 1), Vec3(-1, -1, 1), Vec3(-1, 1, -1), Vec3(1, -1, -1)}) {
            const Mat3 r = ma.axes * s.asDiagonal() * mb.axes.transpose();
            candidates.push_back({r, ma.centroid - c - r * (mb.centroid - c)});
        }
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : candidates) {
        const double e = ssd(a, b, t);
        if (e < best) {
            best = e;
            result.transform = t;
        }
    }

    RigidTransform t = result.transform;
    AdamState adam(6);
    std::vector<double> params(6, 0.0), grads(6);
    const double lr0 = 1.0;
    const std::vector<double> scale = {cfg.lr_rotation_deg * kDeg, cfg.lr_rotation_deg * kDeg,
                                       cfg.lr_rotation_deg * kDeg, cfg.lr_translation_mm,
                                       cfg.lr_translation_mm, cfg.lr_translation_mm};
    RigidTransform best_t = t;
    double best_e = best;
    for (int it = 0; it < cfg.iterations; ++it) {
        Vec3 dr, dt;
        const double e = ssd_grad(a, b, t, dr, dt);
        if (e < best_e) {
            best_e = e;
            best_t = t;
        }
        for (int m = 0; m < 3; ++m) {
            grads[m] = dr[m];
            grads[3 + m] = dt[m];
        }
        std::fill(params.begin(), params.end(), 0.0);
        const double lr = lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iterations)) + 0.02;
        adam_step(adam, params, grads, lr, {}, scale, "rigid");
        const Vec3 dw(params[0], params[1], params[2]);
        t.rotation = exp_so3(dw) * t.rotation;
        t.translation += Vec3(params[3], params[4], params[5]);
    }
    const double e = ssd(a, b, t);
    if (e < best_e) {
        best_e = e;
        best_t = t;
    }
    result.transform = best_t;
    result.final_ssd = best_e;
    return result;
}

RigidError rigid_error(const RigidTransform& est, const RigidTransform& ref) {
    const Mat3 d = est.rotation * ref.rotation.transpose();
    const double cosang = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
    return {std::acos(cosang) / kDeg, (est.translation - ref.translation).norm()};
}

EvalRow evaluate_case(const Case& c, const std::string& method, const Volume& recovered,
                      const DeformationField* deformation) {
    same_grid(recovered, c.v_gt, "evaluate_case");
    EvalRow row;
    row.case_name = c.name;
    row.method = method;
    row.psnr = psnr(recovered, c.v_gt);
    row.ssim = ssim3d(recovered, c.v_gt);
    if (deformation) {
        auto warped_dice = [&](const std::string& name) {
            Volume w = warp(c.masks_pre.at(name), *deformation);
            for (double& x : w.data()) x = x >= 0.5 ? 1.0 : 0.0;
            return dice(w, c.masks_gt.at(name));
        };
        row.dice_mouth = warped_dice("mouth");
        row.dice_larynx = warped_dice("larynx");
    }
    const RigidRegisterResult reg = rigid_register(recovered, c.v_gt);
    const RigidError err = rigid_error(reg.transform, RigidTransform{});
    row.rotation_error_deg = err.rotation_deg;
    row.translation_error_mm = err.translation_mm;
    return row;
}

EvalRow evaluate_case(const Case& c, const ReconResult& result) {
    return evaluate_case(c, variant_name(result.variant), result.recovered,
                         result.deformation ? &*result.deformation : nullptr);
}

Stat summarize(const std::vector<double>& xs) {
    Stat s;
    s.count = static_cast<int>(xs.size());
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(xs.size()));
    return s;
}

std::string eval_csv_row(const EvalRow& r) {
    return fmt::format("{},{},{:.6f},{:.6f},{},{},{:.6f},{:.6f}", r.case_name, r.method, r.psnr, r.ssim,
                       fmt_opt(r.dice_mouth), fmt_opt(r.dice_larynx), r.rotation_error_deg,
                       r.translation_error_mm);
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::string out = std::string(kEvalCsvHeader) + "\n";
    for (const auto& r : rows) out += eval_csv_row(r) + "\n";
    return out;
}

namespace {

struct MethodColumns {
    std::vector<double> psnr, ssim, dice_mouth, dice_larynx, rot, trans;
};

std::vector<std::pair<std::string, MethodColumns>> by_method(const std::vector<EvalRow>& rows) {
    std::vector<std::pair<std::string, MethodColumns>> out;
    for (const auto& r : rows) {
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.method; });
        if (it == out.end()) {
            out.push_back({r.method, {}});
            it = std::prev(out.end());
        }
        auto& m = it->second;
        m.psnr.push_back(r.psnr);
        m.ssim.push_back(r.ssim);
        if (r.dice_mouth) m.dice_mouth.push_back(*r.dice_mouth);
        if (r.dice_larynx) m.dice_larynx.push_back(*r.dice_larynx);
        m.rot.push_back(r.rotation_error_deg);
        m.trans.push_back(r.translation_error_mm);
    }
    return out;
}

nlohmann::json stat_json(const std::vector<double>& xs) {
    if (xs.empty()) return nullptr;
    const Stat s = summarize(xs);
    return {{"mean", s.mean}, {"std", s.stddev}, {"n", s.count}};
}

}  // namespace

nlohmann::json aggregate_json(const std::vector<EvalRow>& rows) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [method, m] : by_method(rows)) {
        out[method] = {{"psnr_db", stat_json(m.psnr)},           {"ssim", stat_json(m.ssim)},
                       {"dice_mouth", stat_json(m.dice_mouth)},  {"dice_larynx", stat_json(m.dice_larynx)},
                       {"rot_err_deg", stat_json(m.rot)},        {"trans_err_mm", stat_json(m.trans)}};
    }
    return out;
}

std::string ablation_table(const std::vector<EvalRow>& rows) {
    auto groups = by_method(rows);
    std::stable_sort(groups.begin(), groups.end(), [](const auto& x, const auto& y) {
        return summarize(x.second.psnr).mean > summarize(y.second.psnr).mean;
    });
    auto cell = [](const std::vector<double>& xs, int prec) {
        if (xs.empty()) return std::string("n/a");
        const Stat s = summarize(xs);
        return fmt::format("{:.{}f} ({:.{}f})", s.mean, prec, s.stddev, prec);
    };
    std::ostringstream os;
    os << fmt::format("{:<18}{:>18}{:>18}{:>18}{:>18}\n", "method", "PSNR dB", "SSIM", "Dice mouth",
                      "Dice larynx");
    for (const auto& [method, m] : groups)
        os << fmt::format("{:<18}{:>18}{:>18}{:>18}{:>18}\n", method, cell(m.psnr, 2), cell(m.ssim, 3),
                          cell(m.dice_mouth, 3), cell(m.dice_larynx, 3));
    return os.str();
}

}  // namespace guidedrec
