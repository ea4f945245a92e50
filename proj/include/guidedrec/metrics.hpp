#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedrec/deform.hpp"
#include "guidedrec/phantom.hpp"
#include "guidedrec/recon.hpp"
#include "guidedrec/volume.hpp"

namespace guidedrec {

inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) on the normalized range, capped at 99 dB.
double psnr(const Volume& a, const Volume& b);

// Mean SSIM over all fully interior windows of a uniform window^3 box.
double ssim3d(const Volume& a, const Volume& b, int window = 7, double k1 = 0.01, double k2 = 0.03,
              double range = 1.0);

// 2|A n B| / (|A| + |B|); two empty masks score 1. Inputs must be 0/1.
double dice(const Volume& a, const Volume& b);

// x -> R (x - c) + c + t, with c the grid center.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation{0, 0, 0};

    static RigidTransform from_axis_angle(const Vec3& rotation_deg, const Vec3& translation_mm);
    RigidTransform compose(const RigidTransform& inner) const;  // this after inner
    Vec3 apply(const Vec3& x, const Vec3& center) const {
        return rotation * (x - center) + center + translation;
    }
};

// b(x) = a(T(x)) for the rigid T, sampled on b's grid.
Volume rigid_resample(const Volume& a, const RigidTransform& t);

struct RigidRegisterConfig {
    int iterations = 200;
    double lr_rotation_deg = 1.0;
    double lr_translation_mm = 1.0;
};

struct RigidRegisterResult {
    RigidTransform transform;
    bool degenerate_inertia = false;
    double final_ssd = 0.0;
};

// Finds T minimizing sum_x (a(T(x)) - b(x))^2: moment initialization then
// Adam over axis-angle and translation.
RigidRegisterResult rigid_register(const Volume& a, const Volume& b, const RigidRegisterConfig& cfg = {});

struct RigidError {
    double rotation_deg = 0.0;
    double translation_mm = 0.0;
};
RigidError rigid_error(const RigidTransform& est, const RigidTransform& ref);

struct EvalRow {
    std::string case_name;
    std::string method;
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> dice_mouth;   // empty when the method has no deformation
    std::optional<double> dice_larynx;
    double rotation_error_deg = 0.0;
    double translation_error_mm = 0.0;
};

// `deformation` warps the pre-acquired masks; pass nullptr when the method
// has none.
EvalRow evaluate_case(const Case& c, const std::string& method, const Volume& recovered,
                      const DeformationField* deformation);
EvalRow evaluate_case(const Case& c, const ReconResult& result);

struct Stat {
    double mean = 0.0;
    double stddev = 0.0;  // population
    int count = 0;
};
Stat summarize(const std::vector<double>& xs);

inline const char* kEvalCsvHeader =
    "case,method,psnr_db,ssim,dice_mouth,dice_larynx,rot_err_deg,trans_err_mm";
std::string eval_csv_row(const EvalRow& r);
std::string eval_csv(const std::vector<EvalRow>& rows);

// Per method: mean and standard deviation of every column.
nlohmann::json aggregate_json(const std::vector<EvalRow>& rows);

// Plain-text table sorted by mean PSNR, "mean (std)" cells.
std::string ablation_table(const std::vector<EvalRow>& rows);

}  // namespace guidedrec
