#pragma once

#include <span>
#include <string>
#include <vector>

namespace guidedrec {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// One bias-corrected Adam update of `params` in place. `scale`, when not
// empty, multiplies the step per parameter (diagonal preconditioning).
// Throws NumericalError naming `block` if any gradient is non-finite.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads, double lr,
               const AdamConfig& cfg = {}, std::span<const double> scale = {},
               const std::string& block = "params");

}  // namespace guidedrec
