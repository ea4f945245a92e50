#include "guidedrec/adam.hpp"

#include <cmath>

#include "guidedrec/errors.hpp"

namespace guidedrec {

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads, double lr,
               const AdamConfig& cfg, std::span<const double> scale, const std::string& block) {
    const std::size_t n = params.size();
    if (grads.size() != n || state.m.size() != n || state.v.size() != n)
        throw UsageError("adam_step: state, parameter and gradient sizes differ");
    if (!scale.empty() && scale.size() != n) throw UsageError("adam_step: scale size differs");
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(grads[i]))
            throw NumericalError(block, "non-finite gradient in " + block + " at index " + std::to_string(i));

    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        const double s = scale.empty() ? 1.0 : scale[i];
        params[i] -= lr * s * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace guidedrec
