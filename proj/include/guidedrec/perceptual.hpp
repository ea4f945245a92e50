#pragma once

#include <array>
#include <span>
#include <vector>

namespace guidedrec {

// Row-major 2D image (width fastest), the layout of Projection data.
struct ImageView {
    std::span<const double> data;
    int width = 0;
    int height = 0;
};

struct FeatureMap {
    int channels = 0;
    int width = 0;
    int height = 0;
    std::vector<double> data;  // channel-major, then row-major
};

// Fixed two-layer random convolution feature extractor: 8 filters 5x5
// stride 2, then 16 filters 5x5 stride 2, both followed by max(x, 0.1x).
// Weights are N(0, 1/fan_in) draws from a seed-42 stream.
class PerceptualFeatures {
public:
    static constexpr int kKernel = 5;
    static constexpr int kStride = 2;
    static constexpr int kChannels1 = 8;
    static constexpr int kChannels2 = 16;
    static constexpr int kMinSize = 16;
    static constexpr double kLeak = 0.1;

    static const PerceptualFeatures& instance();

    std::array<FeatureMap, 2> features(const ImageView& image) const;

    // L_p(p, q) = sum over layers of the mean squared feature difference.
    // Writes dL/dp into grad_p when it is non-empty.
    double loss(const ImageView& p, const ImageView& q, std::span<double> grad_p = {}) const;

private:
    PerceptualFeatures();
    std::vector<double> w1_;  // [8][5][5]
    std::vector<double> w2_;  // [16][8][5][5]
};

inline double perceptual_loss(const ImageView& p, const ImageView& q, std::span<double> grad_p = {}) {
    return PerceptualFeatures::instance().loss(p, q, grad_p);
}

}  // namespace guidedrec
