#include "guidedrec/perceptual.hpp"

#include <cmath>

#include "guidedrec/errors.hpp"
#include "guidedrec/random.hpp"

namespace guidedrec {

namespace {

int out_size(int n) { return (n - PerceptualFeatures::kKernel) / PerceptualFeatures::kStride + 1; }

// Strided valid convolution; `pre` receives the pre-activation values.
FeatureMap conv(const FeatureMap& in, const std::vector<double>& weights, int out_channels,
                std::vector<double>& pre) {
    constexpr int K = PerceptualFeatures::kKernel, S = PerceptualFeatures::kStride;
    FeatureMap out;
    out.channels = out_channels;
    out.width = out_size(in.width);
    out.height = out_size(in.height);
    out.data.assign(static_cast<std::size_t>(out_channels) * out.width * out.height, 0.0);
    pre.assign(out.data.size(), 0.0);
    const std::size_t in_plane = static_cast<std::size_t>(in.width) * in.height;
    for (int oc = 0; oc < out_channels; ++oc)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                double acc = 0.0;
                for (int ic = 0; ic < in.channels; ++ic) {
                    const double* w = &weights[((static_cast<std::size_t>(oc) * in.channels + ic) * K) * K];
                    const double* src = &in.data[ic * in_plane];
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx)
                            acc += w[ky * K + kx] * src[static_cast<std::size_t>(y * S + ky) * in.width + x * S + kx];
                }
                const std::size_t o = (static_cast<std::size_t>(oc) * out.height + y) * out.width + x;
                pre[o] = acc;
                out.data[o] = acc > 0.0 ? acc : PerceptualFeatures::kLeak * acc;
            }
    return out;
}

// Backward through activation and convolution: accumulates into grad_in.
void conv_backward(const FeatureMap& in, const std::vector<double>& weights, const FeatureMap& out,
                   const std::vector<double>& pre, const std::vector<double>& grad_out,
                   std::vector<double>& grad_in) {
    constexpr int K = PerceptualFeatures::kKernel, S = PerceptualFeatures::kStride;
    grad_in.assign(in.data.size(), 0.0);
    const std::size_t in_plane = static_cast<std::size_t>(in.width) * in.height;
    for (int oc = 0; oc < out.channels; ++oc)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                const std::size_t o = (static_cast<std::size_t>(oc) * out.height + y) * out.width + x;
                const double g = grad_out[o] * (pre[o] > 0.0 ? 1.0 : PerceptualFeatures::kLeak);
                if (g == 0.0) continue;
                for (int ic = 0; ic < in.channels; ++ic) {
                    const double* w = &weights[((static_cast<std::size_t>(oc) * in.channels + ic) * K) * K];
                    double* dst = &grad_in[ic * in_plane];
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx)
                            dst[static_cast<std::size_t>(y * S + ky) * in.width + x * S + kx] += g * w[ky * K + kx];
                }
            }
}

FeatureMap as_map(const ImageView& img) {
    if (img.width < PerceptualFeatures::kMinSize || img.height < PerceptualFeatures::kMinSize)
        throw UsageError("perceptual loss needs images of at least 16x16 pixels");
    if (img.data.size() != static_cast<std::size_t>(img.width) * img.height)
        throw UsageError("perceptual loss: image data does not match its dimensions");
    FeatureMap m;
    m.channels = 1;
    m.width = img.width;
    m.height = img.height;
    m.data.assign(img.data.begin(), img.data.end());
    return m;
}

}  // namespace

PerceptualFeatures::PerceptualFeatures() {
    Rng rng(42);
    w1_.resize(kChannels1 * kKernel * kKernel);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(kKernel * kKernel));
    for (double& w : w1_) w = s1 * rng.normal();
    w2_.resize(kChannels2 * kChannels1 * kKernel * kKernel);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(kChannels1 * kKernel * kKernel));
    for (double& w : w2_) w = s2 * rng.normal();
}

const PerceptualFeatures& PerceptualFeatures::instance() {
    static const PerceptualFeatures features;
    return features;
}

std::array<FeatureMap, 2> PerceptualFeatures::features(const ImageView& image) const {
    const FeatureMap in = as_map(image);
    std::vector<double> pre;
    FeatureMap f1 = conv(in, w1_, kChannels1, pre);
    FeatureMap f2 = conv(f1, w2_, kChannels2, pre);
    return {std::move(f1), std::move(f2)};
}

double PerceptualFeatures::loss(const ImageView& p, const ImageView& q, std::span<double> grad_p) const {
    if (p.width != q.width || p.height != q.height) throw UsageError("perceptual loss: image size mismatch");
    const FeatureMap in_p = as_map(p), in_q = as_map(q);
    std::vector<double> pre1p, pre2p, pre1q, pre2q;
    const FeatureMap f1p = conv(in_p, w1_, kChannels1, pre1p);
    const FeatureMap f2p = conv(f1p, w2_, kChannels2, pre2p);
    const FeatureMap f1q = conv(in_q, w1_, kChannels1, pre1q);
    const FeatureMap f2q = conv(f1q, w2_, kChannels2, pre2q);

    double total = 0.0;
    std::vector<double> g1(f1p.data.size()), g2(f2p.data.size());
    {
        const double inv = 1.0 / static_cast<double>(f1p.data.size());
        for (std::size_t i = 0; i < f1p.data.size(); ++i) {
            const double d = f1p.data[i] - f1q.data[i];
            total += d * d * inv;
            g1[i] = 2.0 * d * inv;
        }
    }
    {
        const double inv = 1.0 / static_cast<double>(f2p.data.size());
        for (std::size_t i = 0; i < f2p.data.size(); ++i) {
            const double d = f2p.data[i] - f2q.data[i];
            total += d * d * inv;
            g2[i] = 2.0 * d * inv;
        }
    }
    if (!grad_p.empty()) {
        if (grad_p.size() != in_p.data.size()) throw UsageError("perceptual loss: gradient buffer size mismatch");
        std::vector<double> back1;
        conv_backward(f1p, w2_, f2p, pre2p, g2, back1);
        for (std::size_t i = 0; i < g1.size(); ++i) g1[i] += back1[i];
        std::vector<double> back0;
        conv_backward(in_p, w1_, f1p, pre1p, g1, back0);
        for (std::size_t i = 0; i < back0.size(); ++i) grad_p[i] = back0[i];
    }
    return total;
}

}  // namespace guidedrec
