#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mddet/tensor.hpp"

namespace mddet {

// ---------------------------------------------------------------------------
// Convolution

struct ConvLayer {
    Tensor4 weight;             // (out_ch, in_ch, kH, kW); kH, kW in {1, 3}
    std::vector<double> bias;   // out_ch
    int stride = 1;
    int pad = 0;
};

ConvLayer make_conv(int out_ch, int in_ch, int k, int stride, int pad);

struct ConvGrads {
    Tensor4 input;
    Tensor4 weight;
    std::vector<double> bias;
};

// Cross-correlation. Output spatial size: floor((H + 2*pad - kH)/stride) + 1.
Tensor4 conv2d(const Tensor4& input, const ConvLayer& layer);
ConvGrads conv2d_backward(const Tensor4& input, const ConvLayer& layer, const Tensor4& out_grad);

// ---------------------------------------------------------------------------
// Activations

Tensor4 leaky_relu(const Tensor4& t, double slope);
// Routes through the forward output; sign(output) == sign(input) for slope in [0,1).
Tensor4 leaky_relu_backward(const Tensor4& output, double slope, const Tensor4& out_grad);

// ---------------------------------------------------------------------------
// Pooling

struct MaxPoolResult {
    Tensor4 out;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};

// 2x2 non-overlapping max; ties break on the first index in row-major scan.
MaxPoolResult maxpool2(const Tensor4& t);
Tensor4 maxpool2_backward(const MaxPoolResult& fwd, const Tensor4& in_shape_like, const Tensor4& out_grad);

// ---------------------------------------------------------------------------
// Channel normalization (batch norm over batch+spatial per channel)

inline constexpr double kNormEps = 1e-5;
inline constexpr double kRunningDecay = 0.99;

struct NormParams {
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;

    explicit NormParams(int channels = 0)
        : gamma(channels, 1.0), beta(channels, 0.0),
          running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

struct NormCache {
    std::vector<double> inv_std;  // per channel
    Tensor4 xhat;
};

// Training path: per-batch statistics; optionally folds them into the running
// averages (decay 0.99).
Tensor4 channel_norm_train(const Tensor4& t, NormParams& p, NormCache& cache, bool update_running);
// Inference path: stored running statistics.
Tensor4 channel_norm_eval(const Tensor4& t, const NormParams& p);

struct NormGrads {
    Tensor4 input;
    std::vector<double> gamma, beta;
};

NormGrads channel_norm_backward(const NormParams& p, const NormCache& cache, const Tensor4& out_grad);

// ---------------------------------------------------------------------------
// Space-to-depth (reorg) and channel concatenation

// Output channel = c*block^2 + (dy*block + dx); shape (n, c*block^2, H/block, W/block).
Tensor4 space_to_depth(const Tensor4& t, int block);
// Exact inverse permutation; also the backward pass of space_to_depth.
Tensor4 depth_to_space(const Tensor4& t, int block);

Tensor4 concat_channels(const std::vector<const Tensor4*>& parts);
std::vector<Tensor4> split_channels(const Tensor4& t, const std::vector<int>& channel_sizes);

}  // namespace mddet
