#pragma once

// Layer vocabulary for the policy networks. Activations are row batches:
// dense inputs are [N, D]; images are [N, H, W, C] (channels last).

#include "mil/autodiff.hpp"

namespace mil::nn {

using ad::Var;

inline constexpr double kLayerNormEps = 1e-6;

// y = x W^T + b with W stored [out, in].
Var dense(const Var& x, const Var& weight, const Var& bias);

// Valid (unpadded) strided convolution. kernels: [F, k, k, C].
// Output: [N, (H-k)/s + 1, (W-k)/s + 1, F].
Var conv2d(const Var& image, const Var& kernels, std::size_t stride);

// Adds a per-channel bias to a channels-last activation of any rank.
Var add_channel_bias(const Var& x, const Var& bias);

// Per-sample normalization of a [N, D] activation to zero mean and unit
// variance, then gamma * x + beta.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta);

// Layer norm over all features of each sample of a channels-last map, with
// per-channel gamma and beta.
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta);

// Softmax over the H*W locations of each channel, then the expected (x, y)
// position in [-1, 1]^2. Input [N, H, W, C]; output [N, 2C] ordered
// (x0, y0, x1, y1, ...).
Var spatial_soft_argmax(const Var& features);

// y = W1 x + W2 z + b. z: [Dz], W1: [out, in], W2: [out, Dz], b: [out].
Var bias_transform(const Var& x, const Var& z, const Var& w1, const Var& w2, const Var& b);

// [N, H, W, C] -> [N, H*W*C].
Var flatten_batch(const Var& x);

}  // namespace mil::nn
