#include "mil/layers.hpp"

#include <algorithm>
#include <memory>

#include "mil/ops.hpp"

namespace mil::nn {

namespace {

void require(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) throw ShapeError(op + ": " + msg);
}

}  // namespace

Var dense(const Var& x, const Var& weight, const Var& bias) {
  require(x.shape().size() == 2 && weight.shape().size() == 2 && bias.shape().size() == 1, "dense",
          "expected x [N,in], W [out,in], b [out]");
  require(x.shape()[1] == weight.shape()[1], "dense",
          "input width " + std::to_string(x.shape()[1]) + " vs weight " + shape_str(weight.shape()));
  require(bias.shape()[0] == weight.shape()[0], "dense", "bias length does not match weight rows");
  return ad::tag(ad::add_row_vector(ad::matmul_nt(x, weight), bias), "dense");
}

Var conv2d(const Var& image, const Var& kernels, std::size_t stride) {
  require(stride > 0, "conv2d", "stride must be positive");
  require(image.shape().size() == 4, "conv2d", "image must be [N,H,W,C], got " + shape_str(image.shape()));
  require(kernels.shape().size() == 4, "conv2d", "kernels must be [F,k,k,C], got " + shape_str(kernels.shape()));
  const auto n = image.shape()[0], h = image.shape()[1], w = image.shape()[2], c = image.shape()[3];
  const auto f = kernels.shape()[0], kh = kernels.shape()[1], kw = kernels.shape()[2];
  require(kernels.shape()[3] == c, "conv2d", "kernel channels do not match image channels");
  require(kh <= h && kw <= w, "conv2d", "kernel larger than image");
  const auto ho = (h - kh) / stride + 1, wo = (w - kw) / stride + 1;
  const auto patch = kh * kw * c;

  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(n * ho * wo * patch);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t di = 0; di < kh; ++di)
          for (std::size_t dj = 0; dj < kw; ++dj)
            for (std::size_t ch = 0; ch < c; ++ch)
              index->push_back(((b * h + i * stride + di) * w + j * stride + dj) * c + ch);

  Var cols = ad::gather(image, index, {n * ho * wo, patch});
  Var k2 = ad::reshape(kernels, {f, patch});
  Var out = ad::matmul_nt(cols, k2);
  return ad::tag(ad::reshape(out, {n, ho, wo, f}), "conv2d");
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const auto& s = x.shape();
  require(!s.empty() && bias.shape().size() == 1 && bias.shape()[0] == s.back(), "add_channel_bias",
          "bias must match the channel extent");
  const std::size_t c = s.back();
  Var rows = ad::reshape(x, {numel(s) / c, c});
  return ad::reshape(ad::add_row_vector(rows, bias), s);
}

namespace {
Var normalize_rows(const Var& x) {
  const std::size_t d = x.shape()[1];
  Var mean = ad::mean_cols(x);
  Var centered = ad::sub(x, ad::broadcast_cols(mean, d));
  Var var = ad::mean_cols(ad::square(centered));
  Var inv_std = ad::pow(ad::add_scalar(var, kLayerNormEps), -0.5);
  return ad::mul(centered, ad::broadcast_cols(inv_std, d));
}
}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta) {
  require(x.shape().size() == 2 && x.shape()[1] >= 1, "layer_norm", "expected [N,D] with D >= 1");
  require(gamma.shape() == Shape{x.shape()[1]} && beta.shape() == gamma.shape(), "layer_norm",
          "gamma/beta must be [D]");
  Var normed = normalize_rows(x);
  return ad::tag(ad::add_row_vector(ad::mul_row_vector(normed, gamma), beta), "layer_norm");
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta) {
  const auto& s = x.shape();
  require(s.size() >= 2, "layer_norm_channels", "expected a batched channels-last map");
  const std::size_t n = s[0], c = s.back(), per_sample = numel(s) / n;
  require(gamma.shape() == Shape{c} && beta.shape() == gamma.shape(), "layer_norm_channels",
          "gamma/beta must be [C]");
  Var normed = ad::reshape(normalize_rows(ad::reshape(x, {n, per_sample})), {n * per_sample / c, c});
  Var out = ad::add_row_vector(ad::mul_row_vector(normed, gamma), beta);
  return ad::tag(ad::reshape(out, s), "layer_norm");
}

Var spatial_soft_argmax(const Var& features) {
  require(features.shape().size() == 4, "spatial_soft_argmax", "expected [N,H,W,C]");
  const auto n = features.shape()[0], h = features.shape()[1], w = features.shape()[2], c = features.shape()[3];
  require(h * w > 0, "spatial_soft_argmax", "empty feature map");

  // [N,H,W,C] -> [N*C, H*W]
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(n * c * h * w);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) index->push_back((b * h * w + p) * c + ch);
  Var logits = ad::gather(features, index, {n * c, h * w});

  // Row max is a constant shift; softmax is invariant to it.
  Tensor row_max({n * c, 1});
  if (logits.has_value()) {
    const Tensor& l = logits.value();
    for (std::size_t r = 0; r < n * c; ++r) {
      row_max[r] = *std::max_element(l.values().begin() + r * h * w, l.values().begin() + (r + 1) * h * w);
    }
  }
  Var shifted = ad::sub(logits, ad::broadcast_cols(ad::constant(std::move(row_max)), h * w));
  Var e = ad::exp(shifted);
  Var probs = ad::div(e, ad::broadcast_cols(ad::sum_cols(e), h * w));

  Tensor coords({h * w, 2});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      coords.at(i * w + j, 0) = w > 1 ? -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(w - 1) : 0.0;
      coords.at(i * w + j, 1) = h > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(h - 1) : 0.0;
    }
  }
  Var expected = ad::matmul(probs, ad::constant(std::move(coords)));
  return ad::tag(ad::reshape(expected, {n, 2 * c}), "spatial_soft_argmax");
}

Var bias_transform(const Var& x, const Var& z, const Var& w1, const Var& w2, const Var& b) {
  require(z.shape().size() == 1 && w2.shape().size() == 2 && w2.shape()[1] == z.shape()[0], "bias_transform",
          "W2 must be [out, Dz] for z [Dz]");
  require(w2.shape()[0] == w1.shape()[0], "bias_transform", "W1 and W2 row counts differ");
  require(b.shape() == Shape{w1.shape()[0]}, "bias_transform", "bias length does not match W1 rows");
  require(x.shape().size() == 2 && x.shape()[1] == w1.shape()[1], "bias_transform", "input width does not match W1");
  const std::size_t out = w1.shape()[0];
  Var transformed = ad::reshape(ad::matmul(w2, ad::reshape(z, {z.shape()[0], 1})), {out});
  Var eff_bias = ad::add(transformed, b);
  return ad::tag(ad::add_row_vector(ad::matmul_nt(x, w1), eff_bias), "bias_transform");
}

Var flatten_batch(const Var& x) {
  const auto& s = x.shape();
  return ad::reshape(x, {s[0], numel(s) / s[0]});
}

}  // namespace mil::nn
