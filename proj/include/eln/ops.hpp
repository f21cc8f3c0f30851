// Differentiable operations over NCHW tensors.

#pragma once

#include <span>
#include <vector>

#include "eln/tensor.hpp"

namespace eln {

// x [B, Cin, H, W], weight [Cout, Cin, k, k], bias [Cout] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// log(sigmoid(x)) computed without overflow.
Tensor log_sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// Bilinear resize with half-pixel centers (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Log-softmax over axis 1 of a [B, C, H, W] tensor.
Tensor log_softmax_channels(const Tensor& logits);

Tensor concat_channels(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t end);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor neg(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum of scalar tensors; undefined entries are skipped. Returns 0 if none.
Tensor add_scalars(std::span<const Tensor> terms);

}  // namespace eln
