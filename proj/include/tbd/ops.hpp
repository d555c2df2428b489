#pragma once

#include <vector>

#include "tbd/tensor.hpp"

// Differentiable tensor operations. All tensors are row-major; image-like
// tensors use (N, C, H, W).
namespace tbd::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// x: (N, C, ...) plus v: (C) or (N, C) broadcast over trailing axes.
Tensor add_channelwise(const Tensor& x, const Tensor& v);

/// a: (..., K) with b: (K, M) -> (..., M).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: (..., in), weight: (in, out), bias: (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
/// Repeats x along a new leading axis.
Tensor repeat_leading(const Tensor& x, int times);

/// x: (N, C, H, W), weight: (O, C, k, k), bias: (O).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
Tensor upsample_nearest2x(const Tensor& x);

/// Normalizes each (sample, group) over its channels and all trailing axes.
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor silu(const Tensor& x);
/// Sigmoid approximation x * sigmoid(1.702 x).
Tensor gelu(const Tensor& x);

/// Multi-head scaled dot-product attention.
/// q: (B, Nq, D), k and v: (B or 1, Nk, D). Head h uses columns
/// [h*D/heads, (h+1)*D/heads); logits are scaled by 1/sqrt(D/heads).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

/// Rows of table (V, D) selected by ids.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

/// alpha * a + (1 - alpha) * b, evaluated with std::lerp so alpha = 1 gives a
/// exactly, alpha = 0 gives b exactly, and a == b passes through unchanged.
Tensor blend(const Tensor& a, const Tensor& b, double alpha);

/// Sum of squared differences, as a scalar.
Tensor squared_error(const Tensor& pred, const Tensor& target);
Tensor sum(const Tensor& x);

}  // namespace tbd::ops
