#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hovertrans/autograd.hpp"

// Differentiable primitives over Var. Feature maps are (batch, height, width,
// channels); token sequences are (batch, tokens, dim). Every op records its
// backward closure on the tape when grad mode is on.
namespace hovertrans::ops {

Var add(const Var& a, const Var& b);
// b's shape must equal the trailing dims of x; b is repeated over the leading ones.
Var add_broadcast(const Var& x, const Var& b);
Var scale(const Var& x, double factor);

// x (..., in) times weight (in, out) plus optional bias (out).
Var linear(const Var& x, const Var& weight, const Var& bias);

// Normalizes over the last axis, then applies scale and shift (both of that length).
Var layer_norm(const Var& x, const Var& scale, const Var& shift, double eps);

// Exact (erf) GELU.
Var gelu(const Var& x);
Var relu(const Var& x);

// Scaled dot-product attention per head on already-projected (B, T, D) inputs.
// The scale is 1/sqrt(D/heads).
Var attention(const Var& query, const Var& key, const Var& value, std::size_t heads);

// NHWC convolution with weight (kh, kw, in, out) and optional bias (out).
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

// Per-channel normalization over (batch, height, width). In training mode the
// batch moments are used and the running statistics are updated in place.
Var batch_norm(const Var& x, const Var& scale, const Var& shift, BatchNormStats& stats, bool training,
               double momentum = 0.1, double eps = 1e-5);

// 2x2 average pooling, stride 2. Odd spatial dims are a ConfigError.
Var avg_pool2(const Var& x);
// (B, H, W, C) -> (B, C)
Var global_avg_pool(const Var& x);

Var concat_last(const Var& a, const Var& b);
Var reshape(const Var& x, Tensor::Shape shape);

// A fixed sparse linear map applied to every sample of a batch. Output element
// o is sum over k in [offsets[o], offsets[o+1]) of weights[k] * in[sources[k]]
// (weights empty means all ones).
struct RemapPlan {
  std::size_t in_size = 0;
  Tensor::Shape out_shape;  // per sample
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> sources;
  std::vector<double> weights;
};
Var remap(const Var& x, const RemapPlan& plan);

// Scalar sum(weights * x). Used to build probe losses.
Var weighted_sum(const Var& x, const Tensor& weights);

// Mean softmax cross-entropy over a (B, K) batch of logits.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Row-wise softmax of a (B, K) tensor.
Tensor softmax_rows(const Tensor& logits);

}  // namespace hovertrans::ops
