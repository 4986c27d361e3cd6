#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <variant>

#include "hovertrans/autograd.hpp"
#include "hovertrans/ops.hpp"
#include "hovertrans/rng.hpp"

namespace hovertrans {

inline constexpr double kLayerNormEps = 1e-6;

// ---------------------------------------------------------------------------
// Activation containers

struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool operator==(const PatchGrid&) const = default;
};
struct HStrips {
  std::size_t count = 0;
  bool operator==(const HStrips&) const = default;
};
struct VStrips {
  std::size_t count = 0;
  bool operator==(const VStrips&) const = default;
};
using TokenLayout = std::variant<PatchGrid, HStrips, VStrips>;

std::size_t token_count(const TokenLayout& layout);

// (batch, tokens, dim) activations plus how the tokens tile the source map.
struct TokenSequence {
  Var data;
  TokenLayout layout;

  std::size_t batch() const { return data.dim(0); }
  std::size_t tokens() const { return data.dim(1); }
  std::size_t dim() const { return data.dim(2); }
  // Throws ShapeError unless data is rank 3 and tokens() matches the layout.
  void check() const;
};

// (batch, height, width, channels) activations.
struct FeatureMap {
  Var data;

  std::size_t batch() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  std::size_t channels() const { return data.dim(3); }
  void check() const;
};

// ---------------------------------------------------------------------------
// Parameters

enum class ParamRole { weight, bias, norm, positional };

using ParamVisitor = std::function<void(const std::string& name, Var& param, ParamRole role)>;
using BufferVisitor = std::function<void(const std::string& name, Tensor& buffer)>;

struct LinearParams {
  Var weight;  // (in, out)
  Var bias;    // (out)
};

struct LayerNormParams {
  Var scale;
  Var shift;
};

struct AttentionParams {
  LinearParams query;
  LinearParams key;
  LinearParams value;
  LinearParams output;
};

// One pre-norm transformer encoder block: attention and a D -> 4D -> D MLP.
struct BlockParams {
  LayerNormParams norm1;
  AttentionParams attention;
  LayerNormParams norm2;
  LinearParams fc1;
  LinearParams fc2;
};

struct ConvParams {
  Var weight;  // (kh, kw, in, out)
  Var bias;    // (out), may be undefined
};

struct BatchNormParams {
  Var scale;
  Var shift;
  ops::BatchNormStats stats;
};

struct StemParams {
  ConvParams conv1;
  BatchNormParams norm1;
  ConvParams conv2;
};

struct ConvBlockParams {
  ConvParams expand;   // 1x1, C -> 2C
  BatchNormParams norm1;
  ConvParams spatial;  // 3x3, 2C -> 2C
  BatchNormParams norm2;
  ConvParams compress;  // 1x1, 2C -> out
};

LinearParams init_linear(std::size_t in, std::size_t out, Rng& rng);
LayerNormParams init_layer_norm(std::size_t dim);
BlockParams init_block(std::size_t dim, Rng& rng);
ConvParams init_conv(std::size_t kernel, std::size_t in, std::size_t out, bool bias, Rng& rng);
BatchNormParams init_batch_norm(std::size_t channels);
StemParams init_stem(std::size_t out_channels, Rng& rng);
ConvBlockParams init_conv_block(std::size_t in_channels, std::size_t out_channels, Rng& rng);

void visit_params(const std::string& prefix, LinearParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, LayerNormParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, AttentionParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, BlockParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, ConvParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, BatchNormParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, StemParams& p, const ParamVisitor& visit);
void visit_params(const std::string& prefix, ConvBlockParams& p, const ParamVisitor& visit);

void visit_buffers(const std::string& prefix, BatchNormParams& p, const BufferVisitor& visit);
void visit_buffers(const std::string& prefix, StemParams& p, const BufferVisitor& visit);
void visit_buffers(const std::string& prefix, ConvBlockParams& p, const BufferVisitor& visit);

// ---------------------------------------------------------------------------
// Operations

TokenSequence layer_norm(const TokenSequence& x, const LayerNormParams& params, double eps = kLayerNormEps);

// Throws ConfigError when dim is not divisible by heads.
TokenSequence multi_head_self_attention(const TokenSequence& x, const AttentionParams& params, std::size_t heads);

// z' = MSA(LN(x)) + x; out = MLP(LN(z')) + z'.
TokenSequence transformer_block(const TokenSequence& x, const BlockParams& params, std::size_t heads);

// Two stride-2 3x3 convolutions with batch norm and ReLU between them.
// Height and width must be divisible by 4.
FeatureMap conv_stem(const FeatureMap& image, StemParams& params, bool training);

// 1x1 expand (BN, ReLU) -> 3x3 (BN, ReLU) -> 1x1 compress. Spatial size is preserved.
FeatureMap conv_block(const FeatureMap& x, ConvBlockParams& params, bool training);

// 2x2 average pooling; odd spatial sizes are a ConfigError.
FeatureMap pool2(const FeatureMap& x);

}  // namespace hovertrans
