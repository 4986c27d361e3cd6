#include "hovertrans/nn.hpp"

#include <cmath>

#include "hovertrans/error.hpp"

namespace hovertrans {

std::size_t token_count(const TokenLayout& layout) {
  return std::visit(
      [](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, PatchGrid>) {
          return l.rows * l.cols;
        } else {
          return l.count;
        }
      },
      layout);
}

void TokenSequence::check() const {
  if (!data || data.value().rank() != 3) throw ShapeError("token sequence must be rank 3 (batch, tokens, dim)");
  if (tokens() != token_count(layout)) {
    throw ShapeError("token sequence holds " + std::to_string(tokens()) + " tokens but its layout describes " +
                     std::to_string(token_count(layout)));
  }
  if (dim() == 0) throw ShapeError("token sequence has zero embedding dim");
}

void FeatureMap::check() const {
  if (!data || data.value().rank() != 4) throw ShapeError("feature map must be rank 4 (batch, height, width, channels)");
  if (height() == 0 || width() == 0 || channels() == 0) throw ShapeError("feature map has an empty axis");
}

// ---------------------------------------------------------------------------

LinearParams init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {Var::parameter(truncated_normal_tensor({in, out}, 0.02, rng)), Var::parameter(Tensor({out}, 0.0))};
}

LayerNormParams init_layer_norm(std::size_t dim) {
  return {Var::parameter(Tensor({dim}, 1.0)), Var::parameter(Tensor({dim}, 0.0))};
}

BlockParams init_block(std::size_t dim, Rng& rng) {
  BlockParams p;
  p.norm1 = init_layer_norm(dim);
  p.attention.query = init_linear(dim, dim, rng);
  p.attention.key = init_linear(dim, dim, rng);
  p.attention.value = init_linear(dim, dim, rng);
  p.attention.output = init_linear(dim, dim, rng);
  p.norm2 = init_layer_norm(dim);
  p.fc1 = init_linear(dim, 4 * dim, rng);
  p.fc2 = init_linear(4 * dim, dim, rng);
  return p;
}

ConvParams init_conv(std::size_t kernel, std::size_t in, std::size_t out, bool bias, Rng& rng) {
  // He-normal for convolutions feeding rectifiers.
  const double stddev = std::sqrt(2.0 / static_cast<double>(kernel * kernel * in));
  ConvParams p;
  p.weight = Var::parameter(normal_tensor({kernel, kernel, in, out}, stddev, rng));
  if (bias) p.bias = Var::parameter(Tensor({out}, 0.0));
  return p;
}

BatchNormParams init_batch_norm(std::size_t channels) {
  BatchNormParams p;
  p.scale = Var::parameter(Tensor({channels}, 1.0));
  p.shift = Var::parameter(Tensor({channels}, 0.0));
  p.stats.running_mean = Tensor({channels}, 0.0);
  p.stats.running_var = Tensor({channels}, 1.0);
  return p;
}

StemParams init_stem(std::size_t out_channels, Rng& rng) {
  StemParams p;
  p.conv1 = init_conv(3, 3, out_channels, false, rng);
  p.norm1 = init_batch_norm(out_channels);
  p.conv2 = init_conv(3, out_channels, out_channels, true, rng);
  return p;
}

ConvBlockParams init_conv_block(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  const std::size_t wide = 2 * in_channels;
  ConvBlockParams p;
  p.expand = init_conv(1, in_channels, wide, false, rng);
  p.norm1 = init_batch_norm(wide);
  p.spatial = init_conv(3, wide, wide, false, rng);
  p.norm2 = init_batch_norm(wide);
  p.compress = init_conv(1, wide, out_channels, true, rng);
  return p;
}

// ---------------------------------------------------------------------------

void visit_params(const std::string& prefix, LinearParams& p, const ParamVisitor& visit) {
  visit(prefix + ".weight", p.weight, ParamRole::weight);
  if (p.bias) visit(prefix + ".bias", p.bias, ParamRole::bias);
}

void visit_params(const std::string& prefix, LayerNormParams& p, const ParamVisitor& visit) {
  visit(prefix + ".scale", p.scale, ParamRole::norm);
  visit(prefix + ".shift", p.shift, ParamRole::norm);
}

void visit_params(const std::string& prefix, AttentionParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".query", p.query, visit);
  visit_params(prefix + ".key", p.key, visit);
  visit_params(prefix + ".value", p.value, visit);
  visit_params(prefix + ".output", p.output, visit);
}

void visit_params(const std::string& prefix, BlockParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".norm1", p.norm1, visit);
  visit_params(prefix + ".attn", p.attention, visit);
  visit_params(prefix + ".norm2", p.norm2, visit);
  visit_params(prefix + ".fc1", p.fc1, visit);
  visit_params(prefix + ".fc2", p.fc2, visit);
}

void visit_params(const std::string& prefix, ConvParams& p, const ParamVisitor& visit) {
  visit(prefix + ".weight", p.weight, ParamRole::weight);
  if (p.bias) visit(prefix + ".bias", p.bias, ParamRole::bias);
}

void visit_params(const std::string& prefix, BatchNormParams& p, const ParamVisitor& visit) {
  visit(prefix + ".scale", p.scale, ParamRole::norm);
  visit(prefix + ".shift", p.shift, ParamRole::norm);
}

void visit_params(const std::string& prefix, StemParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".conv1", p.conv1, visit);
  visit_params(prefix + ".norm1", p.norm1, visit);
  visit_params(prefix + ".conv2", p.conv2, visit);
}

void visit_params(const std::string& prefix, ConvBlockParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".expand", p.expand, visit);
  visit_params(prefix + ".norm1", p.norm1, visit);
  visit_params(prefix + ".spatial", p.spatial, visit);
  visit_params(prefix + ".norm2", p.norm2, visit);
  visit_params(prefix + ".compress", p.compress, visit);
}

void visit_buffers(const std::string& prefix, BatchNormParams& p, const BufferVisitor& visit) {
  visit(prefix + ".running_mean", p.stats.running_mean);
  visit(prefix + ".running_var", p.stats.running_var);
}

void visit_buffers(const std::string& prefix, StemParams& p, const BufferVisitor& visit) {
  visit_buffers(prefix + ".norm1", p.norm1, visit);
}

void visit_buffers(const std::string& prefix, ConvBlockParams& p, const BufferVisitor& visit) {
  visit_buffers(prefix + ".norm1", p.norm1, visit);
  visit_buffers(prefix + ".norm2", p.norm2, visit);
}

// ---------------------------------------------------------------------------

TokenSequence layer_norm(const TokenSequence& x, const LayerNormParams& params, double eps) {
  x.check();
  return {ops::layer_norm(x.data, params.scale, params.shift, eps), x.layout};
}

TokenSequence multi_head_self_attention(const TokenSequence& x, const AttentionParams& params, std::size_t heads) {
  x.check();
  if (heads == 0 || x.dim() % heads != 0) {
    throw ConfigError("embedding dim " + std::to_string(x.dim()) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const Var q = ops::linear(x.data, params.query.weight, params.query.bias);
  const Var k = ops::linear(x.data, params.key.weight, params.key.bias);
  const Var v = ops::linear(x.data, params.value.weight, params.value.bias);
  const Var mixed = ops::attention(q, k, v, heads);
  return {ops::linear(mixed, params.output.weight, params.output.bias), x.layout};
}

TokenSequence transformer_block(const TokenSequence& x, const BlockParams& params, std::size_t heads) {
  const TokenSequence attended = multi_head_self_attention(layer_norm(x, params.norm1), params.attention, heads);
  const Var mid = ops::add(attended.data, x.data);
  const Var normed = ops::layer_norm(mid, params.norm2.scale, params.norm2.shift, kLayerNormEps);
  const Var hidden = ops::gelu(ops::linear(normed, params.fc1.weight, params.fc1.bias));
  const Var mlp = ops::linear(hidden, params.fc2.weight, params.fc2.bias);
  return {ops::add(mlp, mid), x.layout};
}

FeatureMap conv_stem(const FeatureMap& image, StemParams& params, bool training) {
  image.check();
  if (image.height() % 4 || image.width() % 4) {
    throw ConfigError("conv stem needs height and width divisible by 4, got " + std::to_string(image.height()) +
                      "x" + std::to_string(image.width()));
  }
  Var x = ops::conv2d(image.data, params.conv1.weight, params.conv1.bias, 2, 1);
  x = ops::relu(ops::batch_norm(x, params.norm1.scale, params.norm1.shift, params.norm1.stats, training));
  return {ops::conv2d(x, params.conv2.weight, params.conv2.bias, 2, 1)};
}

FeatureMap conv_block(const FeatureMap& x, ConvBlockParams& params, bool training) {
  x.check();
  Var y = ops::conv2d(x.data, params.expand.weight, params.expand.bias, 1, 0);
  y = ops::relu(ops::batch_norm(y, params.norm1.scale, params.norm1.shift, params.norm1.stats, training));
  y = ops::conv2d(y, params.spatial.weight, params.spatial.bias, 1, 1);
  y = ops::relu(ops::batch_norm(y, params.norm2.scale, params.norm2.shift, params.norm2.stats, training));
  return {ops::conv2d(y, params.compress.weight, params.compress.bias, 1, 0)};
}

FeatureMap pool2(const FeatureMap& x) {
  x.check();
  return {ops::avg_pool2(x.data)};
}

}  // namespace hovertrans
