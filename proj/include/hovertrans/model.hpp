#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hovertrans/hover.hpp"

namespace hovertrans {

struct ModelConfig {
  std::size_t input_side = 256;
  std::size_t patch = 2;  // p
  std::size_t strip = 2;  // h&v
  std::vector<std::size_t> stage_channels{4, 8, 16, 32};
  std::vector<std::size_t> stage_depths{2, 4, 4, 2};
  std::vector<std::size_t> stage_heads{2, 4, 8, 16};
  std::size_t num_classes = 2;
  Variant variant = Variant::full;
  bool positional = true;
  // Pool after the last stage's Conv block. Off leaves the stage-4 map at
  // input_side/32 before the head.
  bool final_pool = true;

  // Smallest configuration used by gradient checks and desk-scale runs:
  // 32 px input, channels {2,4,8,16}, one block per stage. The stage maps
  // are 8, 4, 2 and 1 px wide, so patch and strip are 1 and the last stage
  // does not pool.
  static ModelConfig tiny();

  std::size_t stage_side(std::size_t stage) const;
  TokenGeometry stage_geometry(std::size_t stage) const;
  std::size_t stage_dim(std::size_t stage) const;
  std::size_t head_features() const { return 2 * stage_channels.back(); }

  // Throws ConfigError naming the failing field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct HoverTransNet {
  ModelConfig config;
  StemParams stem;
  std::vector<HoverStageParams> stages;
  LinearParams head;

  void visit_params(const ParamVisitor& visit);
  void visit_buffers(const BufferVisitor& visit);
  std::size_t parameter_count();
  void zero_grad();
};

// Deterministic initialization from seed; ConfigError on invalid config.
HoverTransNet build_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardResult {
  Var logits;  // (B, num_classes)
  FeatureMap stem;
  std::vector<StageOutput> stages;
};

// batch is (B, input_side, input_side, 3). training selects batch statistics
// in the normalization layers (and updates their running estimates).
ForwardResult forward(HoverTransNet& model, const Var& batch, bool training = false);

// Mean softmax cross-entropy; labels outside [0, K) are a ValidationError.
Var loss(const Var& logits, std::span<const int> labels);

// Checkpoint container: 8-byte magic "HVTCKPT\0", uint32 version, uint64
// header length, a JSON header {format, version, config, metadata, tensors:
// [{name, kind, shape, offset}]}, then every tensor as little-endian float64
// in header order. Offsets count doubles from the start of the payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, HoverTransNet& model,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  HoverTransNet model;
  nlohmann::json metadata;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Hex FNV-1a 64 of the file bytes; identifies a checkpoint in sidecar files.
std::string checkpoint_id(const std::filesystem::path& path);

}  // namespace hovertrans
