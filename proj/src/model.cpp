#include "hovertrans/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hovertrans/error.hpp"

namespace hovertrans {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'H', 'V', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr std::size_t kStages = 4;
}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_side = 32;
  c.patch = 1;
  c.strip = 1;
  c.stage_channels = {2, 4, 8, 16};
  c.stage_depths = {1, 1, 1, 1};
  c.stage_heads = {1, 2, 2, 4};
  c.final_pool = false;
  return c;
}

std::size_t ModelConfig::stage_side(std::size_t stage) const { return (input_side / 4) >> stage; }

TokenGeometry ModelConfig::stage_geometry(std::size_t stage) const {
  const std::size_t side = stage_side(stage);
  return {side, side, stage_channels.at(stage), patch, strip};
}

std::size_t ModelConfig::stage_dim(std::size_t stage) const { return patch * patch * stage_channels.at(stage); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  if (stage_channels.size() != kStages) fail("stage_channels", "expected 4 entries");
  if (stage_depths.size() != kStages) fail("stage_depths", "expected 4 entries");
  if (stage_heads.size() != kStages) fail("stage_heads", "expected 4 entries");
  if (input_side == 0 || input_side % 32 != 0) {
    fail("input_side", std::to_string(input_side) + " is not a positive multiple of 32");
  }
  if (num_classes < 2) fail("num_classes", "must be at least 2");
  if (stage_channels[0] == 0) fail("stage_channels", "must be positive");
  for (std::size_t s = 1; s < kStages; ++s) {
    if (stage_channels[s] != 2 * stage_channels[s - 1]) fail("stage_channels", "must double from stage to stage");
  }
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::string tag = "stage " + std::to_string(s + 1);
    if (stage_depths[s] == 0) fail("stage_depths", tag + " needs at least one block");
    const TokenGeometry g = stage_geometry(s);
    if (auto why = g.violation()) {
      fail(g.patch > 0 && (g.height % g.patch) ? "patch" : "strip", tag + ": " + *why);
    }
    if (stage_heads[s] == 0 || stage_dim(s) % stage_heads[s] != 0) {
      fail("stage_heads", tag + ": " + std::to_string(stage_heads[s]) + " heads do not divide token dim " +
                              std::to_string(stage_dim(s)));
    }
  }
  if (final_pool && stage_side(kStages - 1) % 2 != 0) {
    fail("final_pool", "stage 4 map is " + std::to_string(stage_side(kStages - 1)) + " px wide and cannot be pooled");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_side", c.input_side},         {"patch", c.patch},
                     {"strip", c.strip},                   {"stage_channels", c.stage_channels},
                     {"stage_depths", c.stage_depths},     {"stage_heads", c.stage_heads},
                     {"num_classes", c.num_classes},       {"variant", variant_name(c.variant)},
                     {"positional", c.positional},         {"final_pool", c.final_pool}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.input_side = j.at("input_side").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.strip = j.at("strip").get<std::size_t>();
  c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
  c.stage_depths = j.at("stage_depths").get<std::vector<std::size_t>>();
  c.stage_heads = j.at("stage_heads").get<std::vector<std::size_t>>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.positional = j.at("positional").get<bool>();
  c.final_pool = j.at("final_pool").get<bool>();
}

void HoverTransNet::visit_params(const ParamVisitor& visit) {
  hovertrans::visit_params("stem", stem, visit);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    hovertrans::visit_params("stage" + std::to_string(s + 1), stages[s], visit);
  }
  hovertrans::visit_params("head", head, visit);
}

void HoverTransNet::visit_buffers(const BufferVisitor& visit) {
  hovertrans::visit_buffers("stem", stem, visit);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    hovertrans::visit_buffers("stage" + std::to_string(s + 1), stages[s], visit);
  }
}

std::size_t HoverTransNet::parameter_count() {
  std::size_t n = 0;
  visit_params([&](const std::string&, Var& p, ParamRole) { n += p.value().size(); });
  return n;
}

void HoverTransNet::zero_grad() {
  visit_params([](const std::string&, Var& p, ParamRole) { p.zero_grad(); });
}

HoverTransNet build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  HoverTransNet net;
  net.config = config;
  net.stem = init_stem(config.stage_channels[0], rng);
  for (std::size_t s = 0; s < kStages; ++s) {
    net.stages.push_back(init_hover_stage(config.stage_geometry(s), config.stage_depths[s], config.variant,
                                          config.positional, rng));
  }
  net.head = init_linear(config.head_features(), config.num_classes, rng);
  return net;
}

ForwardResult forward(HoverTransNet& model, const Var& batch, bool training) {
  const ModelConfig& c = model.config;
  const auto& shape = batch.shape();
  if (shape.size() != 4 || shape[1] != c.input_side || shape[2] != c.input_side || shape[3] != 3) {
    throw ShapeError("forward expects (B, " + std::to_string(c.input_side) + ", " + std::to_string(c.input_side) +
                     ", 3) input, got " + shape_string(shape));
  }
  if (shape[0] == 0) throw ShapeError("forward: empty batch");
  ForwardResult out;
  out.stem = conv_stem({batch}, model.stem, training);
  FeatureMap x = out.stem;
  for (std::size_t s = 0; s < kStages; ++s) {
    const bool pool = s + 1 < kStages || c.final_pool;
    out.stages.push_back(hover_stage(x, model.stages[s], c.stage_geometry(s), c.stage_heads[s], training, pool));
    x = out.stages.back().output;
  }
  const Var pooled = ops::global_avg_pool(x.data);
  out.logits = ops::linear(pooled, model.head.weight, model.head.bias);
  return out;
}

Var loss(const Var& logits, std::span<const int> labels) { return ops::cross_entropy(logits, labels); }

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct TensorRef {
  std::string name;
  std::string kind;
  Tensor* tensor;
};

std::vector<TensorRef> collect(HoverTransNet& model) {
  std::vector<TensorRef> refs;
  model.visit_params([&](const std::string& name, Var& p, ParamRole) {
    refs.push_back({name, "param", &p.mutable_value()});
  });
  model.visit_buffers([&](const std::string& name, Tensor& t) { refs.push_back({name, "buffer", &t}); });
  return refs;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, HoverTransNet& model, const nlohmann::json& metadata) {
  const auto refs = collect(model);
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& r : refs) {
    tensors.push_back({{"name", r.name}, {"kind", r.kind}, {"shape", r.tensor->shape()}, {"offset", offset}});
    offset += r.tensor->size();
  }
  const nlohmann::json header = {{"format", "hovertrans-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"config", model.config},
                                 {"metadata", metadata},
                                 {"tensors", tensors}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot open checkpoint for writing: " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& r : refs) {
    out.write(reinterpret_cast<const char*>(r.tensor->data()),
              static_cast<std::streamsize>(r.tensor->size() * sizeof(double)));
  }
  if (!out) throw IngestionError("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IngestionError("not a hovertrans checkpoint: " + path.string());
  }
  if (version != kCheckpointVersion) {
    throw IngestionError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IngestionError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  LoadedCheckpoint loaded;
  const ModelConfig config = header.at("config").get<ModelConfig>();
  loaded.model = build_model(config, 0);
  loaded.metadata = header.value("metadata", nlohmann::json::object());
  auto refs = collect(loaded.model);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != refs.size()) {
    throw IngestionError("checkpoint tensor count does not match its config: " + path.string());
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& entry = tensors[i];
    if (entry.at("name").get<std::string>() != refs[i].name ||
        entry.at("shape").get<Tensor::Shape>() != refs[i].tensor->shape()) {
      throw IngestionError("checkpoint tensor '" + entry.at("name").get<std::string>() +
                           "' does not match the model layout: " + path.string());
    }
    in.read(reinterpret_cast<char*>(refs[i].tensor->data()),
            static_cast<std::streamsize>(refs[i].tensor->size() * sizeof(double)));
  }
  if (!in) throw IngestionError("truncated checkpoint payload: " + path.string());
  return loaded;
}

std::string checkpoint_id(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace hovertrans
