#include "hovertrans/cli.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "hovertrans/csv.hpp"
#include "hovertrans/data.hpp"
#include "hovertrans/error.hpp"
#include "hovertrans/interpret.hpp"
#include "hovertrans/metrics.hpp"
#include "hovertrans/synthetic.hpp"

namespace hovertrans {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  std::string s = v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  if (out.empty()) throw ConfigError("key '" + key + "': expected a comma-separated list, got '" + v + "'");
  return out;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <typename T>
ConfigKey size_key(std::string key, std::string help, T RunConfig::*group, std::size_t T::*field) {
  return {key, "int", std::move(help),
          [key, group, field](RunConfig& c, const std::string& v) { (c.*group).*field = parse_size(key, v); },
          [group, field](const RunConfig& c) { return std::to_string((c.*group).*field); }};
}

template <typename T>
ConfigKey double_key(std::string key, std::string help, T RunConfig::*group, double T::*field) {
  return {key, "float", std::move(help),
          [key, group, field](RunConfig& c, const std::string& v) { (c.*group).*field = parse_double(key, v); },
          [group, field](const RunConfig& c) { return fmt((c.*group).*field); }};
}

ConfigKey augment_key(std::string key, std::string help, double AugmentConfig::*field) {
  return {key, "float", std::move(help),
          [key, field](RunConfig& c, const std::string& v) { c.train.augment.*field = parse_double(key, v); },
          [field](const RunConfig& c) { return fmt(c.train.augment.*field); }};
}

ConfigKey path_key(std::string key, std::string help, std::string RunConfig::*field) {
  return {key, "string", std::move(help), [field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

ConfigKey list_key(std::string key, std::string help, std::vector<std::size_t> ModelConfig::*field) {
  return {key, "list", std::move(help),
          [key, field](RunConfig& c, const std::string& v) { c.model.*field = parse_list(key, v); },
          [field](const RunConfig& c) { return fmt_list(c.model.*field); }};
}

ConfigKey bool_key(std::string key, std::string help, std::function<bool&(RunConfig&)> ref) {
  return {key, "bool", std::move(help),
          [key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
          [ref](const RunConfig& c) { return fmt_bool(ref(const_cast<RunConfig&>(c))); }};
}

std::vector<ConfigKey> build_schema() {
  std::vector<ConfigKey> s;
  s.push_back({"profile", "choice", "preset applied before all other keys: full | desk", [](RunConfig&, const std::string&) {},
               [](const RunConfig&) { return std::string(); }});

  s.push_back(path_key("manifest", "input manifest CSV (image_path,label[,patient_id][,birads][,center])",
                       &RunConfig::manifest));
  s.push_back(path_key("image_root", "directory image paths are relative to (default: the manifest's directory)",
                       &RunConfig::image_root));
  s.push_back(path_key("output_dir", "directory for all artifacts of the command", &RunConfig::output_dir));
  s.push_back(path_key("folds", "fold CSV image_id,fold (split writes, train reads)", &RunConfig::folds));
  s.push_back(path_key("checkpoint", "model checkpoint file", &RunConfig::checkpoint));
  s.push_back(path_key("image", "single PNG for heatmap", &RunConfig::image));
  s.push_back(path_key("scores", "score table image_id,fold,score_malignant,label", &RunConfig::scores));
  s.push_back(path_key("scores_b", "comparator score table for delong / eval", &RunConfig::scores_b));

  s.push_back(size_key("input_side", "model input side in px (multiple of 32)", &RunConfig::model,
                       &ModelConfig::input_side));
  s.push_back(size_key("patch", "patch size p of the patch embedding", &RunConfig::model, &ModelConfig::patch));
  s.push_back(size_key("strip", "strip thickness of the horizontal/vertical strip embeddings", &RunConfig::model,
                       &ModelConfig::strip));
  s.push_back(list_key("stage_channels", "four channel counts, doubling per stage", &ModelConfig::stage_channels));
  s.push_back(list_key("stage_depths", "blocks per stage", &ModelConfig::stage_depths));
  s.push_back(list_key("stage_heads", "attention heads per stage", &ModelConfig::stage_heads));
  s.push_back({"variant", "choice", "full | model_p | model_p_v | model_p_h",
               [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); },
               [](const RunConfig& c) { return variant_name(c.model.variant); }});
  s.push_back(bool_key("positional", "learned positional tables on every token stream",
                       [](RunConfig& c) -> bool& { return c.model.positional; }));
  s.push_back(bool_key("final_pool", "pool the stage-4 map before the head",
                       [](RunConfig& c) -> bool& { return c.model.final_pool; }));

  s.push_back(size_key("epochs", "training epochs", &RunConfig::train, &TrainConfig::epochs));
  s.push_back(size_key("batch_size", "images per update", &RunConfig::train, &TrainConfig::batch_size));
  s.push_back(double_key("base_lr", "peak learning rate", &RunConfig::train, &TrainConfig::base_lr));
  s.push_back(double_key("weight_decay", "decoupled weight decay on weights and positional tables",
                         &RunConfig::train, &TrainConfig::weight_decay));
  s.push_back(size_key("warmup_epochs", "linear warm-up epochs", &RunConfig::train, &TrainConfig::warmup_epochs));
  s.push_back({"seed", "int", "seed for folds, initialization, shuffling and augmentation",
               [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
               [](const RunConfig& c) { return std::to_string(c.train.seed); }});
  s.push_back(double_key("beta1", "AdamW first-moment coefficient", &RunConfig::train, &TrainConfig::beta1));
  s.push_back(double_key("beta2", "AdamW second-moment coefficient", &RunConfig::train, &TrainConfig::beta2));
  s.push_back(double_key("adam_eps", "AdamW epsilon", &RunConfig::train, &TrainConfig::adam_eps));

  s.push_back(augment_key("p_blur", "probability of Gaussian blur", &AugmentConfig::p_blur));
  s.push_back(augment_key("p_noise", "probability of additive Gaussian noise", &AugmentConfig::p_noise));
  s.push_back(augment_key("p_hflip", "probability of a horizontal flip", &AugmentConfig::p_hflip));
  s.push_back(augment_key("p_brightness_contrast", "probability of a brightness/contrast change",
                          &AugmentConfig::p_brightness_contrast));
  s.push_back(augment_key("noise_sigma", "noise standard deviation in intensity levels", &AugmentConfig::noise_sigma));
  s.push_back(augment_key("blur_sigma_min", "smallest blur sigma in px", &AugmentConfig::blur_sigma_min));
  s.push_back(augment_key("blur_sigma_max", "largest blur sigma in px", &AugmentConfig::blur_sigma_max));
  s.push_back(augment_key("brightness_delta", "max brightness shift as a fraction of full scale",
                          &AugmentConfig::brightness_delta));
  s.push_back(augment_key("contrast_delta", "max relative contrast change", &AugmentConfig::contrast_delta));

  s.push_back({"k", "int", "number of cross-validation folds",
               [](RunConfig& c, const std::string& v) { c.k = parse_size("k", v); },
               [](const RunConfig& c) { return std::to_string(c.k); }});
  s.push_back({"threshold", "float", "malignant decision threshold on the softmax probability",
               [](RunConfig& c, const std::string& v) { c.threshold = parse_double("threshold", v); },
               [](const RunConfig& c) { return fmt(c.threshold); }});
  s.push_back(bool_key("birads_subgroups", "eval: add BI-RADS 2-3 / 4-5 subgroup metrics (needs manifest)",
                       [](RunConfig& c) -> bool& { return c.birads_subgroups; }));
  s.push_back({"method", "choice", "heatmap method: activation | gradcam",
               [](RunConfig& c, const std::string& v) { c.method = method_name(parse_method(v)); },
               [](const RunConfig& c) { return c.method; }});
  s.push_back({"alpha", "float", "heatmap overlay opacity in [0, 1]",
               [](RunConfig& c, const std::string& v) { c.alpha = parse_double("alpha", v); },
               [](const RunConfig& c) { return fmt(c.alpha); }});
  s.push_back(bool_key("variants", "ablate: run full, model_p, model_p_v, model_p_h",
                       [](RunConfig& c) -> bool& { return c.variants; }));
  s.push_back(bool_key("grid", "ablate: sweep patch x strip over {2,4,8} x {1,2,4}",
                       [](RunConfig& c) -> bool& { return c.grid; }));
  s.push_back({"synthetic_count", "int", "images in the generated layered dataset (ablate/synthesize)",
               [](RunConfig& c, const std::string& v) { c.synthetic_count = parse_size("synthetic_count", v); },
               [](const RunConfig& c) { return std::to_string(c.synthetic_count); }});
  s.push_back({"synthetic_seed", "int", "seed of the generated layered dataset",
               [](RunConfig& c, const std::string& v) { c.synthetic_seed = parse_u64("synthetic_seed", v); },
               [](const RunConfig& c) { return std::to_string(c.synthetic_seed); }});
  return s;
}

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : config_schema()) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

void require_key(const std::string& value, const std::string& key, const std::string& command) {
  if (value.empty()) throw ValidationError(command + ": key '" + key + "' is required");
}

fs::path image_root_of(const RunConfig& c) {
  if (!c.image_root.empty()) return c.image_root;
  return fs::path(c.manifest).parent_path();
}

std::vector<ImageRecord> load_records(const RunConfig& c, const std::string& command) {
  require_key(c.manifest, "manifest", command);
  return load_manifest(c.manifest, image_root_of(c));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << text;
}

fs::path output_dir(const RunConfig& c, const std::string& command) {
  require_key(c.output_dir, "output_dir", command);
  fs::create_directories(c.output_dir);
  return c.output_dir;
}

// ---------------------------------------------------------------------------

int cmd_prepare(const RunConfig& c, std::ostream& out) {
  const auto records = load_records(c, "prepare");
  const fs::path dir = output_dir(c, "prepare");
  const fs::path root = image_root_of(c);
  std::vector<ImageRecord> prepared;
  nlohmann::json report = nlohmann::json::array();
  std::size_t fallbacks = 0;
  for (const auto& r : records) {
    fs::path rel(r.image_id);
    rel.replace_extension(".png");
    const fs::path dst = dir / rel;
    if (fs::exists(dst) && fs::equivalent(dst, root / r.image_id)) {
      throw ValidationError("prepare: output " + dst.string() + " would overwrite its input");
    }
    const ForegroundResult fg = extract_foreground(r.image);
    if (fg.fallback) ++fallbacks;
    ImageRecord p = r;
    p.image_id = rel.generic_string();
    p.image = resize_image(fg.image, c.model.input_side);
    fs::create_directories(dst.parent_path());
    write_png(dst, p.image);
    report.push_back({{"image_id", p.image_id},
                      {"source", r.image_id},
                      {"box", {fg.box.top, fg.box.left, fg.box.height, fg.box.width}},
                      {"confidence", fg.confidence},
                      {"fallback", fg.fallback}});
    prepared.push_back(std::move(p));
  }
  write_manifest(dir / "manifest.csv", prepared);
  write_text(dir / "prepare.json", report.dump(2) + "\n");
  out << "prepared " << prepared.size() << " images (" << fallbacks << " without a detected foreground) into "
      << dir.string() << "\n";
  return 0;
}

int cmd_split(const RunConfig& c, std::ostream& out) {
  const auto records = load_records(c, "split");
  const FoldSplit split = make_folds(records, c.k, c.train.seed);
  fs::path path = c.folds;
  if (path.empty()) path = output_dir(c, "split") / "folds.csv";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::vector<std::string> order;
  for (const auto& r : records) order.push_back(r.image_id);
  write_folds(path, split, order);
  std::vector<std::size_t> sizes(split.k, 0);
  for (const auto& [id, f] : split.assignments) ++sizes[f];
  out << "wrote " << path.string() << " (fold sizes " << fmt_list(sizes) << ")\n";
  return 0;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto records = load_records(c, "train");
  const fs::path dir = output_dir(c, "train");
  const FoldSplit split = c.folds.empty() ? make_folds(records, c.k, c.train.seed) : read_folds(c.folds);
  write_text(dir / "run_config.txt", dump_run_config(c));
  CrossValidationOptions options;
  options.threshold = c.threshold;
  options.output_dir = dir;
  options.on_epoch = [&](std::size_t fold, const EpochLog& log) {
    out << "fold " << fold << " " << to_json(log).dump() << "\n";
  };
  const CrossValidationResult r = cross_validate(records, split, c.model, c.train, options);
  out << render_table(r.report);
  return 0;
}

std::map<std::string, std::string> birads_groups(const RunConfig& c) {
  require_key(c.manifest, "manifest", "eval --birads_subgroups");
  const CsvTable table = read_csv(c.manifest);
  const int id = table.column("image_path"), b = table.column("birads");
  if (id < 0) throw ValidationError(c.manifest + ": missing image_path column");
  if (b < 0) throw ValidationError(c.manifest + ": no birads column for subgroup analysis");
  std::map<std::string, std::string> out;
  for (const auto& row : table.rows) {
    const std::string& v = row[static_cast<std::size_t>(b)];
    if (!v.empty()) out[row[static_cast<std::size_t>(id)]] = "birads_" + birads_bucket(parse_birads(v));
  }
  return out;
}

MetricsReport report_from_scores(std::span<const ScoreRow> rows, double threshold) {
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<int>>> by_fold;
  for (const auto& r : rows) {
    by_fold[r.fold].first.push_back(r.score);
    by_fold[r.fold].second.push_back(r.label);
  }
  std::vector<FoldMetrics> folds;
  for (const auto& [f, data] : by_fold) {
    folds.push_back(evaluate_scores("fold" + std::to_string(f), data.first, data.second, threshold));
  }
  return aggregate(folds, threshold);
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  require_key(c.scores, "scores", "eval");
  const auto rows = read_scores(c.scores);
  if (rows.empty()) throw ValidationError(c.scores + ": empty score table");
  MetricsReport report = report_from_scores(rows, c.threshold);
  if (c.birads_subgroups) report.subgroups = subgroup_metrics(rows, birads_groups(c), c.threshold);
  if (!c.scores_b.empty()) {
    const auto rows_b = read_scores(c.scores_b);
    report.delong.push_back({fs::path(c.scores).filename().string() + " vs " + fs::path(c.scores_b).filename().string(),
                             delong_tables(rows, rows_b)});
  }
  const fs::path dir = output_dir(c, "eval");
  write_text(dir / "metrics.json", to_json(report).dump(2) + "\n");
  write_text(dir / "metrics.txt", render_table(report));
  out << render_table(report);
  return 0;
}

int cmd_delong(const RunConfig& c, std::ostream& out) {
  require_key(c.scores, "scores", "delong");
  require_key(c.scores_b, "scores_b", "delong");
  const DeLongResult r = delong_tables(read_scores(c.scores), read_scores(c.scores_b));
  const nlohmann::json j{{"scores", c.scores},  {"scores_b", c.scores_b}, {"auc_a", r.auc_a},
                         {"auc_b", r.auc_b},    {"z", r.z},               {"p_value", r.p_value}};
  if (!c.output_dir.empty()) write_text(output_dir(c, "delong") / "delong.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_heatmap(const RunConfig& c, std::ostream& out) {
  require_key(c.checkpoint, "checkpoint", "heatmap");
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw ConfigError("key 'alpha': must lie in [0, 1]");
  const fs::path dir = output_dir(c, "heatmap");
  LoadedCheckpoint ckpt = load_checkpoint(c.checkpoint);
  const std::string ckpt_id = checkpoint_id(c.checkpoint);
  const HeatmapMethod method = parse_method(c.method);
  const std::size_t side = ckpt.model.config.input_side;

  std::vector<std::pair<std::string, Image>> inputs;
  if (!c.image.empty()) {
    inputs.emplace_back(fs::path(c.image).filename().string(), read_png(c.image));
  } else if (!c.manifest.empty()) {
    for (auto& r : load_records(c, "heatmap")) inputs.emplace_back(r.image_id, std::move(r.image));
  } else {
    throw ValidationError("heatmap: key 'image' or 'manifest' is required");
  }
  for (auto& [id, img] : inputs) {
    Image gray = to_grayscale(img);
    if (gray.height != side || gray.width != side) gray = resize_image(gray, side);
    const Heatmap h = heatmap(ckpt.model, gray, method);
    fs::path stem(id);
    stem.replace_extension();
    const fs::path png = dir / (stem.generic_string() + "_heatmap.png");
    fs::create_directories(png.parent_path());
    write_png(png, overlay(gray, h, c.alpha));
    nlohmann::json side_car = heatmap_sidecar(id, ckpt_id, method, c.alpha);
    side_car["constant"] = h.constant;
    write_text(dir / (stem.generic_string() + "_heatmap.json"), side_car.dump(2) + "\n");
    out << png.string() << (h.constant ? " (constant map)" : "") << "\n";
  }
  return 0;
}

int cmd_synthesize(const RunConfig& c, std::ostream& out) {
  const fs::path dir = output_dir(c, "synthesize");
  SyntheticConfig sc;
  sc.count = c.synthetic_count;
  sc.side = c.model.input_side;
  sc.seed = c.synthetic_seed;
  const auto records = make_layered_dataset(sc);
  write_dataset(dir, records);
  out << "wrote " << records.size() << " images and " << (dir / "manifest.csv").string() << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& c, std::ostream& out) {
  const fs::path dir = output_dir(c, "ablate");
  std::vector<ImageRecord> records;
  if (!c.manifest.empty()) {
    records = load_records(c, "ablate");
  } else {
    SyntheticConfig sc;
    sc.count = c.synthetic_count;
    sc.side = c.model.input_side;
    sc.seed = c.synthetic_seed;
    records = make_layered_dataset(sc);
  }
  const FoldSplit split = make_folds(records, c.k, c.train.seed);
  write_text(dir / "run_config.txt", dump_run_config(c));

  struct Cell {
    std::string name;
    ModelConfig model;
  };
  std::vector<Cell> cells;
  if (c.variants) {
    for (Variant v : {Variant::full, Variant::model_p, Variant::model_p_v, Variant::model_p_h}) {
      ModelConfig m = c.model;
      m.variant = v;
      cells.push_back({"variant_" + variant_name(v), m});
    }
  }
  if (c.grid) {
    for (std::size_t p : {2, 4, 8}) {
      for (std::size_t hv : {1, 2, 4}) {
        ModelConfig m = c.model;
        m.patch = p;
        m.strip = hv;
        cells.push_back({"grid_p" + std::to_string(p) + "_hv" + std::to_string(hv), m});
      }
    }
  }
  if (cells.empty()) throw ConfigError("ablate: both 'variants' and 'grid' are off; nothing to run");

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& cell : cells) {
    nlohmann::json entry{{"name", cell.name}, {"patch", cell.model.patch}, {"strip", cell.model.strip},
                         {"variant", variant_name(cell.model.variant)}};
    try {
      cell.model.validate();
    } catch (const ConfigError& e) {
      entry["status"] = "skipped";
      entry["reason"] = e.what();
      out << cell.name << ": skipped (" << e.what() << ")\n";
      summary.push_back(entry);
      continue;
    }
    CrossValidationOptions options;
    options.threshold = c.threshold;
    options.output_dir = dir / cell.name;
    const CrossValidationResult r = cross_validate(records, split, cell.model, c.train, options);
    const MeanStd& auc = r.report.summary.at("auc");
    entry["status"] = "ok";
    entry["metrics"] = (fs::path(cell.name) / "metrics.json").generic_string();
    entry["auc_mean"] = auc.mean ? nlohmann::json(*auc.mean) : nlohmann::json();
    entry["auc_std"] = auc.std ? nlohmann::json(*auc.std) : nlohmann::json();
    out << cell.name << ": AUC " << (auc.mean ? fmt(*auc.mean) : "undefined") << "\n";
    summary.push_back(entry);
  }
  write_text(dir / "ablate.json", nlohmann::json{{"cells", summary}}.dump(2) + "\n");
  return 0;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

RunConfig profile_config(const std::string& profile) {
  RunConfig c;
  if (profile == "full" || profile.empty()) return c;
  if (profile != "desk") throw ConfigError("key 'profile': expected full or desk, got '" + profile + "'");
  c.model = ModelConfig::tiny();
  c.model.input_side = 64;
  c.train.epochs = 30;
  c.train.batch_size = 8;
  c.train.base_lr = 3e-3;
  c.train.warmup_epochs = 2;
  c.k = 3;
  return c;
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open config file " + path.string());
  std::map<std::string, std::string> values;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!find_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (values.count(key)) throw ConfigError(where + ": key '" + key + "' given twice");
    values[key] = trim(line.substr(eq + 1));
  }
  return values;
}

RunConfig make_run_config(const std::map<std::string, std::string>& values) {
  for (const auto& [key, v] : values) {
    if (!find_key(key)) throw ConfigError("unknown key '" + key + "'");
  }
  const auto profile = values.find("profile");
  RunConfig c = profile_config(profile == values.end() ? "" : profile->second);
  for (const auto& k : config_schema()) {
    const auto it = values.find(k.key);
    if (it != values.end()) k.set(c, it->second);
  }
  c.model.validate();
  c.train.validate();
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("key 'threshold': must lie in (0, 1)");
  if (c.k < 2) throw ConfigError("key 'k': must be >= 2");
  return c;
}

std::string dump_run_config(const RunConfig& config) {
  std::string s;
  for (const auto& k : config_schema()) {
    if (k.key == "profile") continue;
    s += k.key + " = " + k.get(config) + "\n";
  }
  return s;
}

std::string schema_help() {
  const RunConfig defaults;
  std::string s = "Configuration keys (config file 'key = value', or --key value on the command line):\n";
  for (const auto& k : config_schema()) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "  %-22s %-7s", k.key.c_str(), k.type.c_str());
    s += buf + k.help;
    const std::string d = k.get(defaults);
    if (!d.empty()) s += " [default " + d + "]";
    s += "\n";
  }
  return s;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"prepare", "split",  "train",     "eval",
                                              "heatmap", "ablate", "delong",    "synthesize"};
  return names;
}

int run(const std::string& command, const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    if (command == "prepare") return cmd_prepare(config, out);
    if (command == "split") return cmd_split(config, out);
    if (command == "train") return cmd_train(config, out);
    if (command == "eval") return cmd_eval(config, out);
    if (command == "heatmap") return cmd_heatmap(config, out);
    if (command == "ablate") return cmd_ablate(config, out);
    if (command == "delong") return cmd_delong(config, out);
    if (command == "synthesize") return cmd_synthesize(config, out);
    err << "error: unknown command '" << command << "'\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IngestionError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid CNN-transformer with patch and strip tokenization for breast ultrasound classification"};
  app.require_subcommand(1);
  app.footer(schema_help());

  std::string config_path;
  std::map<std::string, std::string> flags;
  const std::map<std::string, std::string> command_help{
      {"prepare", "crop the foreground rectangle, resize, write cleaned PNGs and a manifest"},
      {"split", "write a stratified patient-grouped fold CSV"},
      {"train", "cross-validate: checkpoints, per-fold score tables, logs, metrics"},
      {"eval", "metrics report from a score table"},
      {"heatmap", "feature-map heatmap overlays from a checkpoint"},
      {"ablate", "cross-validate the variant set and/or the patch x strip grid"},
      {"delong", "paired DeLong test between two score tables"},
      {"synthesize", "write a layered synthetic dataset and manifest"}};
  for (const auto& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name, command_help.at(name));
    sub->add_option("--config", config_path, "flat key = value configuration file");
    for (const auto& k : config_schema()) {
      std::string dashed = k.key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      std::string names = "--" + k.key;
      if (k.type == "bool") {
        names += "{true}";
        if (dashed != k.key) names += ",--" + dashed + "{true}";
        sub->add_flag(names + ",--no-" + dashed + "{false}", flags[k.key], k.help);
      } else {
        if (dashed != k.key) names += ",--" + dashed;
        sub->add_option(names, flags[k.key], k.help);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  std::string command;
  for (const auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    std::map<std::string, std::string> values;
    if (!config_path.empty()) values = read_config_file(config_path);
    for (const auto& [key, v] : flags) {
      if (!v.empty()) values[key] = v;
    }
    const RunConfig config = make_run_config(values);
    return run(command, config, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IngestionError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hovertrans
