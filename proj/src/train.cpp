#include "hovertrans/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "hovertrans/error.hpp"
#include "hovertrans/ops.hpp"

namespace hovertrans {

namespace {

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError(field + ": " + rule);
}

// Copies of the records at the model's input side; resizing happens once.
std::vector<ImageRecord> at_side(std::span<const ImageRecord> records, std::size_t side) {
  std::vector<ImageRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    if (r.image.height != side || r.image.width != side) r.image = resize_image(r.image, side);
  }
  return out;
}

struct BatchLoss {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<double> malignant;
};

BatchLoss run_inference(HoverTransNet& model, std::span<const ImageRecord> records, std::size_t batch_size,
                        bool with_loss) {
  NoGradGuard no_grad;
  BatchLoss out;
  const std::size_t side = model.config.input_side;
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<Image> images;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(records[i].image);
      labels.push_back(records[i].label);
    }
    const ForwardResult r = forward(model, Var::constant(to_model_input(images, side)), false);
    const Tensor probs = ops::softmax_rows(r.logits.value());
    const std::size_t k = r.logits.dim(1);
    for (std::size_t b = 0; b < images.size(); ++b) {
      out.malignant.push_back(probs[b * k + static_cast<std::size_t>(kMalignant)]);
      const double* row = probs.data() + b * k;
      const auto predicted = static_cast<int>(std::max_element(row, row + k) - row);
      if (predicted == labels[b]) ++out.correct;
    }
    if (with_loss) out.loss_sum += loss(r.logits, labels).value()[0] * static_cast<double>(images.size());
  }
  return out;
}

nlohmann::json augment_json(const AugmentConfig& a) {
  return {{"p_blur", a.p_blur},
          {"p_noise", a.p_noise},
          {"p_hflip", a.p_hflip},
          {"p_brightness_contrast", a.p_brightness_contrast},
          {"noise_sigma", a.noise_sigma},
          {"blur_sigma_min", a.blur_sigma_min},
          {"blur_sigma_max", a.blur_sigma_max},
          {"brightness_delta", a.brightness_delta},
          {"contrast_delta", a.contrast_delta}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << text;
}

}  // namespace

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs", "must be >= 1");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(warmup_epochs < epochs, "warmup_epochs", "must be < epochs");
  require(std::isfinite(base_lr) && base_lr > 0.0, "base_lr", "must be positive");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be positive");
  augment.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay},
       {"warmup_epochs", c.warmup_epochs},
       {"seed", c.seed},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"augment", augment_json(c.augment)}};
}

double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& config) {
  if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch: must be >= 1");
  const std::size_t warmup = config.warmup_epochs * steps_per_epoch;
  const std::size_t total = config.epochs * steps_per_epoch;
  if (step < warmup) return config.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<ParamRef> collect_params(HoverTransNet& model) {
  std::vector<ParamRef> out;
  model.visit_params([&](const std::string& name, Var& p, ParamRole role) {
    out.push_back({name, p, role == ParamRole::weight || role == ParamRole::positional});
  });
  return out;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(std::span<const ParamRef> params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.param.shape(), 0.0);
      v_.emplace_back(p.param.shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var param = params[i].param;
    Tensor& w = param.mutable_value();
    const Tensor& g = param.grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    if (w.shape() != m.shape()) throw ShapeError("AdamW: parameter '" + params[i].name + "' changed shape");
    const double shrink = params[i].decay ? 1.0 - lr * weight_decay_ : 1.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      w[j] = w[j] * shrink - lr * update;
    }
  }
}

nlohmann::json to_json(const EpochLog& log) {
  nlohmann::json j{{"epoch", log.epoch}, {"lr", log.lr}, {"train_loss", log.train_loss}};
  j["val_loss"] = log.val_loss ? nlohmann::json(*log.val_loss) : nlohmann::json();
  return j;
}

std::vector<double> predict_malignant(HoverTransNet& model, std::span<const ImageRecord> records,
                                      std::size_t batch_size) {
  return run_inference(model, records, batch_size, false).malignant;
}

Evaluation evaluate_model(HoverTransNet& model, std::span<const ImageRecord> records, std::size_t batch_size) {
  if (records.empty()) throw ValidationError("evaluate_model: no records");
  const BatchLoss r = run_inference(model, records, batch_size, true);
  const double n = static_cast<double>(records.size());
  return {r.loss_sum / n, static_cast<double>(r.correct) / n};
}

TrainResult train_fold(HoverTransNet model, std::span<const ImageRecord> train_records,
                       std::span<const ImageRecord> val_records, const TrainConfig& config,
                       const TrainHooks& hooks) {
  config.validate();
  if (train_records.empty()) throw ValidationError("train_fold: empty training set");
  std::set<std::string> train_ids;
  for (const auto& r : train_records) train_ids.insert(r.image_id);
  for (const auto& r : val_records) {
    if (train_ids.count(r.image_id)) {
      throw ValidationError("train_fold: image_id '" + r.image_id + "' is in both train and val");
    }
  }

  const std::size_t side = model.config.input_side;
  const std::vector<ImageRecord> train = at_side(train_records, side);
  const std::vector<ImageRecord> val = at_side(val_records, side);
  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::vector<ParamRef> params = collect_params(model);
  AdamW optimizer(config);

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(config.seed, static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(epoch_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochLog log;
    log.epoch = epoch + 1;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t step = epoch * steps_per_epoch + b;
      const std::size_t start = b * config.batch_size;
      const std::size_t end = std::min(train.size(), start + config.batch_size);
      std::vector<Image> images;
      std::vector<int> labels;
      std::vector<std::string> ids;
      for (std::size_t i = start; i < end; ++i) {
        const ImageRecord& r = train[order[i]];
        Rng sample_rng(derive_seed(epoch_seed, r.image_id));
        images.push_back(augment(r.image, config.augment, sample_rng));
        labels.push_back(r.label);
        ids.push_back(r.image_id);
      }
      if (hooks.on_batch) hooks.on_batch(epoch + 1, ids);

      model.zero_grad();
      const ForwardResult fwd = forward(model, Var::constant(to_model_input(images, side)), true);
      const Var l = loss(fwd.logits, labels);
      const double value = l.value()[0];
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(step));
      }
      backward(l);
      log.lr = lr_at(step, steps_per_epoch, config);
      optimizer.step(params, log.lr);
      loss_sum += value * static_cast<double>(images.size());
    }
    log.train_loss = loss_sum / static_cast<double>(train.size());
    if (!val.empty()) log.val_loss = evaluate_model(model, val, config.batch_size).loss;
    result.log.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
  }

  const std::vector<double> scores = predict_malignant(model, val, config.batch_size);
  for (std::size_t i = 0; i < val.size(); ++i) {
    result.val_scores.push_back({val[i].image_id, 0, scores[i], val[i].label});
  }
  result.model = std::move(model);
  return result;
}

CrossValidationResult cross_validate(std::span<const ImageRecord> records, const FoldSplit& split,
                                     const ModelConfig& model_config, const TrainConfig& train_config,
                                     const CrossValidationOptions& options) {
  model_config.validate();
  train_config.validate();
  for (const auto& r : records) {
    if (!split.assignments.count(r.image_id)) {
      throw ValidationError("image_id '" + r.image_id + "' has no fold assignment");
    }
  }
  if (options.output_dir) std::filesystem::create_directories(*options.output_dir);

  CrossValidationResult result;
  std::vector<FoldMetrics> folds;
  for (std::size_t fold = 0; fold < split.k; ++fold) {
    std::vector<ImageRecord> train, val;
    for (const auto& r : records) (split.assignments.at(r.image_id) == fold ? val : train).push_back(r);
    if (val.empty()) throw ValidationError("fold " + std::to_string(fold) + " has no validation images");

    TrainHooks hooks;
    std::string log_text;
    hooks.on_epoch = [&](const EpochLog& log) {
      log_text += to_json(log).dump() + "\n";
      if (options.on_epoch) options.on_epoch(fold, log);
    };
    TrainConfig fold_config = train_config;
    fold_config.seed = derive_seed(train_config.seed, static_cast<std::uint64_t>(fold));
    TrainResult trained = train_fold(build_model(model_config, derive_seed(fold_config.seed, "init")), train, val,
                                     fold_config, hooks);
    for (auto& row : trained.val_scores) row.fold = fold;

    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& row : trained.val_scores) {
      scores.push_back(row.score);
      labels.push_back(row.label);
    }
    folds.push_back(evaluate_scores("fold" + std::to_string(fold), scores, labels, options.threshold));

    if (options.output_dir) {
      const auto& dir = *options.output_dir;
      const std::string stem = "fold" + std::to_string(fold);
      nlohmann::json meta{{"fold", fold}, {"train", train_config}};
      save_checkpoint(dir / (stem + ".ckpt"), trained.model, meta);
      write_scores(dir / (stem + "_scores.csv"), trained.val_scores);
      write_text(dir / (stem + "_log.jsonl"), log_text);
    }
    result.scores.insert(result.scores.end(), trained.val_scores.begin(), trained.val_scores.end());
  }

  result.report = aggregate(folds, options.threshold);
  std::map<std::string, std::string> buckets;
  for (const auto& r : records) {
    if (r.birads) buckets[r.image_id] = "birads_" + birads_bucket(*r.birads);
  }
  result.report.subgroups = subgroup_metrics(result.scores, buckets, options.threshold);

  if (options.output_dir) {
    write_scores(*options.output_dir / "scores.csv", result.scores);
    write_text(*options.output_dir / "metrics.json", to_json(result.report).dump(2) + "\n");
  }
  return result;
}

CrossValidationResult cross_validate(std::span<const ImageRecord> records, std::size_t k,
                                     const ModelConfig& model_config, const TrainConfig& train_config,
                                     const CrossValidationOptions& options) {
  return cross_validate(records, make_folds(records, k, train_config.seed), model_config, train_config, options);
}

}  // namespace hovertrans
