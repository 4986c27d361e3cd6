#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hovertrans/data.hpp"
#include "hovertrans/metrics.hpp"
#include "hovertrans/model.hpp"

namespace hovertrans {

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double weight_decay = 0.1;
  std::size_t warmup_epochs = 10;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  AugmentConfig augment;

  // ConfigError naming the failing field.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

// Linear warm-up from 0 to base_lr over warmup_epochs * steps_per_epoch
// steps, then half-cosine down to 0 at step epochs * steps_per_epoch. Steps
// past the end return 0.
double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& config);

struct ParamRef {
  std::string name;
  Var param;
  bool decay = false;  // decoupled weight decay applies
};

// Weights and positional tables decay; norm parameters and biases do not.
std::vector<ParamRef> collect_params(HoverTransNet& model);

// Adam with decoupled weight decay: w <- w (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);
  explicit AdamW(const TrainConfig& config)
      : AdamW(config.beta1, config.beta2, config.adam_eps, config.weight_decay) {}

  // The parameter list must be the same (same order and shapes) on every call.
  void step(std::span<const ParamRef> params, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // rate used by the epoch's last update
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

nlohmann::json to_json(const EpochLog& log);

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  // Ids of every training batch as it is assembled.
  std::function<void(std::size_t epoch, std::span<const std::string> ids)> on_batch;
};

struct TrainResult {
  HoverTransNet model;
  std::vector<ScoreRow> val_scores;  // fold field left 0
  std::vector<EpochLog> log;
};

// Trains model in place on train_records and scores val_records with the
// final weights. ValidationError when the id sets intersect; NumericError on
// a non-finite loss.
TrainResult train_fold(HoverTransNet model, std::span<const ImageRecord> train_records,
                       std::span<const ImageRecord> val_records, const TrainConfig& config,
                       const TrainHooks& hooks = {});

// Softmax probability of the malignant class for each record, evaluated in
// inference mode in chunks of batch_size.
std::vector<double> predict_malignant(HoverTransNet& model, std::span<const ImageRecord> records,
                                      std::size_t batch_size = 32);

// Mean cross-entropy and accuracy in inference mode.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate_model(HoverTransNet& model, std::span<const ImageRecord> records, std::size_t batch_size = 32);

struct CrossValidationOptions {
  double threshold = kDefaultThreshold;
  // When set, writes fold<i>.ckpt, fold<i>_scores.csv, fold<i>_log.jsonl,
  // scores.csv and metrics.json here.
  std::optional<std::filesystem::path> output_dir;
  std::function<void(std::size_t fold, const EpochLog&)> on_epoch;
};

struct CrossValidationResult {
  std::vector<ScoreRow> scores;  // every record exactly once, grouped by fold
  MetricsReport report;
};

// Trains one model per fold (initialized from derive_seed(seed, fold)) and
// pools the out-of-fold scores.
CrossValidationResult cross_validate(std::span<const ImageRecord> records, const FoldSplit& split,
                                     const ModelConfig& model_config, const TrainConfig& train_config,
                                     const CrossValidationOptions& options = {});

// Convenience overload: folds from make_folds(records, k, train_config.seed).
CrossValidationResult cross_validate(std::span<const ImageRecord> records, std::size_t k,
                                     const ModelConfig& model_config, const TrainConfig& train_config,
                                     const CrossValidationOptions& options = {});

}  // namespace hovertrans
