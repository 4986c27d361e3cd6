#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace hovertrans {

// Area under the ROC curve as the Mann-Whitney statistic
// P(score+ > score-) + 0.5 P(tie). UndefinedMetricError unless both classes
// are present. Positive class is label 1 (malignant).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct ConfusionMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  // Empty when the denominator is zero; never silently 0.
  std::optional<double> accuracy;
  std::optional<double> specificity;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
};

inline constexpr double kDefaultThreshold = 0.5;

// Predicts malignant when score >= threshold. threshold must lie in (0, 1).
ConfusionMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                                   double threshold = kDefaultThreshold);

struct DeLongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

// Paired DeLong test on two score sets over the same labelled cases. When the
// variance of the AUC difference is zero, p is 1 for equal AUCs and 0 otherwise.
DeLongResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                         std::span<const int> labels);

struct FoldMetrics {
  std::string name;
  std::size_t n = 0;
  std::size_t positives = 0;
  std::optional<double> auc;
  ConfusionMetrics confusion;
};

FoldMetrics evaluate_scores(const std::string& name, std::span<const double> scores, std::span<const int> labels,
                            double threshold = kDefaultThreshold);

struct MeanStd {
  std::optional<double> mean;
  std::optional<double> std;  // sample std (n - 1); 0 for one value
  std::size_t count = 0;      // folds where the metric was defined
};

// Mean and sample standard deviation of values; empty input gives an empty MeanStd.
MeanStd mean_std(std::span<const double> values);

struct DeLongComparison {
  std::string name;
  DeLongResult result;
};

struct MetricsReport {
  double threshold = kDefaultThreshold;
  std::vector<FoldMetrics> folds;
  std::map<std::string, MeanStd> summary;  // keyed by metric name
  std::map<std::string, FoldMetrics> subgroups;
  std::vector<DeLongComparison> delong;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"auc", "acc", "specificity", "precision", "recall", "f1"};
  return names;
}
std::optional<double> metric_value(const FoldMetrics& f, const std::string& metric);

// Per-metric mean +- sample std over folds.
MetricsReport aggregate(std::span<const FoldMetrics> folds, double threshold = kDefaultThreshold);

nlohmann::json to_json(const MetricsReport& report);
std::string render_table(const MetricsReport& report);

// Out-of-fold score table: image_id,fold,score_malignant,label.
struct ScoreRow {
  std::string image_id;
  std::size_t fold = 0;
  double score = 0.0;
  int label = 0;
};

void write_scores(const std::filesystem::path& path, std::span<const ScoreRow> rows);
std::vector<ScoreRow> read_scores(const std::filesystem::path& path);

// Metrics per group over pooled rows; rows whose id has no group are skipped.
std::map<std::string, FoldMetrics> subgroup_metrics(std::span<const ScoreRow> rows,
                                                    const std::map<std::string, std::string>& group_of,
                                                    double threshold = kDefaultThreshold);

// DeLong test between two score tables over the same ids. ValidationError
// when the id sets or labels differ.
DeLongResult delong_tables(std::span<const ScoreRow> a, std::span<const ScoreRow> b);

}  // namespace hovertrans
