#include "hovertrans/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "hovertrans/csv.hpp"
#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* op) {
  if (scores.size() != labels.size()) {
    throw ValidationError(std::string(op) + ": " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError(std::string(op) + ": labels must be 0 or 1");
  }
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

// 0.5 for ties, matching the AUC definition.
double placement(double pos, double neg) { return pos > neg ? 1.0 : (pos == neg ? 0.5 : 0.0); }

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json fold_json(const FoldMetrics& f) {
  nlohmann::json j{{"name", f.name},
                   {"n", f.n},
                   {"positives", f.positives},
                   {"tp", f.confusion.tp},
                   {"fp", f.confusion.fp},
                   {"tn", f.confusion.tn},
                   {"fn", f.confusion.fn}};
  for (const auto& m : metric_names()) j[m] = optional_json(metric_value(f, m));
  return j;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "roc_auc");
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("roc_auc: both classes must be present");
  for (double s : scores) {
    if (std::isnan(s)) throw ValidationError("roc_auc: NaN score");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the Mann-Whitney U, accumulated in integers so the single final
  // division is the only rounding.
  unsigned long long twice_u = 0;
  unsigned long long neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    unsigned long long p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? p : n) += 1;
      ++j;
    }
    twice_u += p * (2 * neg_below + n);
    neg_below += n;
    i = j;
  }
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

ConfusionMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels, "confusion_metrics");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must lie in (0, 1)");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? m.tp : m.fn) += 1;
    } else {
      (predicted ? m.fp : m.tn) += 1;
    }
  }
  m.accuracy = ratio(m.tp + m.tn, scores.size());
  m.specificity = ratio(m.tn, m.tn + m.fp);
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0.0) {
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  } else if (m.precision && m.recall) {
    m.f1 = 0.0;
  }
  return m;
}

DeLongResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                         std::span<const int> labels) {
  check_inputs(scores_a, labels, "delong_test");
  check_inputs(scores_b, labels, "delong_test");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw UndefinedMetricError("delong_test: both classes must be present");
  const std::size_t m = pos.size(), n = neg.size();

  // Structural components: v10[s][i] over positives, v01[s][j] over negatives.
  std::array<std::vector<double>, 2> v10{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
  std::array<std::vector<double>, 2> v01{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  const std::array<std::span<const double>, 2> sets{scores_a, scores_b};
  std::array<double, 2> auc{0.0, 0.0};
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double psi = placement(sets[s][pos[i]], sets[s][neg[j]]);
        v10[s][i] += psi;
        v01[s][j] += psi;
      }
    }
    for (auto& v : v10[s]) v /= static_cast<double>(n);
    for (auto& v : v01[s]) v /= static_cast<double>(m);
    auc[s] = std::accumulate(v10[s].begin(), v10[s].end(), 0.0) / static_cast<double>(m);
  }
  auto cov = [](const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t k = x.size();
    if (k < 2) return 0.0;
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(k);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(k);
    double c = 0.0;
    for (std::size_t i = 0; i < k; ++i) c += (x[i] - mx) * (y[i] - my);
    return c / static_cast<double>(k - 1);
  };
  const double var10 = cov(v10[0], v10[0]) + cov(v10[1], v10[1]) - 2.0 * cov(v10[0], v10[1]);
  const double var01 = cov(v01[0], v01[0]) + cov(v01[1], v01[1]) - 2.0 * cov(v01[0], v01[1]);
  const double var = var10 / static_cast<double>(m) + var01 / static_cast<double>(n);

  DeLongResult r;
  r.auc_a = roc_auc(scores_a, labels);
  r.auc_b = roc_auc(scores_b, labels);
  const double diff = r.auc_a - r.auc_b;
  if (!(var > 1e-300)) {
    r.z = 0.0;
    r.p_value = diff == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.z = diff / std::sqrt(var);
  r.p_value = std::clamp(std::erfc(std::abs(r.z) / std::sqrt(2.0)), 0.0, 1.0);
  return r;
}

FoldMetrics evaluate_scores(const std::string& name, std::span<const double> scores, std::span<const int> labels,
                            double threshold) {
  FoldMetrics f;
  f.name = name;
  f.n = scores.size();
  f.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  try {
    f.auc = roc_auc(scores, labels);
  } catch (const UndefinedMetricError&) {
    f.auc.reset();
  }
  f.confusion = confusion_metrics(scores, labels, threshold);
  return f;
}

std::optional<double> metric_value(const FoldMetrics& f, const std::string& metric) {
  if (metric == "auc") return f.auc;
  if (metric == "acc") return f.confusion.accuracy;
  if (metric == "specificity") return f.confusion.specificity;
  if (metric == "precision") return f.confusion.precision;
  if (metric == "recall") return f.confusion.recall;
  if (metric == "f1") return f.confusion.f1;
  throw ValidationError("unknown metric '" + metric + "'");
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  r.count = values.size();
  if (values.empty()) return r;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  r.mean = mean;
  r.std = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return r;
}

MetricsReport aggregate(std::span<const FoldMetrics> folds, double threshold) {
  MetricsReport report;
  report.threshold = threshold;
  report.folds.assign(folds.begin(), folds.end());
  for (const auto& metric : metric_names()) {
    std::vector<double> values;
    for (const auto& f : folds) {
      if (auto v = metric_value(f, metric)) values.push_back(*v);
    }
    report.summary[metric] = mean_std(values);
  }
  return report;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["threshold"] = report.threshold;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : report.folds) j["folds"].push_back(fold_json(f));
  j["aggregate"] = nlohmann::json::object();
  for (const auto& [metric, ms] : report.summary) {
    j["aggregate"][metric] = {{"mean", optional_json(ms.mean)}, {"std", optional_json(ms.std)}, {"count", ms.count}};
  }
  j["subgroups"] = nlohmann::json::object();
  for (const auto& [name, f] : report.subgroups) j["subgroups"][name] = fold_json(f);
  j["delong"] = nlohmann::json::array();
  for (const auto& c : report.delong) {
    j["delong"].push_back({{"name", c.name},
                           {"auc_a", c.result.auc_a},
                           {"auc_b", c.result.auc_b},
                           {"z", c.result.z},
                           {"p_value", c.result.p_value}});
  }
  return j;
}

std::string render_table(const MetricsReport& report) {
  std::ostringstream os;
  char buf[64];
  auto cell = [&](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    std::snprintf(buf, sizeof(buf), "%.3f", *v);
    return std::string(buf);
  };
  std::snprintf(buf, sizeof(buf), "%-16s", "");
  os << buf;
  for (const auto& m : metric_names()) {
    std::snprintf(buf, sizeof(buf), "%15s", m.c_str());
    os << buf;
  }
  os << '\n';
  auto row = [&](const FoldMetrics& f) {
    std::snprintf(buf, sizeof(buf), "%-16s", f.name.c_str());
    os << buf;
    for (const auto& m : metric_names()) {
      std::snprintf(buf, sizeof(buf), "%15s", cell(metric_value(f, m)).c_str());
      os << buf;
    }
    os << '\n';
  };
  for (const auto& f : report.folds) row(f);
  std::snprintf(buf, sizeof(buf), "%-16s", "mean+-std");
  os << buf;
  for (const auto& m : metric_names()) {
    const auto it = report.summary.find(m);
    std::string s = "undefined";
    if (it != report.summary.end() && it->second.mean) s = cell(it->second.mean) + "+-" + cell(it->second.std);
    std::snprintf(buf, sizeof(buf), "%15s", s.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& [name, f] : report.subgroups) row(f);
  for (const auto& c : report.delong) {
    std::snprintf(buf, sizeof(buf), "DeLong %s: AUC %.3f vs %.3f, p = %.4g\n", c.name.c_str(), c.result.auc_a,
                  c.result.auc_b, c.result.p_value);
    os << buf;
  }
  return os.str();
}

void write_scores(const std::filesystem::path& path, std::span<const ScoreRow> rows) {
  CsvTable table;
  table.header = {"image_id", "fold", "score_malignant", "label"};
  for (const auto& r : rows) {
    table.rows.push_back({r.image_id, std::to_string(r.fold), format_number(r.score), std::to_string(r.label)});
  }
  write_csv(path, table);
}

std::vector<ScoreRow> read_scores(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  const int id = table.column("image_id"), fold = table.column("fold"), score = table.column("score_malignant"),
            label = table.column("label");
  if (id < 0 || fold < 0 || score < 0 || label < 0) {
    throw ValidationError(path.string() + ": score table needs image_id,fold,score_malignant,label");
  }
  std::vector<ScoreRow> rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    ScoreRow s;
    s.image_id = row[static_cast<std::size_t>(id)];
    try {
      s.fold = static_cast<std::size_t>(std::stoul(row[static_cast<std::size_t>(fold)]));
      s.score = std::stod(row[static_cast<std::size_t>(score)]);
      s.label = std::stoi(row[static_cast<std::size_t>(label)]);
    } catch (const std::exception&) {
      throw ValidationError(path.string() + " row " + std::to_string(r + 1) + ": malformed number");
    }
    if (s.label != 0 && s.label != 1) {
      throw ValidationError(path.string() + " row " + std::to_string(r + 1) + ": label must be 0 or 1");
    }
    rows.push_back(std::move(s));
  }
  return rows;
}

std::map<std::string, FoldMetrics> subgroup_metrics(std::span<const ScoreRow> rows,
                                                    const std::map<std::string, std::string>& group_of,
                                                    double threshold) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> pooled;
  for (const auto& r : rows) {
    const auto it = group_of.find(r.image_id);
    if (it == group_of.end()) continue;
    auto& [scores, labels] = pooled[it->second];
    scores.push_back(r.score);
    labels.push_back(r.label);
  }
  std::map<std::string, FoldMetrics> out;
  for (const auto& [name, data] : pooled) out[name] = evaluate_scores(name, data.first, data.second, threshold);
  return out;
}

DeLongResult delong_tables(std::span<const ScoreRow> a, std::span<const ScoreRow> b) {
  std::map<std::string, const ScoreRow*> by_id;
  for (const auto& r : a) {
    if (!by_id.emplace(r.image_id, &r).second) throw ValidationError("duplicate image_id '" + r.image_id + "'");
  }
  if (a.size() != b.size()) throw ValidationError("score tables cover different image sets");
  std::vector<double> sa, sb;
  std::vector<int> labels;
  for (const auto& r : b) {
    const auto it = by_id.find(r.image_id);
    if (it == by_id.end()) throw ValidationError("image_id '" + r.image_id + "' missing from the first table");
    if (it->second->label != r.label) throw ValidationError("label mismatch for image_id '" + r.image_id + "'");
    sa.push_back(it->second->score);
    sb.push_back(r.score);
    labels.push_back(r.label);
    by_id.erase(it);
  }
  return delong_test(sa, sb, labels);
}

}  // namespace hovertrans
