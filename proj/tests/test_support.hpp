#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hovertrans/autograd.hpp"
#include "hovertrans/image.hpp"
#include "hovertrans/model.hpp"
#include "hovertrans/rng.hpp"

namespace hovertrans::testing {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hovertrans_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Tensor::Shape shape, Rng& rng, double stddev = 1.0) {
  return normal_tensor(std::move(shape), stddev, rng);
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  std::vector<char> out;
  if (!f) return out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) out.insert(out.end(), buf, buf + n);
  std::fclose(f);
  return out;
}

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t above_floor = 0;  // coordinates compared purely relatively
  double max_rel_error = 0.0;
  std::string worst;
};

// Finite-difference check of d loss / d param at sampled coordinates.
// loss() must rebuild the graph from the current parameter values. Relative
// error is |a - n| / max(|a|, |n|, floor): gradients that are exactly zero
// (e.g. attention key biases) would otherwise compare rounding noise of the
// difference quotient, about 1e-14 / h, against itself. The default step is
// small because training-mode batch norm over a batch of two makes the
// loss sharply curved in some weights.
inline GradCheckResult grad_check(const std::function<Var()>& loss,
                                  const std::vector<std::pair<std::string, Var>>& params,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& coords, double h = 3e-6,
                                  double floor = 1e-5) {
  for (auto [name, p] : params) p.zero_grad();
  backward(loss());
  std::vector<double> analytic;
  for (auto [pi, idx] : coords) analytic.push_back(params[pi].second.grad()[idx]);

  GradCheckResult r;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [pi, idx] = coords[k];
    Var p = params[pi].second;
    const double w = p.value()[idx];
    auto at = [&](double offset) {
      p.mutable_value()[idx] = w + offset;
      return loss().value()[0];
    };
    double numeric;
    {
      NoGradGuard g;
      // Five-point stencil, truncation error O(h^4).
      numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12.0 * h);
      p.mutable_value()[idx] = w;
    }
    const double rel = std::abs(analytic[k] - numeric) / std::max({std::abs(analytic[k]), std::abs(numeric), floor});
    ++r.checked;
    if (std::max(std::abs(analytic[k]), std::abs(numeric)) > floor) ++r.above_floor;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = params[pi].first + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic[k]) +
                " numeric " + std::to_string(numeric);
    }
  }
  return r;
}

// Every parameter tensor gets at least one coordinate; the rest are uniform
// over tensors until `total` coordinates are drawn.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_coords(
    const std::vector<std::pair<std::string, Var>>& params, std::size_t total, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.emplace_back(i, static_cast<std::size_t>(rng() % params[i].second.value().size()));
  }
  while (out.size() < total) {
    const auto i = static_cast<std::size_t>(rng() % params.size());
    out.emplace_back(i, static_cast<std::size_t>(rng() % params[i].second.value().size()));
  }
  return out;
}

inline std::vector<std::pair<std::string, Var>> named_params(HoverTransNet& model) {
  std::vector<std::pair<std::string, Var>> out;
  model.visit_params([&](const std::string& n, Var& v, ParamRole) { out.emplace_back(n, v); });
  return out;
}

// Copies every parameter of src whose name also exists in dst. Returns the count copied.
inline std::size_t copy_shared_params(HoverTransNet& src, HoverTransNet& dst) {
  auto from = named_params(src);
  std::size_t copied = 0;
  dst.visit_params([&](const std::string& n, Var& v, ParamRole) {
    for (auto& [name, var] : from) {
      if (name == n) {
        v.mutable_value() = var.value();
        ++copied;
      }
    }
  });
  return copied;
}

// Zeroes every parameter whose name contains one of the fragments.
inline void zero_params_matching(HoverTransNet& model, const std::vector<std::string>& fragments) {
  model.visit_params([&](const std::string& n, Var& v, ParamRole) {
    for (const auto& f : fragments) {
      if (n.find(f) != std::string::npos) v.mutable_value().fill(0.0);
    }
  });
}

inline Var random_images(std::size_t batch, std::size_t side, Rng& rng) {
  return Var::constant(normal_tensor({batch, side, side, 3}, 1.0, rng));
}

// Gray ramp rising left to right (by 100 levels) and top to bottom (by 80).
// Neither axis is symmetric, and no augmentation in range can invert a ramp.
inline Image orientation_fixture(std::size_t side) {
  Image img(side, side, 1);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      img.at(r, c) = static_cast<std::uint8_t>(30.0 + 100.0 * c / (side - 1) + 80.0 * r / (side - 1) + 0.5);
  return img;
}

struct Orientation {
  bool hflipped = false;
  bool vflipped = false;
};

// Reads the ramp directions of an (augmented) orientation fixture.
inline Orientation read_orientation(const Image& img) {
  double left = 0, right = 0, top = 0, bottom = 0;
  const std::size_t h = img.height, w = img.width;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double v = img.at(r, c);
      (c < w / 2 ? left : right) += v;
      (r < h / 2 ? top : bottom) += v;
    }
  return {left > right, top > bottom};
}

// O(n+ n-) pair count: wins + ties / 2 over all positive-negative pairs.
inline double brute_force_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// Two-sided p of the paired AUC difference with its standard error taken
// from a class-stratified paired bootstrap.
inline double bootstrap_auc_p(const std::vector<double>& a, const std::vector<double>& b,
                              const std::vector<int>& labels, std::size_t resamples, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  Rng rng(seed);
  std::vector<double> diffs;
  std::vector<double> sa, sb;
  std::vector<int> sl;
  for (std::size_t r = 0; r < resamples; ++r) {
    sa.clear();
    sb.clear();
    sl.clear();
    for (const auto* group : {&pos, &neg}) {
      std::uniform_int_distribution<std::size_t> pick(0, group->size() - 1);
      for (std::size_t k = 0; k < group->size(); ++k) {
        const std::size_t i = (*group)[pick(rng)];
        sa.push_back(a[i]);
        sb.push_back(b[i]);
        sl.push_back(labels[i]);
      }
    }
    diffs.push_back(brute_force_auc(sa, sl) - brute_force_auc(sb, sl));
  }
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= static_cast<double>(diffs.size() - 1);
  const double z = (brute_force_auc(a, labels) - brute_force_auc(b, labels)) / std::sqrt(var);
  return std::erfc(std::abs(z) / std::sqrt(2.0));
}

struct PairedScores {
  std::vector<double> a, b;
  std::vector<int> labels;
};

// Two correlated classifiers of similar strength over n cases.
inline PairedScores paired_scores(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  PairedScores s;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double shared = z(rng);
    s.labels.push_back(y);
    s.a.push_back(1.0 * y + shared + 0.7 * z(rng));
    s.b.push_back(0.8 * y + shared + 0.7 * z(rng));
  }
  return s;
}

}  // namespace hovertrans::testing
