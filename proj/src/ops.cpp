#include "hovertrans/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hovertrans/error.hpp"

namespace hovertrans::ops {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
  }
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Var::from_op(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& in = parent(n, p);
      if (!in.requires_grad) continue;
      Tensor& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var add_broadcast(const Var& x, const Var& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<long>(bs.size()))) {
    throw ShapeError("add_broadcast: " + shape_string(bs) + " is not a suffix of " + shape_string(xs));
  }
  Tensor out = x.value();
  const std::size_t block = b.value().size();
  const std::size_t reps = block ? out.size() / block : 0;
  for (std::size_t r = 0; r < reps; ++r) {
    double* o = out.data() + r * block;
    for (std::size_t i = 0; i < block; ++i) o[i] += b.value()[i];
  }
  return Var::from_op(std::move(out), {x, b}, [block, reps](Node& n) {
    Node& xn = parent(n, 0);
    Node& bn = parent(n, 1);
    if (xn.requires_grad) {
      Tensor& g = xn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (bn.requires_grad) {
      Tensor& g = bn.grad_buffer();
      for (std::size_t r = 0; r < reps; ++r) {
        const double* src = n.grad.data() + r * block;
        for (std::size_t i = 0; i < block; ++i) g[i] += src[i];
      }
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= factor;
  return Var::from_op(std::move(out), {x}, [factor](Node& n) {
    Tensor& g = parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * n.grad[i];
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(weight, 2, "linear");
  const std::size_t in = weight.dim(0);
  const std::size_t out_dim = weight.dim(1);
  if (x.value().rank() == 0 || x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not end in " + std::to_string(in));
  }
  if (bias && (bias.value().rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias shape " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.value().size() / in;
  Tensor::Shape shape = x.shape();
  shape.back() = out_dim;
  Tensor out(shape, 0.0);
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * out_dim;
    if (bias) std::copy_n(bias.value().data(), out_dim, o);
    const double* xr = xv + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double a = xr[i];
      if (a == 0.0) continue;
      const double* w = wv + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += a * w[j];
    }
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return Var::from_op(std::move(out), std::move(parents), [rows, in, out_dim, has_bias](Node& n) {
    Node& xn = parent(n, 0);
    Node& wn = parent(n, 1);
    const double* gy = n.grad.data();
    if (xn.requires_grad) {
      double* gx = xn.grad_buffer().data();
      const double* w = wn.value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gyr = gy + r * out_dim;
        double* gxr = gx + r * in;
        for (std::size_t i = 0; i < in; ++i) {
          const double* wr = w + i * out_dim;
          double s = 0.0;
          for (std::size_t j = 0; j < out_dim; ++j) s += gyr[j] * wr[j];
          gxr[i] += s;
        }
      }
    }
    if (wn.requires_grad) {
      double* gw = wn.grad_buffer().data();
      const double* xv = xn.value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gyr = gy + r * out_dim;
        const double* xr = xv + r * in;
        for (std::size_t i = 0; i < in; ++i) {
          const double a = xr[i];
          if (a == 0.0) continue;
          double* gwr = gw + i * out_dim;
          for (std::size_t j = 0; j < out_dim; ++j) gwr[j] += a * gyr[j];
        }
      }
    }
    if (has_bias && parent(n, 2).requires_grad) {
      double* gb = parent(n, 2).grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gyr = gy + r * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += gyr[j];
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& scale, const Var& shift, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (scale.value().size() != d || shift.value().size() != d) {
    throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(d));
  }
  const std::size_t rows = x.value().size() / d;
  Tensor out(x.shape());
  Tensor normalized(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* nr = normalized.data() + r * d;
    double* o = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      nr[i] = (xr[i] - mean) * is;
      o[i] = nr[i] * scale.value()[i] + shift.value()[i];
    }
  }
  return Var::from_op(
      std::move(out), {x, scale, shift},
      [rows, d, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& n) {
        Node& xn = parent(n, 0);
        Node& sn = parent(n, 1);
        Node& bn = parent(n, 2);
        const double* gy = n.grad.data();
        if (sn.requires_grad || bn.requires_grad) {
          Tensor& gs = sn.grad_buffer();
          Tensor& gb = bn.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              gs[i] += gy[r * d + i] * normalized[r * d + i];
              gb[i] += gy[r * d + i];
            }
          }
        }
        if (xn.requires_grad) {
          double* gx = xn.grad_buffer().data();
          const double* s = sn.value.data();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* nr = normalized.data() + r * d;
            double sum = 0.0;
            double sum_n = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
              const double g = gy[r * d + i] * s[i];
              sum += g;
              sum_n += g * nr[i];
            }
            for (std::size_t i = 0; i < d; ++i) {
              const double g = gy[r * d + i] * s[i];
              gx[r * d + i] += inv_std[r] * (g - inv_d * sum - nr[i] * inv_d * sum_n);
            }
          }
        }
      });
}

Var gelu(const Var& x) {
  Tensor out(x.shape());
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return Var::from_op(std::move(out), {x}, [inv_sqrt2](Node& n) {
    Node& xn = parent(n, 0);
    Tensor& g = xn.grad_buffer();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.value()[i]);
  return Var::from_op(std::move(out), {x}, [](Node& n) {
    Node& xn = parent(n, 0);
    Tensor& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn.value[i] > 0.0) g[i] += n.grad[i];
    }
  });
}

Var attention(const Var& query, const Var& key, const Var& value, std::size_t heads) {
  require_rank(query, 3, "attention");
  require_same_shape(query, key, "attention");
  require_same_shape(query, value, "attention");
  const std::size_t batch = query.dim(0);
  const std::size_t tokens = query.dim(1);
  const std::size_t d = query.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool keep = grad_enabled() &&
                    (query.requires_grad() || key.requires_grad() || value.requires_grad());

  Tensor out(query.shape(), 0.0);
  Tensor probs;
  if (keep) probs = Tensor({batch, heads, tokens, tokens});
  std::vector<double> row(tokens);
  const double* q = query.value().data();
  const double* k = key.value().data();
  const double* v = value.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * tokens * d;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < tokens; ++i) {
        const double* qi = q + base + i * d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* kj = k + base + j * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] = std::exp(row[j] - mx);
          denom += row[j];
        }
        double* oi = out.data() + base + i * d + off;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double p = row[j] / denom;
          row[j] = p;
          const double* vj = v + base + j * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
        if (keep) std::copy(row.begin(), row.end(), probs.data() + ((b * heads + h) * tokens + i) * tokens);
      }
    }
  }
  if (!keep) return Var::constant(std::move(out));
  return Var::from_op(
      std::move(out), {query, key, value},
      [batch, tokens, d, heads, dh, scale, probs = std::move(probs)](Node& n) {
        Node& qn = parent(n, 0);
        Node& kn = parent(n, 1);
        Node& vn = parent(n, 2);
        double* gq = qn.requires_grad ? qn.grad_buffer().data() : nullptr;
        double* gk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
        double* gv = vn.requires_grad ? vn.grad_buffer().data() : nullptr;
        const double* q = qn.value.data();
        const double* k = kn.value.data();
        const double* v = vn.value.data();
        const double* go = n.grad.data();
        std::vector<double> dp(tokens);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * tokens * d;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < tokens; ++i) {
              const double* p = probs.data() + ((b * heads + h) * tokens + i) * tokens;
              const double* goi = go + base + i * d + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < tokens; ++j) {
                const double* vj = v + base + j * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += goi[c] * vj[c];
                dp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* gvj = gv + base + j * d + off;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * goi[c];
                }
              }
              const double* qi = q + base + i * d + off;
              double* gqi = gq ? gq + base + i * d + off : nullptr;
              for (std::size_t j = 0; j < tokens; ++j) {
                const double ds = p[j] * (dp[j] - dot) * scale;
                if (ds == 0.0) continue;
                const double* kj = k + base + j * d + off;
                if (gqi) {
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + base + j * d + off;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const std::size_t batch = x.dim(0), height = x.dim(1), width = x.dim(2), cin = x.dim(3);
  const std::size_t kh = weight.dim(0), kw = weight.dim(1), cout = weight.dim(3);
  if (weight.dim(2) != cin) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(2)) + " input channels, got " +
                     std::to_string(cin));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (height + 2 * padding < kh || width + 2 * padding < kw) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t oh = (height + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (width + 2 * padding - kw) / stride + 1;
  Tensor out({batch, oh, ow, cout}, 0.0);
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double* o = out.data() + ((b * oh + oy) * ow + ox) * cout;
        if (bias) std::copy_n(bias.value().data(), cout, o);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(width)) continue;
            const double* xi = xv + ((b * height + static_cast<std::size_t>(iy)) * width + static_cast<std::size_t>(ix)) * cin;
            const double* w = wv + (ky * kw + kx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double a = xi[ci];
              if (a == 0.0) continue;
              const double* wr = w + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) o[co] += a * wr[co];
            }
          }
        }
      }
    }
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return Var::from_op(std::move(out), std::move(parents), [=](Node& n) {
    Node& xn = parent(n, 0);
    Node& wn = parent(n, 1);
    double* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    double* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
    double* gb = has_bias && parent(n, 2).requires_grad ? parent(n, 2).grad_buffer().data() : nullptr;
    const double* xv = xn.value.data();
    const double* wv = wn.value.data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double* go = n.grad.data() + ((b * oh + oy) * ow + ox) * cout;
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co) gb[co] += go[co];
          }
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(height)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(width)) continue;
              const std::size_t xoff =
                  ((b * height + static_cast<std::size_t>(iy)) * width + static_cast<std::size_t>(ix)) * cin;
              const std::size_t woff = (ky * kw + kx) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* wr = wv + woff + ci * cout;
                if (gx) {
                  double s = 0.0;
                  for (std::size_t co = 0; co < cout; ++co) s += go[co] * wr[co];
                  gx[xoff + ci] += s;
                }
                if (gw) {
                  const double a = xv[xoff + ci];
                  if (a == 0.0) continue;
                  double* gwr = gw + woff + ci * cout;
                  for (std::size_t co = 0; co < cout; ++co) gwr[co] += a * go[co];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& scale, const Var& shift, BatchNormStats& stats, bool training,
               double momentum, double eps) {
  require_rank(x, 4, "batch_norm");
  const std::size_t c = x.dim(3);
  const std::size_t count = x.value().size() / c;
  if (scale.value().size() != c || shift.value().size() != c || stats.running_mean.size() != c ||
      stats.running_var.size() != c) {
    throw ShapeError("batch_norm: parameters must have " + std::to_string(c) + " channels");
  }
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const double* xv = x.value().data();
  if (training) {
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t i = 0; i < c; ++i) mean[i] += xv[r * c + i];
    }
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t i = 0; i < c; ++i) {
        const double dv = xv[r * c + i] - mean[i];
        var[i] += dv * dv;
      }
    }
    for (auto& v : var) v /= static_cast<double>(count);
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    for (std::size_t i = 0; i < c; ++i) {
      stats.running_mean[i] = (1.0 - momentum) * stats.running_mean[i] + momentum * mean[i];
      stats.running_var[i] = (1.0 - momentum) * stats.running_var[i] + momentum * var[i] * unbias;
    }
  } else {
    for (std::size_t i = 0; i < c; ++i) {
      mean[i] = stats.running_mean[i];
      var[i] = stats.running_var[i];
    }
  }
  std::vector<double> inv_std(c);
  for (std::size_t i = 0; i < c; ++i) inv_std[i] = 1.0 / std::sqrt(var[i] + eps);
  Tensor normalized(x.shape());
  Tensor out(x.shape());
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t i = 0; i < c; ++i) {
      const double nv = (xv[r * c + i] - mean[i]) * inv_std[i];
      normalized[r * c + i] = nv;
      out[r * c + i] = nv * scale.value()[i] + shift.value()[i];
    }
  }
  return Var::from_op(
      std::move(out), {x, scale, shift},
      [c, count, training, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& n) {
        Node& xn = parent(n, 0);
        Node& sn = parent(n, 1);
        Node& bn = parent(n, 2);
        const double* gy = n.grad.data();
        std::vector<double> sum(c, 0.0), sum_n(c, 0.0);
        for (std::size_t r = 0; r < count; ++r) {
          for (std::size_t i = 0; i < c; ++i) {
            sum[i] += gy[r * c + i];
            sum_n[i] += gy[r * c + i] * normalized[r * c + i];
          }
        }
        if (sn.requires_grad) {
          Tensor& gs = sn.grad_buffer();
          for (std::size_t i = 0; i < c; ++i) gs[i] += sum_n[i];
        }
        if (bn.requires_grad) {
          Tensor& gb = bn.grad_buffer();
          for (std::size_t i = 0; i < c; ++i) gb[i] += sum[i];
        }
        if (!xn.requires_grad) return;
        double* gx = xn.grad_buffer().data();
        const double* s = sn.value.data();
        const double inv_n = 1.0 / static_cast<double>(count);
        for (std::size_t r = 0; r < count; ++r) {
          for (std::size_t i = 0; i < c; ++i) {
            const double g = gy[r * c + i];
            if (training) {
              gx[r * c + i] +=
                  s[i] * inv_std[i] * (g - inv_n * sum[i] - normalized[r * c + i] * inv_n * sum_n[i]);
            } else {
              gx[r * c + i] += s[i] * inv_std[i] * g;
            }
          }
        }
      });
}

Var avg_pool2(const Var& x) {
  require_rank(x, 4, "avg_pool2");
  const std::size_t batch = x.dim(0), height = x.dim(1), width = x.dim(2), c = x.dim(3);
  if (height % 2 || width % 2) {
    throw ConfigError("pool2: spatial size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not even");
  }
  const std::size_t oh = height / 2, ow = width / 2;
  Tensor out({batch, oh, ow, c}, 0.0);
  const double* xv = x.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double* o = out.data() + ((b * oh + y) * ow + xx) * c;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const double* in = xv + ((b * height + 2 * y + dy) * width + 2 * xx + dx) * c;
            for (std::size_t i = 0; i < c; ++i) o[i] += 0.25 * in[i];
          }
        }
      }
    }
  }
  return Var::from_op(std::move(out), {x}, [=](Node& n) {
    double* g = parent(n, 0).grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double* go = n.grad.data() + ((b * oh + y) * ow + xx) * c;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              double* gi = g + ((b * height + 2 * y + dy) * width + 2 * xx + dx) * c;
              for (std::size_t i = 0; i < c; ++i) gi[i] += 0.25 * go[i];
            }
          }
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t batch = x.dim(0), c = x.dim(3);
  const std::size_t spatial = x.dim(1) * x.dim(2);
  Tensor out({batch, c}, 0.0);
  const double inv = 1.0 / static_cast<double>(spatial);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const double* in = x.value().data() + (b * spatial + s) * c;
      for (std::size_t i = 0; i < c; ++i) out[b * c + i] += inv * in[i];
    }
  }
  return Var::from_op(std::move(out), {x}, [=](Node& n) {
    double* g = parent(n, 0).grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < spatial; ++s) {
        for (std::size_t i = 0; i < c; ++i) g[(b * spatial + s) * c + i] += inv * n.grad[b * c + i];
      }
    }
  });
}

Var concat_last(const Var& a, const Var& b) {
  auto sa = a.shape();
  auto sb = b.shape();
  if (sa.size() != sb.size() || sa.empty() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw ShapeError("concat_last: " + shape_string(sa) + " vs " + shape_string(sb));
  }
  const std::size_t ca = sa.back(), cb = sb.back();
  const std::size_t rows = a.value().size() / ca;
  auto shape = sa;
  shape.back() = ca + cb;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.value().data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  return Var::from_op(std::move(out), {a, b}, [rows, ca, cb](Node& n) {
    Node& an = parent(n, 0);
    Node& bn = parent(n, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = n.grad.data() + r * (ca + cb);
      if (an.requires_grad) {
        double* ga = an.grad_buffer().data() + r * ca;
        for (std::size_t i = 0; i < ca; ++i) ga[i] += g[i];
      }
      if (bn.requires_grad) {
        double* gb = bn.grad_buffer().data() + r * cb;
        for (std::size_t i = 0; i < cb; ++i) gb[i] += g[ca + i];
      }
    }
  });
}

Var reshape(const Var& x, Tensor::Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::from_op(std::move(out), {x}, [](Node& n) {
    Tensor& g = parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var remap(const Var& x, const RemapPlan& plan) {
  if (x.value().rank() == 0 || plan.in_size == 0 || x.value().size() % plan.in_size != 0 ||
      x.value().size() / x.dim(0) != plan.in_size) {
    throw ShapeError("remap: input " + shape_string(x.shape()) + " does not hold samples of " +
                     std::to_string(plan.in_size) + " elements");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t out_size = shape_size(plan.out_shape);
  if (plan.offsets.size() != out_size + 1) throw ShapeError("remap: malformed plan");
  Tensor::Shape shape{batch};
  shape.insert(shape.end(), plan.out_shape.begin(), plan.out_shape.end());
  Tensor out(shape, 0.0);
  const bool weighted = !plan.weights.empty();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* in = x.value().data() + b * plan.in_size;
    double* o = out.data() + b * out_size;
    for (std::size_t i = 0; i < out_size; ++i) {
      double s = 0.0;
      for (std::size_t k = plan.offsets[i]; k < plan.offsets[i + 1]; ++k) {
        s += (weighted ? plan.weights[k] : 1.0) * in[plan.sources[k]];
      }
      o[i] = s;
    }
  }
  return Var::from_op(std::move(out), {x}, [plan, batch, out_size, weighted](Node& n) {
    double* g = parent(n, 0).grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b) {
      double* gi = g + b * plan.in_size;
      const double* go = n.grad.data() + b * out_size;
      for (std::size_t i = 0; i < out_size; ++i) {
        for (std::size_t k = plan.offsets[i]; k < plan.offsets[i + 1]; ++k) {
          gi[plan.sources[k]] += (weighted ? plan.weights[k] : 1.0) * go[i];
        }
      }
    }
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  if (weights.shape() != x.shape()) throw ShapeError("weighted_sum: weight shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.value()[i];
  return Var::from_op(Tensor({}, std::vector<double>{s}), {x}, [weights](Node& n) {
    Tensor& g = parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * weights[i];
  });
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows: expected (B, K) logits");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = logits.data() + r * k;
    const double mx = *std::max_element(l, l + k);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(l[i] - mx);
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] = std::exp(l[i] - mx) / denom;
  }
  return out;
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy: label count does not match batch");
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor probs = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const double* l = logits.value().data() + r * k;
    const double mx = *std::max_element(l, l + k);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(l[i] - mx);
    loss += std::log(denom) + mx - l[lab[r]];
  }
  loss /= static_cast<double>(batch);
  return Var::from_op(Tensor({}, std::vector<double>{loss}), {logits},
                      [probs = std::move(probs), lab = std::move(lab), batch, k](Node& n) {
                        double* g = parent(n, 0).grad_buffer().data();
                        const double scale = n.grad[0] / static_cast<double>(batch);
                        for (std::size_t r = 0; r < batch; ++r) {
                          for (std::size_t i = 0; i < k; ++i) {
                            const double target = static_cast<std::size_t>(lab[r]) == i ? 1.0 : 0.0;
                            g[r * k + i] += scale * (probs[r * k + i] - target);
                          }
                        }
                      });
}

}  // namespace hovertrans::ops
