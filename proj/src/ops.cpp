#include "cfm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "cfm/error.hpp"
#include "cfm/kernels.hpp"

namespace cfm::ops {

namespace {

using detail::ImplPtr;
using detail::record_op;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_2d(const Tensor& x, const char* op) {
  if (x.ndim() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

// Gradient buffer of an input, or nullptr when it takes no gradient.
float* grad_of(const ImplPtr& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

Tensor like(const Tensor& x) { return Tensor::zeros(x.shape()); }

// Decomposes a shape around an axis: outer × n × inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, n, k, {a.data().data(), k}, {b.data().data(), n}, {out.data_mut().data(), n}, false);
  record_op("matmul", out, {&a, &b}, [pa = a.impl(), pb = b.impl(), po = out.impl(), m, k, n] {
    const float* g = po->grad.data();
    if (float* ga = grad_of(pa)) kernels::gemm_nt(m, k, n, {g, n}, {pb->data.data(), n}, {ga, k}, true);
    if (float* gb = grad_of(pb)) kernels::gemm_tn(k, n, m, {pa->data.data(), k}, {g, n}, {gb, n}, true);
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  auto src = x.data();
  auto dst = out.data_mut();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  record_op("transpose", out, {&x}, [px = x.impl(), po = out.impl(), r, c] {
    if (float* gx = grad_of(px)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += po->grad[j * r + i];
    }
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  record_op("reshape", out, {&x}, [px = x.impl(), po = out.impl()] {
    if (float* gx = grad_of(px)) {
      for (std::size_t i = 0; i < po->grad.size(); ++i) gx[i] += po->grad[i];
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = like(a);
  auto o = out.data_mut();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  record_op("add", out, {&a, &b}, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
    const auto& g = po->grad;
    if (float* ga = grad_of(pa)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (float* gb = grad_of(pb)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = like(a);
  auto o = out.data_mut();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  record_op("sub", out, {&a, &b}, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
    const auto& g = po->grad;
    if (float* ga = grad_of(pa)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (float* gb = grad_of(pb)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = like(a);
  auto o = out.data_mut();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  record_op("mul", out, {&a, &b}, [pa = a.impl(), pb = b.impl(), po = out.impl()] {
    const auto& g = po->grad;
    if (float* ga = grad_of(pa)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->data[i];
    if (float* gb = grad_of(pb)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->data[i];
  });
  return out;
}

Tensor scale(const Tensor& x, float factor) {
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * factor;
  record_op("scale", out, {&x}, [px = x.impl(), po = out.impl(), factor] {
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < po->grad.size(); ++i) gx[i] += po->grad[i] * factor;
  });
  return out;
}

Tensor add_scalar(const Tensor& x, float value) {
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] + value;
  record_op("add_scalar", out, {&x}, [px = x.impl(), po = out.impl()] {
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < po->grad.size(); ++i) gx[i] += po->grad[i];
  });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t d = x.cols();
  if (bias.numel() != d) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " for rows of width " + std::to_string(d));
  }
  const std::size_t n = x.rows();
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = v[i * d + j] + bv[j];
  record_op("add_bias", out, {&x, &bias}, [px = x.impl(), pb = bias.impl(), po = out.impl(), n, d] {
    const auto& g = po->grad;
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (float* gb = grad_of(pb)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    }
  });
  return out;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scale must have one element, got " + shape_str(s.shape()));
  const float sv = s.data()[0];
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * sv;
  record_op("mul_scalar", out, {&x, &s}, [px = x.impl(), ps = s.impl(), po = out.impl()] {
    const auto& g = po->grad;
    const float sval = ps->data[0];
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sval;
    if (float* gs = grad_of(ps)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * px->data[i];
      gs[0] += static_cast<float>(acc);
    }
  });
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(v[i]);
  record_op("exp", out, {&x}, [px = x.impl(), po = out.impl()] {
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < po->grad.size(); ++i) gx[i] += po->grad[i] * po->data[i];
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  record_op("sum", out, {&x}, [px = x.impl(), po = out.impl()] {
    if (float* gx = grad_of(px)) {
      const float g = po->grad[0];
      for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += g;
    }
  });
  return out;
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(static_cast<float>(acc / n));
  record_op("mean", out, {&x}, [px = x.impl(), po = out.impl(), n] {
    if (float* gx = grad_of(px)) {
      const float g = static_cast<float>(po->grad[0] / n);
      for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += g;
    }
  });
  return out;
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n});
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += v[i * d + j];
    o[i] = static_cast<float>(acc);
  }
  record_op("sum_last", out, {&x}, [px = x.impl(), po = out.impl(), n, d] {
    if (float* gx = grad_of(px)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += po->grad[i];
    }
  });
  return out;
}

Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets) {
  if (offsets.size() < 2) throw ContractError("segment_mean: need at least one segment");
  const std::size_t d = x.cols();
  const std::size_t segs = offsets.size() - 1;
  if (offsets.front() != 0 || offsets.back() != x.rows()) {
    throw ShapeError("segment_mean: offsets do not cover the rows of " + shape_str(x.shape()));
  }
  for (std::size_t s = 0; s < segs; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ContractError("segment_mean: empty segment");
  }
  Tensor out = Tensor::zeros({segs, d});
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t s = 0; s < segs; ++s) {
    const double inv = 1.0 / static_cast<double>(offsets[s + 1] - offsets[s]);
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) acc += v[r * d + j];
      o[s * d + j] = static_cast<float>(acc * inv);
    }
  }
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  record_op("segment_mean", out, {&x}, [px = x.impl(), po = out.impl(), offs = std::move(offs), d] {
    if (float* gx = grad_of(px)) {
      for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
        const float inv = 1.0f / static_cast<float>(offs[s + 1] - offs[s]);
        for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += po->grad[s * d + j] * inv;
      }
    }
  });
  return out;
}

Tensor mean_pool(const Tensor& x) {
  const std::size_t offs[2] = {0, x.rows()};
  return segment_mean(x, offs);
}

namespace {

template <bool Log>
Tensor softmax_impl(const Tensor& x, std::size_t axis, std::string_view name) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  if (!Log && s.inner == 1) {
    kernels::softmax_rows(v, o, s.outer, s.n);
  } else {
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.n * s.inner + c;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, v[base + i * s.inner]);
        double total = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) total += std::exp(static_cast<double>(v[base + i * s.inner] - mx));
        if constexpr (Log) {
          const float lse = mx + static_cast<float>(std::log(total));
          for (std::size_t i = 0; i < s.n; ++i) o[base + i * s.inner] = v[base + i * s.inner] - lse;
        } else {
          for (std::size_t i = 0; i < s.n; ++i) {
            o[base + i * s.inner] = static_cast<float>(std::exp(static_cast<double>(v[base + i * s.inner] - mx)) / total);
          }
        }
      }
    }
  }
  record_op(name, out, {&x}, [px = x.impl(), po = out.impl(), s] {
    float* gx = grad_of(px);
    if (!gx) return;
    const auto& g = po->grad;
    const auto& y = po->data;
    for (std::size_t a = 0; a < s.outer; ++a) {
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.n * s.inner + c;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          if constexpr (Log) dot += g[k];
          else dot += static_cast<double>(g[k]) * y[k];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          if constexpr (Log) gx[k] += g[k] - std::exp(y[k]) * static_cast<float>(dot);
          else gx[k] += y[k] * (g[k] - static_cast<float>(dot));
        }
      }
    }
  });
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) { return softmax_impl<false>(x, axis, "softmax"); }

Tensor log_softmax(const Tensor& x, std::size_t axis) { return softmax_impl<true>(x, axis, "log_softmax"); }

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t n = x.rows(), c = x.cols();
  if (index.size() != n) throw ShapeError("pick: one index per row required");
  for (auto i : index) {
    if (i >= c) throw ShapeError("pick: index " + std::to_string(i) + " out of range " + std::to_string(c));
  }
  Tensor out = Tensor::zeros({n});
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < n; ++i) o[i] = v[i * c + index[i]];
  std::vector<std::size_t> idx(index.begin(), index.end());
  record_op("pick", out, {&x}, [px = x.impl(), po = out.impl(), idx = std::move(idx), c] {
    if (float* gx = grad_of(px)) {
      for (std::size_t i = 0; i < idx.size(); ++i) gx[i * c + idx[i]] += po->grad[i];
    }
  });
  return out;
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out = like(x);
  std::vector<float> norms(n);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(v[i * d + j]) * v[i * d + j];
    const double norm = std::sqrt(ss);
    if (!(norm > kNormEpsilon)) {
      throw DegenerateNormError("l2_normalize: row " + std::to_string(i) + " has norm " + std::to_string(norm));
    }
    norms[i] = static_cast<float>(norm);
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = static_cast<float>(v[i * d + j] / norm);
  }
  record_op("l2_normalize", out, {&x}, [px = x.impl(), po = out.impl(), norms = std::move(norms), n, d] {
    float* gx = grad_of(px);
    if (!gx) return;
    for (std::size_t i = 0; i < n; ++i) {
      const float* y = po->data.data() + i * d;
      const float* g = po->grad.data() + i * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(y[j]) * g[j];
      const float inv = 1.0f / norms[i];
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (g[j] - y[j] * static_cast<float>(dot)) * inv;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine parameters must have width " + std::to_string(d));
  Tensor out = like(x);
  std::vector<float> xhat(n * d);
  std::vector<float> inv_std(n);
  auto o = out.data_mut();
  auto v = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += v[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = v[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<float>(is);
    for (std::size_t j = 0; j < d; ++j) {
      const float xh = static_cast<float>((v[i * d + j] - mu) * is);
      xhat[i * d + j] = xh;
      o[i * d + j] = xh * gm[j] + bt[j];
    }
  }
  record_op("layer_norm", out, {&x, &gamma, &beta},
            [px = x.impl(), pg = gamma.impl(), pb = beta.impl(), po = out.impl(), xhat = std::move(xhat),
             inv_std = std::move(inv_std), n, d] {
              const auto& g = po->grad;
              if (float* gg = grad_of(pg)) {
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
              }
              if (float* gb = grad_of(pb)) {
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
              }
              if (float* gx = grad_of(px)) {
                const auto& gm = pg->data;
                for (std::size_t i = 0; i < n; ++i) {
                  double m1 = 0.0, m2 = 0.0;
                  for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = static_cast<double>(g[i * d + j]) * gm[j];
                    m1 += dxh;
                    m2 += dxh * xhat[i * d + j];
                  }
                  m1 /= static_cast<double>(d);
                  m2 /= static_cast<double>(d);
                  for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = static_cast<double>(g[i * d + j]) * gm[j];
                    gx[i * d + j] += static_cast<float>(inv_std[i] * (dxh - m1 - xhat[i * d + j] * m2));
                  }
                }
              }
            });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  constexpr float kInvSqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5f * v[i] * (1.0f + std::erf(v[i] * kInvSqrt2));
  record_op("gelu", out, {&x}, [px = x.impl(), po = out.impl()] {
    float* gx = grad_of(px);
    if (!gx) return;
    constexpr float kInvSqrt2Pi = static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < po->grad.size(); ++i) {
      const float xv = px->data[i];
      const float cdf = 0.5f * (1.0f + std::erf(xv * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * xv * xv);
      gx[i] += po->grad[i] * (cdf + xv * pdf);
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  if (index.empty()) throw ContractError("gather_rows: empty index set");
  const std::size_t n = x.rows(), d = x.cols();
  for (auto i : index) {
    if (i >= n) throw ShapeError("gather_rows: row " + std::to_string(i) + " out of range " + std::to_string(n));
  }
  Tensor out = Tensor::zeros({index.size(), d});
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t k = 0; k < index.size(); ++k) std::copy_n(v.data() + index[k] * d, d, o.data() + k * d);
  std::vector<std::size_t> idx(index.begin(), index.end());
  record_op("gather_rows", out, {&x}, [px = x.impl(), po = out.impl(), idx = std::move(idx), d] {
    if (float* gx = grad_of(px)) {
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < d; ++j) gx[idx[k] * d + j] += po->grad[k * d + j];
    }
  });
  return out;
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t total) {
  const std::size_t d = x.cols();
  if (index.size() != x.rows()) throw ShapeError("scatter_rows: one index per row required");
  std::vector<char> seen(total, 0);
  for (auto i : index) {
    if (i >= total) throw ShapeError("scatter_rows: row " + std::to_string(i) + " out of range " + std::to_string(total));
    if (seen[i]) throw ContractError("scatter_rows: duplicate target row " + std::to_string(i));
    seen[i] = 1;
  }
  Tensor out = Tensor::zeros({total, d});
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t k = 0; k < index.size(); ++k) std::copy_n(v.data() + k * d, d, o.data() + index[k] * d);
  std::vector<std::size_t> idx(index.begin(), index.end());
  record_op("scatter_rows", out, {&x}, [px = x.impl(), po = out.impl(), idx = std::move(idx), d] {
    if (float* gx = grad_of(px)) {
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t j = 0; j < d; ++j) gx[k * d + j] += po->grad[idx[k] * d + j];
    }
  });
  return out;
}

Tensor apply_mask(const Tensor& x, std::span<const float> mask) {
  if (mask.size() != x.numel()) throw ShapeError("apply_mask: mask size mismatch");
  Tensor out = like(x);
  auto o = out.data_mut();
  auto v = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] * mask[i];
  std::vector<float> m(mask.begin(), mask.end());
  record_op("apply_mask", out, {&x}, [px = x.impl(), po = out.impl(), m = std::move(m)] {
    if (float* gx = grad_of(px)) for (std::size_t i = 0; i < m.size(); ++i) gx[i] += po->grad[i] * m[i];
  });
  return out;
}

namespace {
thread_local StopGradientFreeze* g_sg_freeze = nullptr;
}  // namespace

StopGradientFreeze::StopGradientFreeze() : previous_(g_sg_freeze) { g_sg_freeze = this; }
StopGradientFreeze::~StopGradientFreeze() { g_sg_freeze = previous_; }

void StopGradientFreeze::replay() {
  replaying_ = true;
  cursor_ = 0;
}

Tensor StopGradientFreeze::next(const Tensor& x) {
  if (!replaying_) {
    values_.push_back(x.clone());
    return values_.back().clone();
  }
  if (cursor_ >= values_.size() || values_[cursor_].shape() != x.shape()) {
    throw ContractError("stop_gradient replay diverged from the recorded computation");
  }
  return values_[cursor_++].clone();
}

Tensor stop_gradient(const Tensor& x) { return g_sg_freeze ? g_sg_freeze->next(x) : x.clone(); }

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::size_t> offsets, std::size_t heads, bool causal) {
  require_2d(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t w = q.dim(1);
  if (heads == 0 || w % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != q.dim(0)) {
    throw ShapeError("attention: segment offsets do not cover the rows");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ContractError("attention: empty segment");
  }
  auto offs = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  const kernels::AttentionShape shape{*offs, w, heads, causal};
  auto probs = std::make_shared<std::vector<float>>(kernels::attention_probs_size(shape));
  Tensor out = like(q);
  kernels::attention_forward(shape, q.data(), k.data(), v.data(), *probs, out.data_mut());
  record_op("attention", out, {&q, &k, &v},
            [pq = q.impl(), pk = k.impl(), pv = v.impl(), po = out.impl(), offs, probs, w, heads, causal] {
              const kernels::AttentionShape sh{*offs, w, heads, causal};
              std::vector<float> dq(pq->data.size()), dk(pk->data.size()), dv(pv->data.size());
              kernels::attention_backward(sh, pq->data, pk->data, pv->data, *probs, po->grad, dq, dk, dv);
              if (float* g = grad_of(pq)) for (std::size_t i = 0; i < dq.size(); ++i) g[i] += dq[i];
              if (float* g = grad_of(pk)) for (std::size_t i = 0; i < dk.size(); ++i) g[i] += dk[i];
              if (float* g = grad_of(pv)) for (std::size_t i = 0; i < dv.size(); ++i) g[i] += dv[i];
            });
  return out;
}

}  // namespace cfm::ops
