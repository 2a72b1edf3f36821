#include "cfm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cfm::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

inline void row_nn(std::size_t i, std::size_t n, std::size_t k, MatView a, MatView b,
                   MutMatView c, bool accumulate) {
  float* crow = c.data + i * c.ld;
  if (!accumulate) std::fill(crow, crow + n, 0.0f);
  const float* arow = a.data + i * a.ld;
  for (std::size_t p = 0; p < k; ++p) {
    const float av = arow[p];
    const float* brow = b.data + p * b.ld;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void row_nt(std::size_t i, std::size_t n, std::size_t k, MatView a, MatView b,
                   MutMatView c, bool accumulate) {
  float* crow = c.data + i * c.ld;
  const float* arow = a.data + i * a.ld;
  for (std::size_t j = 0; j < n; ++j) {
    const float* brow = b.data + j * b.ld;
    float s = 0.0f;
    for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
    crow[j] = accumulate ? crow[j] + s : s;
  }
}

inline void row_tn(std::size_t i, std::size_t n, std::size_t k, MatView a, MatView b,
                   MutMatView c, bool accumulate) {
  float* crow = c.data + i * c.ld;
  if (!accumulate) std::fill(crow, crow + n, 0.0f);
  for (std::size_t p = 0; p < k; ++p) {
    const float av = a.data[p * a.ld + i];
    if (av == 0.0f) continue;
    const float* brow = b.data + p * b.ld;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void softmax_row(const float* x, float* y, std::size_t cols) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
  float sum = 0.0f;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const float inv = 1.0f / sum;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

struct SegmentHead {
  std::size_t begin;
  std::size_t len;
  std::size_t head;
  std::size_t probs_offset;
};

std::vector<SegmentHead> plan_attention(const AttentionShape& shape) {
  std::vector<SegmentHead> tasks;
  std::size_t off = 0;
  for (std::size_t s = 0; s + 1 < shape.offsets.size(); ++s) {
    const std::size_t begin = shape.offsets[s];
    const std::size_t len = shape.offsets[s + 1] - begin;
    for (std::size_t h = 0; h < shape.heads; ++h) {
      tasks.push_back({begin, len, h, off});
      off += len * len;
    }
  }
  return tasks;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) row_nn(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) row_nt(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) row_tn(static_cast<std::size_t>(i), n, k, a, b, c, accumulate);
}

void softmax_rows(std::span<const float> x, std::span<float> y, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t i = 0; i < r; ++i) {
    softmax_row(x.data() + i * cols, y.data() + i * cols, cols);
  }
}

std::size_t attention_probs_size(const AttentionShape& shape) {
  std::size_t total = 0;
  for (std::size_t s = 0; s + 1 < shape.offsets.size(); ++s) {
    const std::size_t len = shape.offsets[s + 1] - shape.offsets[s];
    total += len * len;
  }
  return total * shape.heads;
}

void attention_forward(const AttentionShape& shape, std::span<const float> q,
                       std::span<const float> k, std::span<const float> v,
                       std::span<float> probs, std::span<float> out) {
  const std::size_t w = shape.width;
  const std::size_t dh = w / shape.heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const auto tasks = plan_attention(shape);
  const auto ntasks = static_cast<std::ptrdiff_t>(tasks.size());
#pragma omp parallel for schedule(dynamic) if (q.size() * 8 > kParallelWork)
  for (std::ptrdiff_t t = 0; t < ntasks; ++t) {
    const SegmentHead& task = tasks[static_cast<std::size_t>(t)];
    const std::size_t col = task.head * dh;
    const std::size_t len = task.len;
    float* p = probs.data() + task.probs_offset;
    const MatView qv{q.data() + task.begin * w + col, w};
    const MatView kv{k.data() + task.begin * w + col, w};
    const MatView vv{v.data() + task.begin * w + col, w};
    for (std::size_t i = 0; i < len; ++i) row_nt(i, len, dh, qv, kv, {p, len}, false);
    for (std::size_t i = 0; i < len; ++i) {
      float* prow = p + i * len;
      const std::size_t visible = shape.causal ? i + 1 : len;
      for (std::size_t j = 0; j < visible; ++j) prow[j] *= scale;
      softmax_row(prow, prow, visible);
      for (std::size_t j = visible; j < len; ++j) prow[j] = 0.0f;
    }
    for (std::size_t i = 0; i < len; ++i) {
      row_nn(i, dh, len, {p, len}, vv, {out.data() + task.begin * w + col, w}, false);
    }
  }
}

void attention_backward(const AttentionShape& shape, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> probs, std::span<const float> dout,
                        std::span<float> dq, std::span<float> dk, std::span<float> dv) {
  const std::size_t w = shape.width;
  const std::size_t dh = w / shape.heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const auto tasks = plan_attention(shape);
  const auto ntasks = static_cast<std::ptrdiff_t>(tasks.size());
#pragma omp parallel for schedule(dynamic) if (q.size() * 16 > kParallelWork)
  for (std::ptrdiff_t t = 0; t < ntasks; ++t) {
    const SegmentHead& task = tasks[static_cast<std::size_t>(t)];
    const std::size_t col = task.head * dh;
    const std::size_t len = task.len;
    const std::size_t base = task.begin * w + col;
    const float* p = probs.data() + task.probs_offset;
    std::vector<float> dp(len * len);
    // dP = dO · Vᵀ
    for (std::size_t i = 0; i < len; ++i) {
      row_nt(i, len, dh, {dout.data() + base, w}, {v.data() + base, w}, {dp.data(), len}, false);
    }
    // dV += Pᵀ · dO
    for (std::size_t i = 0; i < len; ++i) {
      row_tn(i, dh, len, {p, len}, {dout.data() + base, w}, {dv.data() + base, w}, true);
    }
    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
    for (std::size_t i = 0; i < len; ++i) {
      float* drow = dp.data() + i * len;
      const float* prow = p + i * len;
      float dot = 0.0f;
      for (std::size_t j = 0; j < len; ++j) dot += drow[j] * prow[j];
      for (std::size_t j = 0; j < len; ++j) drow[j] = prow[j] * (drow[j] - dot) * scale;
    }
    // dQ += dS · K,  dK += dSᵀ · Q
    for (std::size_t i = 0; i < len; ++i) {
      row_nn(i, dh, len, {dp.data(), len}, {k.data() + base, w}, {dq.data() + base, w}, true);
    }
    for (std::size_t i = 0; i < len; ++i) {
      row_tn(i, dh, len, {dp.data(), len}, {q.data() + base, w}, {dk.data() + base, w}, true);
    }
  }
}

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_nn(i, n, k, a, b, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_nt(i, n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_tn(i, n, k, a, b, c, accumulate);
}

void softmax_rows(std::span<const float> x, std::span<float> y, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(x.data() + i * cols, y.data() + i * cols, cols);
}

void attention_forward(const AttentionShape& shape, std::span<const float> q,
                       std::span<const float> k, std::span<const float> v,
                       std::span<float> out) {
  const std::size_t w = shape.width;
  const std::size_t dh = w / shape.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t s = 0; s + 1 < shape.offsets.size(); ++s) {
    const std::size_t b = shape.offsets[s];
    const std::size_t len = shape.offsets[s + 1] - b;
    for (std::size_t h = 0; h < shape.heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t visible = shape.causal ? i + 1 : len;
        std::vector<double> score(visible);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            dot += static_cast<double>(q[(b + i) * w + h * dh + c]) * k[(b + j) * w + h * dh + c];
          }
          score[j] = dot * scale;
          mx = std::max(mx, score[j]);
        }
        double total = 0.0;
        for (auto& sc : score) total += (sc = std::exp(sc - mx));
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < visible; ++j) acc += score[j] / total * v[(b + j) * w + h * dh + c];
          out[(b + i) * w + h * dh + c] = static_cast<float>(acc);
        }
      }
    }
  }
}

}  // namespace serial

}  // namespace cfm::kernels
