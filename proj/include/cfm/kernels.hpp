#pragma once

#include <cstddef>
#include <span>

// Dense numeric kernels. The top-level versions parallelize over independent
// output rows (or attention segment/head pairs) with OpenMP; each output element
// is still reduced in a fixed order, so results are bitwise identical to the
// single-threaded path. The `serial` namespace holds plain reference loops used
// by the tests and the benchmark.
namespace cfm::kernels {

// Strided matrix view descriptor: element (i, j) lives at data[i * ld + j].
struct MatView {
  const float* data;
  std::size_t ld;
};

struct MutMatView {
  float* data;
  std::size_t ld;
};

// c[m×n] (+)= a[m×k] · b[k×n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);
// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);
// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);

// Row-wise numerically stabilized softmax over rows×cols.
void softmax_rows(std::span<const float> x, std::span<float> y, std::size_t rows, std::size_t cols);

// Multi-head scaled dot-product attention over packed variable-length sequences.
// q, k, v, out: [N×width]; segment s covers rows [offsets[s], offsets[s+1]).
// probs receives the attention matrices, segment-major then head-major, each
// L_s×L_s; its size must equal heads · Σ L_s².
struct AttentionShape {
  std::span<const std::size_t> offsets;
  std::size_t width;
  std::size_t heads;
  bool causal;
};

std::size_t attention_probs_size(const AttentionShape& shape);

void attention_forward(const AttentionShape& shape, std::span<const float> q,
                       std::span<const float> k, std::span<const float> v,
                       std::span<float> probs, std::span<float> out);

// Accumulates into dq, dk, dv.
void attention_backward(const AttentionShape& shape, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> probs, std::span<const float> dout,
                        std::span<float> dq, std::span<float> dk, std::span<float> dv);

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, MutMatView c,
             bool accumulate);
void softmax_rows(std::span<const float> x, std::span<float> y, std::size_t rows, std::size_t cols);
void attention_forward(const AttentionShape& shape, std::span<const float> q,
                       std::span<const float> k, std::span<const float> v,
                       std::span<float> out);

}  // namespace serial

int max_threads();

}  // namespace cfm::kernels
