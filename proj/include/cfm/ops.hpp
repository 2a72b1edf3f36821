#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cfm/tensor.hpp"

// Differentiable operations. Everything is row-major; "rows" means the tensor
// viewed as [product of leading dims × last dim]. Broadcasting is limited to a
// bias row added to every row and a one-element tensor scaling every element.
namespace cfm::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
// x[N×d] + bias[d] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x · s with s a one-element tensor.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sum over the last axis: [N×d] -> [N].
Tensor sum_last(const Tensor& x);
// Mean over rows grouped into segments [offsets[s], offsets[s+1]) -> [S×d].
Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets);
// Mean over all rows -> [1×d].
Tensor mean_pool(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
// out[i] = x[i, index[i]] for x viewed as [N×C].
Tensor pick(const Tensor& x, std::span<const std::size_t> index);

inline constexpr float kNormEpsilon = 1e-12f;
// Unit Euclidean norm over the last axis; throws DegenerateNormError on slices
// with norm <= 1e-12.
Tensor l2_normalize(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& x);

// Selects rows by index (repeats allowed; gradients accumulate).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// Places row k of x at row index[k] of a zero [total×d] tensor. Indices distinct.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t total);
// Elementwise product with a constant mask of the same shape.
Tensor apply_mask(const Tensor& x, std::span<const float> mask);
// Same values, no gradient path back to x.
Tensor stop_gradient(const Tensor& x);

// While alive, stop_gradient outputs on this thread are first recorded and,
// after replay(), substituted in call order. Lets a finite-difference oracle
// treat stop-gradient values as the constants the backward pass assumes.
class StopGradientFreeze {
 public:
  StopGradientFreeze();
  ~StopGradientFreeze();
  StopGradientFreeze(const StopGradientFreeze&) = delete;
  StopGradientFreeze& operator=(const StopGradientFreeze&) = delete;

  // Starts (or restarts) substitution from the first recorded value.
  void replay();
  std::size_t recorded() const { return values_.size(); }

 private:
  friend Tensor stop_gradient(const Tensor& x);
  Tensor next(const Tensor& x);

  StopGradientFreeze* previous_;
  bool replaying_ = false;
  std::size_t cursor_ = 0;
  std::vector<Tensor> values_;
};

// Multi-head attention over packed sequences: q, k, v are [N×width]; segment s
// covers rows [offsets[s], offsets[s+1]). Attention never crosses segments.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::size_t> offsets, std::size_t heads, bool causal);

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

}  // namespace cfm::ops
