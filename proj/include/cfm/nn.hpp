#pragma once

#include <span>
#include <string>

#include "cfm/checkpoint.hpp"
#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm::nn {

struct Linear {
  Tensor weight;  // [in × out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, float gain = 1.0f);

  Tensor operator()(const Tensor& x) const;
  void register_params(ParamSet& set, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor operator()(const Tensor& x) const;
  void register_params(ParamSet& set, const std::string& prefix) const;
};

// Pre-LN transformer block: x + Attn(LN(x)), then x + MLP(LN(x)) with a GELU
// MLP of 4× expansion.
struct TransformerBlock {
  LayerNorm ln1;
  Linear q, k, v, o;
  LayerNorm ln2;
  Linear fc1, fc2;
  std::size_t heads = 1;

  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t heads, std::size_t depth, Rng& rng);

  Tensor forward(const Tensor& x, std::span<const std::size_t> offsets, bool causal) const;
  void register_params(ParamSet& set, const std::string& prefix) const;
};

}  // namespace cfm::nn
