#include "cfm/nn.hpp"

#include <cmath>

#include "cfm/ops.hpp"

namespace cfm::nn {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, float gain)
    : weight(Tensor::randn({in, out}, rng, gain / std::sqrt(static_cast<float>(in)), true)),
      bias(Tensor::zeros({out}, true)) {}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::register_params(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "/weight", weight);
  set.add(prefix + "/bias", bias);
}

LayerNorm::LayerNorm(std::size_t width)
    : gamma(Tensor::full({width}, 1.0f, true)), beta(Tensor::zeros({width}, true)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::register_params(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "/gamma", gamma);
  set.add(prefix + "/beta", beta);
}

TransformerBlock::TransformerBlock(std::size_t width, std::size_t heads_, std::size_t depth, Rng& rng)
    : ln1(width),
      q(width, width, rng),
      k(width, width, rng),
      v(width, width, rng),
      o(width, width, rng, 1.0f / std::sqrt(2.0f * static_cast<float>(depth))),
      ln2(width),
      fc1(width, 4 * width, rng),
      fc2(4 * width, width, rng, 1.0f / std::sqrt(2.0f * static_cast<float>(depth))),
      heads(heads_) {}

Tensor TransformerBlock::forward(const Tensor& x, std::span<const std::size_t> offsets, bool causal) const {
  const Tensor h = ln1(x);
  const Tensor a = ops::attention(q(h), k(h), v(h), offsets, heads, causal);
  const Tensor x1 = ops::add(x, o(a));
  const Tensor h2 = ln2(x1);
  return ops::add(x1, fc2(ops::gelu(fc1(h2))));
}

void TransformerBlock::register_params(ParamSet& set, const std::string& prefix) const {
  ln1.register_params(set, prefix + "/ln1");
  q.register_params(set, prefix + "/attn_q");
  k.register_params(set, prefix + "/attn_k");
  v.register_params(set, prefix + "/attn_v");
  o.register_params(set, prefix + "/attn_out");
  ln2.register_params(set, prefix + "/ln2");
  fc1.register_params(set, prefix + "/mlp_fc1");
  fc2.register_params(set, prefix + "/mlp_fc2");
}

}  // namespace cfm::nn
