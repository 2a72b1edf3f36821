#include "cfm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/ops.hpp"

namespace cfm {

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, GradCheckOptions options) {
  if (!(options.eps >= 1e-4 && options.eps <= 1e-2)) {
    throw ContractError("grad_check: eps must lie in [1e-4, 1e-2]");
  }
  const bool had_grad_flag = x.requires_grad();
  x.set_requires_grad(true);
  std::vector<float> saved_grad(x.grad().begin(), x.grad().end());
  x.zero_grad();

  std::optional<ops::StopGradientFreeze> freeze;
  if (options.freeze_stop_gradient) freeze.emplace();

  std::vector<float> analytic;
  {
    Graph graph;
    GraphScope scope(graph);
    Tensor loss = f();
    if (loss.numel() != 1) throw ContractError("grad_check: function output is not a scalar");
    graph.backward(loss);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
    else analytic.assign(x.numel(), 0.0f);
  }
  if (freeze) freeze->replay();

  auto evaluate = [&]() -> double {
    NoGradScope nograd;
    if (freeze) freeze->replay();
    Tensor loss = f();
    return static_cast<double>(loss.item());
  };

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coords && *options.max_coords < coords.size()) {
    Rng rng(options.seed);
    rng.shuffle(coords);
    coords.resize(*options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  auto values = x.data_mut();
  for (std::size_t i : coords) {
    const float original = values[i];
    auto central = [&](double step) {
      const float plus = static_cast<float>(original + step);
      const float minus = static_cast<float>(original - step);
      values[i] = plus;
      const double fp = evaluate();
      values[i] = minus;
      const double fm = evaluate();
      values[i] = original;
      return (fp - fm) / (static_cast<double>(plus) - static_cast<double>(minus));
    };
    const double fd = options.fourth_order ? (4.0 * central(options.eps) - central(2.0 * options.eps)) / 3.0
                                           : central(options.eps);
    const double err = std::abs(static_cast<double>(analytic[i]) - fd) / std::max(1.0, std::abs(fd));
    if (err > result.max_rel_error || result.checked == 0) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
    ++result.checked;
  }

  // Leave x as we found it.
  x.zero_grad();
  if (!saved_grad.empty()) {
    auto& g = x.impl()->grad;
    std::copy(saved_grad.begin(), saved_grad.end(), g.begin());
  }
  x.set_requires_grad(had_grad_flag);
  return result;
}

}  // namespace cfm
