#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "cfm/tensor.hpp"

namespace cfm {

struct GradCheckOptions {
  double eps = 1e-3;
  // Check at most this many coordinates (sampled without replacement); all when unset.
  std::optional<std::size_t> max_coords;
  std::uint64_t seed = 0;
  // Hold stop_gradient outputs at their unperturbed values during the
  // finite-difference evaluations, matching what the analytic gradient assumes.
  bool freeze_stop_gradient = true;
  // Five-point stencil (error O(eps⁴)) instead of the plain central difference.
  bool fourth_order = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Compares the reverse-mode gradient of the scalar `f` with respect to the leaf
// `x` against central finite differences evaluated in double precision. The
// error per coordinate is |analytic − fd| / max(1, |fd|). `f` must rebuild its
// computation from the current values of `x` on every call and be
// deterministic (re-seed any randomness inside).
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, GradCheckOptions options = {});

}  // namespace cfm
