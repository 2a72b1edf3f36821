#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float stddev = 1.0f, bool requires_grad = false) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

inline std::vector<float> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cfm_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace cfm::test
