#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "cfm/kernels.hpp"
#include "cfm/rng.hpp"

using namespace cfm;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Best wall time in milliseconds over `reps` runs.
double time_ms(const std::function<void()>& f, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

void report(const char* name, double serial, double parallel, double diff) {
  std::printf("%-28s serial_ms=%9.3f parallel_ms=%9.3f speedup=%6.2f max_abs_diff=%.3g\n", name, serial, parallel,
              serial / parallel, diff);
}

}  // namespace

// gemm: the serial loop is the same float algorithm, so the difference is 0.
// attention: the serial path is a double-precision reference.
int main() {
  std::printf("threads=%d\n", kernels::max_threads());
  for (std::size_t n : {64, 256, 512}) {
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<float> cs(n * n), cp(n * n);
    const int reps = n >= 512 ? 3 : 10;
    const double ts = time_ms([&] { kernels::serial::gemm_nn(n, n, n, {a.data(), n}, {b.data(), n}, {cs.data(), n}, false); }, reps);
    const double tp = time_ms([&] { kernels::gemm_nn(n, n, n, {a.data(), n}, {b.data(), n}, {cp.data(), n}, false); }, reps);
    char name[64];
    std::snprintf(name, sizeof name, "gemm_nn %zux%zux%zu", n, n, n);
    report(name, ts, tp, max_abs_diff(cs, cp));
  }
  for (std::size_t segments : {32, 128}) {
    const std::size_t len = 16, width = 32, heads = 4, rows = segments * len;
    std::vector<std::size_t> offsets(segments + 1);
    for (std::size_t s = 0; s <= segments; ++s) offsets[s] = s * len;
    const kernels::AttentionShape shape{offsets, width, heads, false};
    const auto q = random_vec(rows * width, 3), k = random_vec(rows * width, 4), v = random_vec(rows * width, 5);
    std::vector<float> os(rows * width), op(rows * width), probs(kernels::attention_probs_size(shape));
    const double ts = time_ms([&] { kernels::serial::attention_forward(shape, q, k, v, os); }, 10);
    const double tp = time_ms([&] { kernels::attention_forward(shape, q, k, v, probs, op); }, 10);
    char name[64];
    std::snprintf(name, sizeof name, "attention %zu seq x %zu tok", segments, len);
    report(name, ts, tp, max_abs_diff(os, op));
  }
  return 0;
}
