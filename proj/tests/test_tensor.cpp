#include <cmath>
#include <numbers>

#include "cfm/binary_io.hpp"
#include "cfm/checkpoint.hpp"
#include "cfm/error.hpp"
#include "cfm/grad_check.hpp"
#include "cfm/kernels.hpp"
#include "cfm/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cfm;
using cfm::test::random_tensor;
using cfm::test::to_vec;

namespace {

// Independent triple-loop product in double.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += static_cast<double>(a.at(i, p)) * b.at(p, j);
  return c;
}

constexpr double kGradTol = 1e-3;
constexpr int kPoints = 20;

void check_points(const char* name, const std::function<void(std::uint64_t, Tensor&)>& make_input,
                  const std::function<Tensor(const Tensor&)>& f) {
  for (int p = 0; p < kPoints; ++p) {
    Tensor x;
    make_input(static_cast<std::uint64_t>(1000 + p), x);
    const auto res = grad_check([&] { return f(x); }, x);
    INFO(name << " point " << p << " worst index " << res.worst_index);
    CHECK(res.max_rel_error < kGradTol);
  }
}

auto random_input(Shape shape, float stddev = 1.0f) {
  return [shape, stddev](std::uint64_t seed, Tensor& x) { x = random_tensor(shape, seed, stddev, true); };
}

// Weighted sum so the scalar depends on every output coordinate differently.
Tensor probe(const Tensor& y, std::uint64_t seed = 77) {
  Tensor w = random_tensor(y.shape(), seed);
  return ops::sum(ops::mul(y, w));
}

}  // namespace

TEST_CASE("matmul examples") {
  Tensor id({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = random_tensor({3, 4}, 1);
  CHECK(to_vec(ops::matmul(id, x)) == to_vec(x));

  CHECK(ops::matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})).item() == doctest::Approx(6.0f));

  Tensor a = random_tensor({4, 5}, 2);
  Tensor b = random_tensor({5, 3}, 3);
  Tensor c = ops::matmul(a, b);
  const auto oracle = matmul_oracle(a, b);
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(c.data()[i] - oracle[i]) < 1e-6);

  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
}

TEST_CASE("softmax examples") {
  Tensor c = ops::softmax(Tensor::full({1, 4}, 3.0f), 1);
  for (float v : c.data()) CHECK(v == doctest::Approx(0.25f).epsilon(1e-6));

  Tensor y = ops::softmax(Tensor({1, 2}, {0.0f, static_cast<float>(std::log(3.0))}), 1);
  CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

  Tensor r = random_tensor({1, 8}, 4, 2.0f);
  Tensor s = ops::softmax(r, 1);
  double denom = 0.0;
  for (float v : r.data()) denom += std::exp(static_cast<double>(v));
  double total = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(std::abs(s.data()[i] - std::exp(static_cast<double>(r.data()[i])) / denom) < 1e-6);
    total += s.data()[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-6);

  // Axis 0 on a matrix: columns sum to one.
  Tensor m = random_tensor({5, 3}, 5);
  Tensor sm = ops::softmax(m, 0);
  for (std::size_t j = 0; j < 3; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 5; ++i) col += sm.at(i, j);
    CHECK(std::abs(col - 1.0) < 1e-6);
  }
}

TEST_CASE("l2_normalize examples") {
  Tensor y = ops::l2_normalize(Tensor({1, 2}, {3, 4}));
  CHECK(y.data()[0] == doctest::Approx(0.6f));
  CHECK(y.data()[1] == doctest::Approx(0.8f));

  Tensor unit({1, 3}, {0, 1, 0});
  CHECK(to_vec(ops::l2_normalize(unit)) == to_vec(unit));

  Tensor r = ops::l2_normalize(random_tensor({1, 16}, 6));
  double ss = 0.0;
  for (float v : r.data()) ss += static_cast<double>(v) * v;
  CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-6);

  CHECK_THROWS_AS(ops::l2_normalize(Tensor::zeros({2, 3})), DegenerateNormError);
}

TEST_CASE("stop_gradient blocks exactly one path") {
  Tensor x = random_tensor({2, 3}, 7, 1.0f, true);
  CHECK(to_vec(ops::stop_gradient(x)) == to_vec(x));
  {
    Graph g;
    GraphScope s(g);
    Tensor loss = ops::sum(ops::stop_gradient(x));
    g.backward(loss);
  }
  CHECK_FALSE(x.has_grad());

  x.zero_grad();
  {
    Graph g;
    GraphScope s(g);
    Tensor loss = ops::sum(ops::mul(x, ops::stop_gradient(x)));
    g.backward(loss);
  }
  // d/dx Σ x·sg(x) = sg(x), exactly.
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == to_vec(x));
}

TEST_CASE("grad_check contract") {
  // Integer-valued inputs and a power-of-two step keep every evaluation exact.
  Tensor x({3, 2}, {1, -2, 3, 4, -5, 6}, true);
  auto res = grad_check([&] { return ops::sum(x); }, x, {.eps = 0x1.0p-10});
  CHECK(res.max_rel_error == 0.0);
  CHECK(res.checked == 6);
  CHECK_THROWS_AS(grad_check([&] { return ops::scale(x, 2.0f); }, x), ContractError);
  CHECK_THROWS_AS(grad_check([&] { return ops::sum(x); }, x, {.eps = 0.1}), ContractError);
}

TEST_CASE("gradient checks for every differentiable op") {
  check_points("matmul_lhs", random_input({3, 4}), [](const Tensor& x) {
    return probe(ops::matmul(x, random_tensor({4, 2}, 9)));
  });
  check_points("matmul_rhs", random_input({4, 2}), [](const Tensor& x) {
    return probe(ops::matmul(random_tensor({3, 4}, 10), x));
  });
  check_points("transpose", random_input({3, 4}), [](const Tensor& x) { return probe(ops::transpose(x)); });
  check_points("add", random_input({2, 3}), [](const Tensor& x) { return probe(ops::add(x, ops::scale(x, 0.5f))); });
  check_points("sub", random_input({2, 3}), [](const Tensor& x) {
    return probe(ops::sub(random_tensor({2, 3}, 11), x));
  });
  check_points("mul", random_input({2, 3}), [](const Tensor& x) { return probe(ops::mul(x, x)); });
  check_points("add_bias", random_input({3}), [](const Tensor& b) {
    return probe(ops::add_bias(random_tensor({4, 3}, 12), b));
  });
  check_points("mul_scalar", random_input({1}), [](const Tensor& s) {
    return probe(ops::mul_scalar(random_tensor({3, 3}, 13), s));
  });
  check_points("exp", random_input({2, 4}, 0.5f), [](const Tensor& x) { return probe(ops::exp(x)); });
  check_points("mean", random_input({3, 4}), [](const Tensor& x) { return ops::mean(ops::mul(x, x)); });
  check_points("sum_last", random_input({3, 4}), [](const Tensor& x) { return probe(ops::sum_last(x)); });
  check_points("segment_mean", random_input({6, 3}), [](const Tensor& x) {
    const std::size_t offs[] = {0, 2, 3, 6};
    return probe(ops::segment_mean(x, offs));
  });
  check_points("mean_pool", random_input({5, 3}), [](const Tensor& x) { return probe(ops::mean_pool(x)); });
  check_points("softmax_last", random_input({3, 5}), [](const Tensor& x) { return probe(ops::softmax(x, 1)); });
  check_points("softmax_first", random_input({3, 5}), [](const Tensor& x) { return probe(ops::softmax(x, 0)); });
  check_points("log_softmax", random_input({3, 5}), [](const Tensor& x) { return probe(ops::log_softmax(x, 1)); });
  check_points("log_softmax_axis0", random_input({4, 3}), [](const Tensor& x) {
    return probe(ops::log_softmax(x, 0));
  });
  check_points("pick", random_input({3, 4}), [](const Tensor& x) {
    const std::size_t idx[] = {1, 0, 3};
    return probe(ops::pick(x, idx));
  });
  check_points("l2_normalize", random_input({3, 4}), [](const Tensor& x) { return probe(ops::l2_normalize(x)); });
  check_points("layer_norm_x", random_input({3, 6}), [](const Tensor& x) {
    return probe(ops::layer_norm(x, random_tensor({6}, 14), random_tensor({6}, 15)));
  });
  check_points("layer_norm_gamma", random_input({6}), [](const Tensor& g) {
    return probe(ops::layer_norm(random_tensor({3, 6}, 16), g, random_tensor({6}, 15)));
  });
  check_points("layer_norm_beta", random_input({6}), [](const Tensor& b) {
    return probe(ops::layer_norm(random_tensor({3, 6}, 16), random_tensor({6}, 14), b));
  });
  check_points("gelu", random_input({3, 4}), [](const Tensor& x) { return probe(ops::gelu(x)); });
  check_points("gather_rows", random_input({4, 3}), [](const Tensor& x) {
    const std::size_t idx[] = {2, 0, 2, 3};
    return probe(ops::gather_rows(x, idx));
  });
  check_points("scatter_rows", random_input({2, 3}), [](const Tensor& x) {
    const std::size_t idx[] = {3, 1};
    return probe(ops::scatter_rows(x, idx, 5));
  });
  check_points("apply_mask", random_input({2, 3}), [](const Tensor& x) {
    const float mask[] = {1, 0, 1, 0, 0, 1};
    return probe(ops::apply_mask(x, mask));
  });
  check_points("reshape", random_input({2, 6}), [](const Tensor& x) { return probe(ops::reshape(x, {3, 4})); });
  for (bool causal : {false, true}) {
    const std::size_t offs[] = {0, 3, 7};
    check_points("attention_q", random_input({7, 8}), [&](const Tensor& q) {
      return probe(ops::attention(q, random_tensor({7, 8}, 17), random_tensor({7, 8}, 18), offs, 2, causal));
    });
    check_points("attention_k", random_input({7, 8}), [&](const Tensor& k) {
      return probe(ops::attention(random_tensor({7, 8}, 19), k, random_tensor({7, 8}, 18), offs, 2, causal));
    });
    check_points("attention_v", random_input({7, 8}), [&](const Tensor& v) {
      return probe(ops::attention(random_tensor({7, 8}, 19), random_tensor({7, 8}, 17), v, offs, 2, causal));
    });
  }
}

TEST_CASE("requires_grad=false never accumulates") {
  Tensor frozen = random_tensor({2, 2}, 20);
  Tensor live = random_tensor({2, 2}, 21, 1.0f, true);
  Graph g;
  GraphScope s(g);
  g.backward(ops::sum(ops::mul(frozen, live)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(live.has_grad());
  CHECK(live.grad().size() == live.numel());
}

TEST_CASE("gradient accumulation is linear") {
  Tensor x = random_tensor({3, 3}, 22, 1.0f, true);
  auto l1 = [&] { return probe(ops::softmax(x, 1), 1); };
  auto l2 = [&] { return probe(ops::gelu(ops::matmul(x, x)), 2); };
  auto grad_of = [&](const std::function<Tensor()>& f) {
    x.zero_grad();
    Graph g;
    GraphScope s(g);
    g.backward(f());
    return std::vector<float>(x.grad().begin(), x.grad().end());
  };
  const auto g1 = grad_of(l1);
  const auto g2 = grad_of(l2);
  const auto g12 = grad_of([&] { return ops::add(l1(), l2()); });
  for (std::size_t i = 0; i < g12.size(); ++i) CHECK(std::abs(g12[i] - (g1[i] + g2[i])) < 1e-5);
  // Two backward passes without zeroing accumulate.
  x.zero_grad();
  for (int pass = 0; pass < 2; ++pass) {
    Graph g;
    GraphScope s(g);
    g.backward(l1());
  }
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * g1[i]));
}

TEST_CASE("graph records in topological order and backward is deterministic") {
  auto run = [] {
    Tensor w = random_tensor({4, 4}, 23, 0.5f, true);
    Tensor x = random_tensor({3, 4}, 24);
    Graph g;
    GraphScope s(g);
    Tensor h = ops::gelu(ops::matmul(x, w));
    Tensor loss = ops::mean(ops::softmax(h, 1));
    // Each recorded node's inputs are leaves or outputs of earlier nodes.
    for (std::size_t i = 0; i < g.nodes().size(); ++i) {
      for (const auto& in : g.nodes()[i].inputs) {
        bool earlier = true;
        for (std::size_t j = i; j < g.nodes().size(); ++j) earlier = earlier && g.nodes()[j].output != in;
        CHECK(earlier);
      }
    }
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), ContractError);
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("parallel kernels match the serial reference bitwise") {
  Tensor a = random_tensor({70, 50}, 25);
  Tensor b = random_tensor({50, 40}, 26);
  std::vector<float> c1(70 * 40), c2(70 * 40);
  kernels::gemm_nn(70, 40, 50, {a.data().data(), 50}, {b.data().data(), 40}, {c1.data(), 40}, false);
  kernels::serial::gemm_nn(70, 40, 50, {a.data().data(), 50}, {b.data().data(), 40}, {c2.data(), 40}, false);
  CHECK(c1 == c2);

  const std::size_t offs[] = {0, 16, 20, 36};
  Tensor q = random_tensor({36, 16}, 27), k = random_tensor({36, 16}, 28), v = random_tensor({36, 16}, 29);
  for (bool causal : {false, true}) {
    const kernels::AttentionShape shape{offs, 16, 4, causal};
    std::vector<float> probs(kernels::attention_probs_size(shape)), out(36 * 16), ref(36 * 16);
    kernels::attention_forward(shape, q.data(), k.data(), v.data(), probs, out);
    kernels::serial::attention_forward(shape, q.data(), k.data(), v.data(), ref);
    CHECK(cfm::test::max_abs_diff(out, ref) < 1e-5);
  }
}

TEST_CASE("checkpoint round-trip is byte exact") {
  ParamSet params;
  params.add("image_enc/w", random_tensor({3, 4}, 30));
  params.add("temperature", Tensor::scalar(0.1f));
  const auto path = cfm::test::temp_path("ckpt_roundtrip.cfmw");
  write_checkpoint(path, params);
  const auto first = io::read_file(path);

  ParamSet other;
  other.add("image_enc/w", Tensor::zeros({3, 4}));
  other.add("temperature", Tensor::zeros({1}));
  load_checkpoint(path, other);
  CHECK(weight_hash(other) == weight_hash(params));
  const auto path2 = cfm::test::temp_path("ckpt_roundtrip2.cfmw");
  write_checkpoint(path2, other);
  CHECK(io::read_file(path2) == first);

  ParamSet wrong;
  wrong.add("image_enc/w", Tensor::zeros({4, 3}));
  CHECK_THROWS_AS(load_checkpoint(path, wrong), FormatError);
  CHECK_THROWS_AS(load_checkpoint(cfm::test::temp_path("missing.cfmw"), other), IoError);
}

TEST_CASE("grad_check freezes stop-gradient values and supports a five-point stencil") {
  const Tensor x = test::random_tensor({5}, 3, 1.0f, true);
  // f = Σ x·sg(x): the gradient the backward pass assumes is sg(x) = x.
  auto f = [&] { return ops::sum(ops::mul(x, ops::stop_gradient(x))); };
  CHECK(grad_check(f, x, {.eps = 1e-3}).max_rel_error < 1e-3);
  GradCheckOptions live{.eps = 1e-3};
  live.freeze_stop_gradient = false;
  CHECK(grad_check(f, x, live).max_rel_error > 0.1);

  auto cubic = [&] { return ops::sum(ops::mul(ops::mul(x, x), x)); };
  const double second = grad_check(cubic, x, {.eps = 1e-2}).max_rel_error;
  const double fourth = grad_check(cubic, x, {.eps = 1e-2, .fourth_order = true}).max_rel_error;
  CHECK(fourth < second);
  CHECK(fourth < 1e-4);
}
