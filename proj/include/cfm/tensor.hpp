#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfm/rng.hpp"

namespace cfm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient arrives
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

// Dense row-major float32 tensor. Copies share storage (handle semantics), so a
// parameter held by two modules is one parameter.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;
  // Collapsed 2-D view: rows = product of leading dims, cols = last dim.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const float> data() const;
  std::span<float> data_mut();
  float item() const;
  float at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  // Deep copy of the values with no graph history.
  Tensor clone() const;

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  detail::ImplPtr impl_;
};

// Tape of recorded operations for one forward pass. Operations record onto the
// graph made active by a GraphScope on the current thread; with no active graph
// nothing is recorded and results carry no gradient.
class Graph {
 public:
  struct Node {
    std::string_view op;
    std::vector<detail::ImplPtr> inputs;
    detail::ImplPtr output;
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Seeds d(loss)/d(loss) = 1 and runs every node in exact reverse recording
  // order. Gradients accumulate (+=) into leaves. One call per graph.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  void record(Node node) { nodes_.push_back(std::move(node)); }

  static Graph* active();

 private:
  friend class GraphScope;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

// Suspends recording for its lifetime (inference inside a training step).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* previous_;
};

namespace detail {

// Records `backward` for `out` if a graph is active and any input needs grad.
void record_op(std::string_view op, Tensor& out, std::initializer_list<const Tensor*> inputs,
               std::function<void()> backward);

}  // namespace detail

namespace fault {

// Test hook: negates the upstream gradient fed into every node of the named op
// during backward. Empty string disables.
void set_gradient_sign_flip(std::string op);
const std::string& gradient_sign_flip();

}  // namespace fault

}  // namespace cfm
