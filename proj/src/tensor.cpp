#include "cfm/tensor.hpp"

#include <numeric>
#include <sstream>

#include "cfm/error.hpp"

namespace cfm {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  const auto n = shape_numel(shape);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("axis out of range");
  return s[i];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::cols() const { return shape().back(); }

std::size_t Tensor::rows() const { return numel() / cols(); }

std::span<const float> Tensor::data() const { return impl_->data; }

std::span<float> Tensor::data_mut() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, false); }

namespace {
thread_local Graph* g_active = nullptr;
std::string g_fault_op;
}  // namespace

Graph* Graph::active() { return g_active; }

GraphScope::GraphScope(Graph& graph) : previous_(g_active) { g_active = &graph; }
GraphScope::~GraphScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice on the same graph");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  auto& seed = *loss.impl();
  seed.ensure_grad();
  seed.grad[0] += 1.0f;
  const std::string& fault_op = fault::gradient_sign_flip();
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    const bool flip = !fault_op.empty() && it->op == fault_op;
    if (flip) {
      for (auto& g : out.grad) g = -g;
    }
    it->backward();
    if (flip) {
      for (auto& g : out.grad) g = -g;
    }
  }
}

namespace detail {

void record_op(std::string_view op, Tensor& out, std::initializer_list<const Tensor*> inputs,
               std::function<void()> backward) {
  Graph* graph = Graph::active();
  if (graph == nullptr) return;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  Graph::Node node;
  node.op = op;
  for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
  node.output = out.impl();
  node.backward = std::move(backward);
  graph->record(std::move(node));
}

}  // namespace detail

namespace fault {

void set_gradient_sign_flip(std::string op) { g_fault_op = std::move(op); }
const std::string& gradient_sign_flip() { return g_fault_op; }

}  // namespace fault

}  // namespace cfm
