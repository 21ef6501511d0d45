#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle. Operations on tensors that require
// gradients record a Node holding the backward rule; backward() walks the
// recorded graph in reverse topological order. Graphs are owned by the tensors
// that reference them and must not be shared between threads.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtsc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// One recorded operation. `backward` receives the gradient of the output and
// accumulates into the gradients of `inputs`.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::function<void(std::span<const double> grad_out)> backward;
  std::size_t visits = 0;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until populated
  std::shared_ptr<Node> grad_fn;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& grad_buffer();
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writing through this span bypasses the graph; use for initialization,
  // optimizer updates and finite-difference probes only.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  const std::shared_ptr<Node>& grad_fn() const;

  // Same storage values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// A trainable tensor together with its dotted path inside the owning model.
struct Parameter {
  std::string name;
  Tensor tensor;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Runs reverse-mode differentiation from a scalar loss. Leaf gradients
// accumulate across calls until zero_grad(); gradients of intermediate tensors
// are recomputed on every call. Returns the number of graph nodes executed.
std::size_t backward(const Tensor& loss);

// Nodes reachable from `root`, in the order backward() executes them.
std::vector<std::shared_ptr<Node>> graph_nodes(const Tensor& root);

}  // namespace mtsc
