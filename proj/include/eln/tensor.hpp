// Dense float32 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared graph node. Operations that take
// at least one input with requires_grad() (and run while gradient recording
// is enabled) record a backward closure; calling backward() on a scalar
// result accumulates gradients into every reachable leaf.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eln {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0F);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const float> data() const;
  // Mutating the data of a tensor that already feeds a recorded graph is
  // the caller's responsibility (parameter updates happen between steps).
  std::span<float> mutable_data();
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  float item() const;
  float at(std::initializer_list<std::int64_t> index) const;

  // New leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  void backward() const;
  void zero_grad();

  // Identity of the underlying node (parameter bookkeeping, tests).
  const detail::Node* id() const { return node_.get(); }

  // Builds a result node. When recording is active and some parent requires
  // grad, the node keeps its parents and backward closure; otherwise both
  // are dropped and the result is a constant.
  static Tensor make_result(Shape shape, std::vector<float> data,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward_fn);

  detail::Node& node() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording switch (thread local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace eln
