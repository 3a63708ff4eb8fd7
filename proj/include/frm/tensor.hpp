#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace frm {

// N, C, H, W
using Shape = std::array<std::size_t, 4>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A violated precondition that is not a shape mismatch.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape{};
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Graph recording is on by default. NoGradGuard switches it off for the
// current thread, e.g. for inference and for optimizer updates.
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

/// Dense rank-4 array with an optional gradient slot.
///
/// A BasicTensor is a shared handle: copies refer to the same storage and
/// the same graph node. Values produced by an operation are never mutated
/// afterwards; only leaves (parameters, inputs) may be written through
/// mutable_data(), and only between passes.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(const Shape& shape, T fill = T{0});
  BasicTensor(const Shape& shape, std::vector<T> values);

  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data();
  std::vector<T> to_vector() const { return node_->data; }

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  // Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  const char* op() const { return node_->op; }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  // calls; call zero_grad() on the leaves to reset.
  void backward() const;

  // Copy of the values without graph history.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return BasicTensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace debug {
// Fault injection for the gradient checker's self-test: the backward rule
// of every node whose op name matches is fed a corrupted upstream gradient.
// An empty name disables injection.
void set_faulty_backward(std::string op_name);
const std::string& faulty_backward();

// While a sink is installed on the current thread, every relu appends one
// flag per input element (1 when positive). Lets the gradient checker see
// whether a finite-difference step crossed a kink.
void set_relu_sign_sink(std::vector<std::uint8_t>* sink);
std::vector<std::uint8_t>* relu_sign_sink();
}  // namespace debug

}  // namespace frm
