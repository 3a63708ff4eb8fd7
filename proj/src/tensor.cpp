#include "frm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace frm {

std::size_t numel(const Shape& shape) {
  return shape[0] * shape[1] * shape[2] * shape[3];
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[' << shape[0] << 'x' << shape[1] << 'x' << shape[2] << 'x' << shape[3] << ']';
  return out.str();
}

namespace {
thread_local bool t_grad_enabled = true;
std::string g_faulty_backward;
thread_local std::vector<std::uint8_t>* t_relu_sign_sink = nullptr;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace debug {
void set_faulty_backward(std::string op_name) { g_faulty_backward = std::move(op_name); }
const std::string& faulty_backward() { return g_faulty_backward; }
void set_relu_sign_sink(std::vector<std::uint8_t>* sink) { t_relu_sign_sink = sink; }
std::vector<std::uint8_t>* relu_sign_sink() { return t_relu_sign_sink; }
}  // namespace debug

template <typename T>
BasicTensor<T>::BasicTensor(const Shape& shape, T fill) : node_(std::make_shared<detail::Node<T>>()) {
  node_->shape = shape;
  node_->data.assign(frm::numel(shape), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(const Shape& shape, std::vector<T> values)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (values.size() != frm::numel(shape)) {
    throw DimensionError("tensor of shape " + to_string(shape) + " needs " +
                         std::to_string(frm::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = shape;
  node_->data = std::move(values);
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw ContractError("only leaf tensors may be written in place");
  return node_->data;
}

template <typename T>
T BasicTensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const Shape& s = node_->shape;
  return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
T& BasicTensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const Shape& s = node_->shape;
  return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor<T>(shape(), node_->data);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order with inputs first.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node<T>* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T{0});
  }
  node_->ensure_grad()[0] += T{1};

  const std::string& faulty = debug::faulty_backward();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->is_leaf()) continue;
    if (!faulty.empty() && faulty == node->op) {
      for (T& g : node->grad) g *= T(1.5);
    }
    node->backward(*node);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace frm
