#include "frm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "frm/gemm.hpp"

namespace frm {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
BasicTensor<T> make_result(const char* op, const Shape& shape, std::vector<T> data,
                           std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->data = std::move(data);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

// Grad buffer of input k when it participates in differentiation, else null.
template <typename T>
T* input_grad(Node<T>& self, std::size_t k) {
  Node<T>& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

void check_axis(int axis) {
  if (axis < 0 || axis > 3) throw ContractError("axis " + std::to_string(axis) + " out of range [0, 4)");
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < 4; ++i) r.inner *= s[static_cast<std::size_t>(i)];
  return r;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  return out;
}

// Row-major strides with zero on broadcast axes.
std::array<std::size_t, 4> broadcast_strides(const Shape& s, const Shape& out) {
  std::array<std::size_t, 4> st{};
  std::size_t acc = 1;
  for (int i = 3; i >= 0; --i) {
    auto u = static_cast<std::size_t>(i);
    st[u] = (s[u] == 1 && out[u] != 1) ? 0 : acc;
    acc *= s[u];
  }
  return st;
}

template <typename F>
void for_each_broadcast(const Shape& out, const std::array<std::size_t, 4>& sa,
                        const std::array<std::size_t, 4>& sb, F&& f) {
  std::size_t o = 0;
  for (std::size_t n = 0; n < out[0]; ++n)
    for (std::size_t c = 0; c < out[1]; ++c)
      for (std::size_t h = 0; h < out[2]; ++h) {
        std::size_t ia = n * sa[0] + c * sa[1] + h * sa[2];
        std::size_t ib = n * sb[0] + c * sb[1] + h * sb[2];
        for (std::size_t w = 0; w < out[3]; ++w, ++o) f(o, ia + w * sa[3], ib + w * sb[3]);
      }
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, Binary kind) {
  static constexpr const char* kNames[] = {"add", "sub", "mul"};
  const char* name = kNames[static_cast<int>(kind)];
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::vector<T> data(numel(out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  switch (kind) {
    case Binary::kAdd:
      for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { data[o] = pa[i] + pb[j]; });
      break;
    case Binary::kSub:
      for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { data[o] = pa[i] - pb[j]; });
      break;
    case Binary::kMul:
      for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { data[o] = pa[i] * pb[j]; });
      break;
  }
  return make_result<T>(name, out, std::move(data), {a.node(), b.node()},
                        [out, sa, sb, kind](Node<T>& self) {
                          T* ga = input_grad(self, 0);
                          T* gb = input_grad(self, 1);
                          const T* g = self.grad.data();
                          const T* va = self.inputs[0]->data.data();
                          const T* vb = self.inputs[1]->data.data();
                          for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                            switch (kind) {
                              case Binary::kAdd:
                                if (ga) ga[i] += g[o];
                                if (gb) gb[j] += g[o];
                                break;
                              case Binary::kSub:
                                if (ga) ga[i] += g[o];
                                if (gb) gb[j] -= g[o];
                                break;
                              case Binary::kMul:
                                if (ga) ga[i] += g[o] * vb[j];
                                if (gb) gb[j] += g[o] * va[i];
                                break;
                            }
                          });
                        });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::kAdd);
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::kSub);
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::kMul);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> data(a.data().begin(), a.data().end());
  for (T& v : data) v *= factor;
  return make_result<T>("scale", a.shape(), std::move(data), {a.node()}, [factor](Node<T>& self) {
    T* ga = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset) {
  std::vector<T> data(a.data().begin(), a.data().end());
  for (T& v : data) v += offset;
  return make_result<T>("add_scalar", a.shape(), std::move(data), {a.node()}, [](Node<T>& self) {
    T* ga = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> data(a.data().begin(), a.data().end());
  if (auto* sink = debug::relu_sign_sink()) {
    for (T v : data) sink->push_back(v > T{0} ? 1 : 0);
  }
  for (T& v : data) v = v > T{0} ? v : T{0};
  return make_result<T>("relu", a.shape(), std::move(data), {a.node()}, [](Node<T>& self) {
    T* ga = input_grad(self, 0);
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x[i] > T{0}) ga[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total{0};
  for (T v : a.data()) total += v;
  return make_result<T>("sum", Shape{1, 1, 1, 1}, {total}, {a.node()}, [](Node<T>& self) {
    T* ga = input_grad(self, 0);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) ga[i] += g;
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  const T count = static_cast<T>(a.numel());
  T total{0};
  for (T v : a.data()) total += v;
  return make_result<T>("mean", Shape{1, 1, 1, 1}, {total / count}, {a.node()}, [count](Node<T>& self) {
    T* ga = input_grad(self, 0);
    const T g = self.grad[0] / count;
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) ga[i] += g;
  });
}

namespace {

template <typename T>
BasicTensor<T> reduce_axis(const BasicTensor<T>& a, int axis, bool average) {
  check_axis(axis);
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out = a.shape();
  out[static_cast<std::size_t>(axis)] = 1;
  std::vector<T> data(s.outer * s.inner, T{0});
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) data[o * s.inner + i] += x[(o * s.len + l) * s.inner + i];
  const T norm = average ? T{1} / static_cast<T>(s.len) : T{1};
  if (average) {
    for (T& v : data) v /= static_cast<T>(s.len);
  }
  return make_result<T>(average ? "mean_axis" : "sum_axis", out, std::move(data), {a.node()},
                        [s, norm](Node<T>& self) {
                          T* ga = input_grad(self, 0);
                          for (std::size_t o = 0; o < s.outer; ++o)
                            for (std::size_t l = 0; l < s.len; ++l)
                              for (std::size_t i = 0; i < s.inner; ++i)
                                ga[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i] * norm;
                        });
}

}  // namespace

template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& a, int axis) {
  return reduce_axis(a, axis, false);
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& a, int axis) {
  return reduce_axis(a, axis, true);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, const Shape& shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  return make_result<T>("reshape", shape, a.to_vector(), {a.node()}, [](Node<T>& self) {
    T* ga = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  const Shape in = a.shape();
  const Shape out{in[0], in[1], in[3], in[2]};
  const std::size_t batches = in[0] * in[1];
  const std::size_t rows = in[2];
  const std::size_t cols = in[3];
  std::vector<T> data(a.numel());
  const T* x = a.data().data();
  for (std::size_t b = 0; b < batches; ++b)
    transpose_matrix(rows, cols, x + b * rows * cols, data.data() + b * rows * cols);
  return make_result<T>("transpose", out, std::move(data), {a.node()}, [batches, rows, cols](Node<T>& self) {
    T* ga = input_grad(self, 0);
    for (std::size_t b = 0; b < batches; ++b)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          ga[b * rows * cols + r * cols + c] += self.grad[b * rows * cols + c * rows + r];
  });
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  Shape out = parts.front().shape();
  out[1] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s[0] != out[0] || s[2] != out[2] || s[3] != out[3]) {
      throw DimensionError("concat_channels: " + to_string(parts.front().shape()) + " vs " + to_string(s));
    }
    out[1] += s[1];
  }
  const std::size_t plane = out[2] * out[3];
  std::vector<T> data(numel(out));
  std::vector<std::size_t> offsets;
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t n = 0; n < out[0]; ++n) {
      std::copy_n(p.data().data() + n * c * plane, c * plane, data.data() + (n * out[1] + offset) * plane);
    }
    offsets.push_back(offset);
    inputs.push_back(p.node());
    offset += c;
  }
  return make_result<T>("concat_channels", out, std::move(data), std::move(inputs),
                        [out, plane, offsets](Node<T>& self) {
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                            T* gk = input_grad(self, k);
                            if (!gk) continue;
                            const std::size_t c = self.inputs[k]->shape[1];
                            for (std::size_t n = 0; n < out[0]; ++n) {
                              const T* src = self.grad.data() + (n * out[1] + offsets[k]) * plane;
                              T* dst = gk + n * c * plane;
                              for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2]) {
    throw DimensionError("matmul: inner extents disagree for " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t batches = sa[0] * sa[1];
  const std::size_t m = sa[2];
  const std::size_t k = sa[3];
  const std::size_t p = sb[3];
  const Shape out{sa[0], sa[1], m, p};
  std::vector<T> data(numel(out), T{0});
  for (std::size_t bi = 0; bi < batches; ++bi) {
    gemm_nn(m, k, p, a.data().data() + bi * m * k, b.data().data() + bi * k * p, data.data() + bi * m * p);
  }
  return make_result<T>("matmul", out, std::move(data), {a.node(), b.node()}, [batches, m, k, p](Node<T>& self) {
    T* ga = input_grad(self, 0);
    T* gb = input_grad(self, 1);
    const T* va = self.inputs[0]->data.data();
    const T* vb = self.inputs[1]->data.data();
    std::vector<T> scratch;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const T* g = self.grad.data() + bi * m * p;
      if (ga) {
        // dA = dC * B^T
        scratch.resize(p * k);
        transpose_matrix(k, p, vb + bi * k * p, scratch.data());
        gemm_nn(m, p, k, g, scratch.data(), ga + bi * m * k);
      }
      if (gb) {
        // dB = A^T * dC
        scratch.resize(k * m);
        transpose_matrix(m, k, va + bi * m * k, scratch.data());
        gemm_nn(k, m, p, scratch.data(), g, gb + bi * k * p);
      }
    }
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a, int axis) {
  check_axis(axis);
  const AxisSplit s = split_at(a.shape(), axis);
  std::vector<T> data(a.numel());
  const T* x = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) peak = std::max(peak, x[base + l * s.inner]);
      T total{0};
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(x[base + l * s.inner] - peak);
        data[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) data[base + l * s.inner] /= total;
    }
  return make_result<T>("softmax", a.shape(), std::move(data), {a.node()}, [s](Node<T>& self) {
    T* ga = input_grad(self, 0);
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot{0};
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ContractError("convolution stride must be positive");
  if (in + 2 * padding < kernel) {
    throw DimensionError("convolution kernel " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t out_c, out_h, out_w;
  std::size_t kh, kw, stride, pad, groups;
  std::size_t in_cg() const { return in_c / groups; }
  std::size_t out_cg() const { return out_c / groups; }
  std::size_t patch() const { return in_cg() * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// cols is patch() x pixels() for one image and one group.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  for (std::size_t c = 0; c < g.in_cg(); ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        const T* plane = x + c * g.in_h * g.in_w;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                ix < static_cast<std::ptrdiff_t>(g.in_w);
            row[oy * g.out_w + ox] = inside ? plane[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)] : T{0};
          }
        }
      }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
  for (std::size_t c = 0; c < g.in_cg(); ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        T* plane = dx + c * g.in_h * g.in_w;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            plane[static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias,
                      const Conv2dParams& params) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (params.groups == 0 || xs[1] % params.groups != 0 || ws[0] % params.groups != 0) {
    throw DimensionError("conv2d: groups " + std::to_string(params.groups) + " must divide input " +
                         to_string(xs) + " and weight " + to_string(ws) + " channels");
  }
  if (ws[1] * params.groups != xs[1]) {
    throw DimensionError("conv2d: input " + to_string(xs) + " does not match weight " + to_string(ws));
  }
  if (bias && (bias->numel() != ws[0])) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " does not match weight " + to_string(ws));
  }
  ConvGeometry g{xs[0],
                 xs[1],
                 xs[2],
                 xs[3],
                 ws[0],
                 conv_output_extent(xs[2], ws[2], params.stride, params.padding),
                 conv_output_extent(xs[3], ws[3], params.stride, params.padding),
                 ws[2],
                 ws[3],
                 params.stride,
                 params.padding,
                 params.groups};
  const Shape out{g.batch, g.out_c, g.out_h, g.out_w};
  std::vector<T> data(numel(out), T{0});
  std::vector<T> cols(g.pointwise() ? 0 : g.patch() * g.pixels());
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const T* src = xv + (n * g.in_c + gi * g.in_cg()) * g.in_h * g.in_w;
      const T* colp = src;
      if (!g.pointwise()) {
        im2col(g, src, cols.data());
        colp = cols.data();
      }
      T* dst = data.data() + (n * g.out_c + gi * g.out_cg()) * g.pixels();
      gemm_nn(g.out_cg(), g.patch(), g.pixels(), wv + gi * g.out_cg() * g.patch(), colp, dst);
    }
  if (bias) {
    const T* bv = bias->data().data();
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t c = 0; c < g.out_c; ++c) {
        T* dst = data.data() + (n * g.out_c + c) * g.pixels();
        for (std::size_t i = 0; i < g.pixels(); ++i) dst[i] += bv[c];
      }
  }
  std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias) inputs.push_back(bias->node());
  return make_result<T>("conv2d", out, std::move(data), std::move(inputs), [g](Node<T>& self) {
    T* gx = input_grad(self, 0);
    T* gw = input_grad(self, 1);
    T* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const T* xv = self.inputs[0]->data.data();
    const T* wv = self.inputs[1]->data.data();
    const T* dy = self.grad.data();
    if (gb) {
      for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t c = 0; c < g.out_c; ++c) {
          const T* row = dy + (n * g.out_c + c) * g.pixels();
          T acc{0};
          for (std::size_t i = 0; i < g.pixels(); ++i) acc += row[i];
          gb[c] += acc;
        }
    }
    std::vector<T> cols(g.patch() * g.pixels());
    std::vector<T> cols_t(g.patch() * g.pixels());
    std::vector<T> w_t(g.patch() * g.out_cg());
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t gi = 0; gi < g.groups; ++gi) {
        const T* dyg = dy + (n * g.out_c + gi * g.out_cg()) * g.pixels();
        const T* src = xv + (n * g.in_c + gi * g.in_cg()) * g.in_h * g.in_w;
        if (gw) {
          // dW = dY * cols^T
          if (g.pointwise()) {
            transpose_matrix(g.patch(), g.pixels(), src, cols_t.data());
          } else {
            im2col(g, src, cols.data());
            transpose_matrix(g.patch(), g.pixels(), cols.data(), cols_t.data());
          }
          gemm_nn(g.out_cg(), g.pixels(), g.patch(), dyg, cols_t.data(), gw + gi * g.out_cg() * g.patch());
        }
        if (gx) {
          // dcols = W^T * dY
          transpose_matrix(g.out_cg(), g.patch(), wv + gi * g.out_cg() * g.patch(), w_t.data());
          T* dst = gx + (n * g.in_c + gi * g.in_cg()) * g.in_h * g.in_w;
          if (g.pointwise()) {
            gemm_nn(g.patch(), g.out_cg(), g.pixels(), w_t.data(), dyg, dst);
          } else {
            std::fill(cols.begin(), cols.end(), T{0});
            gemm_nn(g.patch(), g.out_cg(), g.pixels(), w_t.data(), dyg, cols.data());
            col2im_add(g, cols.data(), dst);
          }
        }
      }
  });
}

template <typename T>
BasicTensor<T> batch_norm_train(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                T eps, std::vector<T>* batch_mean, std::vector<T>* batch_var) {
  const Shape& s = x.shape();
  if (gamma.numel() != s[1] || beta.numel() != s[1]) {
    throw DimensionError("batch_norm: affine parameters do not match input " + to_string(s));
  }
  const std::size_t plane = s[2] * s[3];
  const std::size_t count = s[0] * plane;
  if (count < 2) throw ContractError("batch_norm: training mode needs more than one value per channel");
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(s[1]);
  std::vector<T> data(x.numel());
  const T* xv = x.data().data();
  if (batch_mean) batch_mean->assign(s[1], T{0});
  if (batch_var) batch_var->assign(s[1], T{0});
  for (std::size_t c = 0; c < s[1]; ++c) {
    T total{0};
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t i = 0; i < plane; ++i) total += xv[(n * s[1] + c) * plane + i];
    const T mu = total / static_cast<T>(count);
    T sq{0};
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const T d = xv[(n * s[1] + c) * plane + i] - mu;
        sq += d * d;
      }
    const T var = sq / static_cast<T>(count);
    inv_std[c] = T{1} / std::sqrt(var + eps);
    if (batch_mean) (*batch_mean)[c] = mu;
    if (batch_var) (*batch_var)[c] = var;
    const T gm = gamma.data()[c];
    const T bt = beta.data()[c];
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (n * s[1] + c) * plane + i;
        xhat[idx] = (xv[idx] - mu) * inv_std[c];
        data[idx] = gm * xhat[idx] + bt;
      }
  }
  return make_result<T>(
      "batch_norm", s, std::move(data), {x.node(), gamma.node(), beta.node()},
      [s, plane, count, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        T* gx = input_grad(self, 0);
        T* gg = input_grad(self, 1);
        T* gbt = input_grad(self, 2);
        const T* dy = self.grad.data();
        const T* gm = self.inputs[1]->data.data();
        const T m = static_cast<T>(count);
        for (std::size_t c = 0; c < s[1]; ++c) {
          T sum_dy{0};
          T sum_dy_xhat{0};
          for (std::size_t n = 0; n < s[0]; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = (n * s[1] + c) * plane + i;
              sum_dy += dy[idx];
              sum_dy_xhat += dy[idx] * xhat[idx];
            }
          if (gg) gg[c] += sum_dy_xhat;
          if (gbt) gbt[c] += sum_dy;
          if (!gx) continue;
          const T k = gm[c] * inv_std[c] / m;
          for (std::size_t n = 0; n < s[0]; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = (n * s[1] + c) * plane + i;
              gx[idx] += k * (m * dy[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
            }
        }
      });
}

template <typename T>
BasicTensor<T> batch_norm_eval(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               const std::vector<T>& running_mean, const std::vector<T>& running_var, T eps) {
  const Shape& s = x.shape();
  if (gamma.numel() != s[1] || beta.numel() != s[1] || running_mean.size() != s[1] || running_var.size() != s[1]) {
    throw DimensionError("batch_norm: statistics do not match input " + to_string(s));
  }
  const std::size_t plane = s[2] * s[3];
  std::vector<T> inv_std(s[1]);
  for (std::size_t c = 0; c < s[1]; ++c) inv_std[c] = T{1} / std::sqrt(running_var[c] + eps);
  std::vector<T> data(x.numel());
  const T* xv = x.data().data();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (n * s[1] + c) * plane + i;
        data[idx] = gamma.data()[c] * ((xv[idx] - running_mean[c]) * inv_std[c]) + beta.data()[c];
      }
  return make_result<T>("batch_norm_eval", s, std::move(data), {x.node(), gamma.node(), beta.node()},
                        [s, plane, running_mean, inv_std = std::move(inv_std)](Node<T>& self) {
                          T* gx = input_grad(self, 0);
                          T* gg = input_grad(self, 1);
                          T* gbt = input_grad(self, 2);
                          const T* dy = self.grad.data();
                          const T* xv = self.inputs[0]->data.data();
                          const T* gm = self.inputs[1]->data.data();
                          for (std::size_t n = 0; n < s[0]; ++n)
                            for (std::size_t c = 0; c < s[1]; ++c)
                              for (std::size_t i = 0; i < plane; ++i) {
                                const std::size_t idx = (n * s[1] + c) * plane + i;
                                const T xhat = (xv[idx] - running_mean[c]) * inv_std[c];
                                if (gx) gx[idx] += dy[idx] * gm[c] * inv_std[c];
                                if (gg) gg[c] += dy[idx] * xhat;
                                if (gbt) gbt[c] += dy[idx];
                              }
                        });
}

namespace {

struct Window {
  std::size_t begin;
  std::size_t end;
};

// floor(i*in/out) .. ceil((i+1)*in/out)
std::vector<Window> adaptive_windows(std::size_t in, std::size_t out) {
  std::vector<Window> w(out);
  for (std::size_t i = 0; i < out; ++i) {
    w[i].begin = (i * in) / out;
    w[i].end = ((i + 1) * in + out - 1) / out;
  }
  return w;
}

}  // namespace

template <typename T>
BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (out_h == 0 || out_w == 0) throw ContractError("adaptive_avg_pool: output extent must be positive");
  if (out_h > s[2] || out_w > s[3]) {
    throw ContractError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                        " exceeds input " + to_string(s));
  }
  const auto rows = adaptive_windows(s[2], out_h);
  const auto cols = adaptive_windows(s[3], out_w);
  const Shape out{s[0], s[1], out_h, out_w};
  std::vector<T> data(numel(out));
  const T* xv = x.data().data();
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    const T* plane = xv + p * s[2] * s[3];
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        T total{0};
        for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
          for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) total += plane[y * s[3] + xx];
        const auto area = static_cast<T>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
        data[(p * out_h + i) * out_w + j] = total / area;
      }
  }
  return make_result<T>("adaptive_avg_pool", out, std::move(data), {x.node()}, [s, out, rows, cols](Node<T>& self) {
    T* gx = input_grad(self, 0);
    for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
      T* plane = gx + p * s[2] * s[3];
      for (std::size_t i = 0; i < out[2]; ++i)
        for (std::size_t j = 0; j < out[3]; ++j) {
          const auto area = static_cast<T>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
          const T g = self.grad[(p * out[2] + i) * out[3] + j] / area;
          for (std::size_t y = rows[i].begin; y < rows[i].end; ++y)
            for (std::size_t xx = cols[j].begin; xx < cols[j].end; ++xx) plane[y * s[3] + xx] += g;
        }
    }
  });
}

namespace {

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (out_h == 0 || out_w == 0) throw ContractError("bilinear_resize: output extent must be positive");
  const auto ty = bilinear_taps(s[2], out_h);
  const auto tx = bilinear_taps(s[3], out_w);
  const Shape out{s[0], s[1], out_h, out_w};
  std::vector<T> data(numel(out));
  const T* xv = x.data().data();
  for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
    const T* plane = xv + p * s[2] * s[3];
    for (std::size_t i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty[i].frac);
      for (std::size_t j = 0; j < out_w; ++j) {
        const T fx = static_cast<T>(tx[j].frac);
        const T top = (T{1} - fx) * plane[ty[i].lo * s[3] + tx[j].lo] + fx * plane[ty[i].lo * s[3] + tx[j].hi];
        const T bottom = (T{1} - fx) * plane[ty[i].hi * s[3] + tx[j].lo] + fx * plane[ty[i].hi * s[3] + tx[j].hi];
        data[(p * out_h + i) * out_w + j] = (T{1} - fy) * top + fy * bottom;
      }
    }
  }
  return make_result<T>("bilinear_resize", out, std::move(data), {x.node()}, [s, out, ty, tx](Node<T>& self) {
    T* gx = input_grad(self, 0);
    for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
      T* plane = gx + p * s[2] * s[3];
      for (std::size_t i = 0; i < out[2]; ++i) {
        const T fy = static_cast<T>(ty[i].frac);
        for (std::size_t j = 0; j < out[3]; ++j) {
          const T fx = static_cast<T>(tx[j].frac);
          const T g = self.grad[(p * out[2] + i) * out[3] + j];
          plane[ty[i].lo * s[3] + tx[j].lo] += g * (T{1} - fy) * (T{1} - fx);
          plane[ty[i].lo * s[3] + tx[j].hi] += g * (T{1} - fy) * fx;
          plane[ty[i].hi * s[3] + tx[j].lo] += g * fy * (T{1} - fx);
          plane[ty[i].hi * s[3] + tx[j].hi] += g * fy * fx;
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> l2_normalize_channels(const BasicTensor<T>& x, T eps) {
  const Shape& s = x.shape();
  const std::size_t plane = s[2] * s[3];
  std::vector<T> norms(s[0] * plane);
  std::vector<T> data(x.numel());
  const T* xv = x.data().data();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      T sq{0};
      for (std::size_t c = 0; c < s[1]; ++c) {
        const T v = xv[(n * s[1] + c) * plane + i];
        sq += v * v;
      }
      const T norm = std::max(std::sqrt(sq), eps);
      norms[n * plane + i] = norm;
      for (std::size_t c = 0; c < s[1]; ++c) data[(n * s[1] + c) * plane + i] = xv[(n * s[1] + c) * plane + i] / norm;
    }
  return make_result<T>("l2_normalize", s, std::move(data), {x.node()},
                        [s, plane, eps, norms = std::move(norms)](Node<T>& self) {
                          T* gx = input_grad(self, 0);
                          const T* y = self.data.data();
                          const T* g = self.grad.data();
                          for (std::size_t n = 0; n < s[0]; ++n)
                            for (std::size_t i = 0; i < plane; ++i) {
                              const T norm = norms[n * plane + i];
                              T dot{0};
                              if (norm > eps) {
                                for (std::size_t c = 0; c < s[1]; ++c) {
                                  const std::size_t idx = (n * s[1] + c) * plane + i;
                                  dot += g[idx] * y[idx];
                                }
                              }
                              for (std::size_t c = 0; c < s[1]; ++c) {
                                const std::size_t idx = (n * s[1] + c) * plane + i;
                                gx[idx] += (g[idx] - y[idx] * dot) / norm;
                              }
                            }
                        });
}

template <typename T>
BasicTensor<T> gather_pixels(const BasicTensor<T>& x, const std::vector<PixelIndex>& where) {
  const Shape& s = x.shape();
  for (const auto& p : where) {
    if (p.n >= s[0] || p.h >= s[2] || p.w >= s[3]) {
      throw DimensionError("gather_pixels: position outside " + to_string(s));
    }
  }
  const Shape out{1, 1, where.size(), s[1]};
  std::vector<T> data(numel(out));
  for (std::size_t r = 0; r < where.size(); ++r)
    for (std::size_t c = 0; c < s[1]; ++c) data[r * s[1] + c] = x.at(where[r].n, c, where[r].h, where[r].w);
  return make_result<T>("gather_pixels", out, std::move(data), {x.node()}, [s, where](Node<T>& self) {
    T* gx = input_grad(self, 0);
    for (std::size_t r = 0; r < where.size(); ++r)
      for (std::size_t c = 0; c < s[1]; ++c)
        gx[((where[r].n * s[1] + c) * s[2] + where[r].h) * s[3] + where[r].w] += self.grad[r * s[1] + c];
  });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                     std::int32_t ignore_index, std::size_t* valid_count) {
  const Shape& s = logits.shape();
  const std::size_t plane = s[2] * s[3];
  const std::size_t classes = s[1];
  if (labels.size() != s[0] * plane) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + to_string(s));
  }
  const T* lv = logits.data().data();
  std::size_t count = 0;
  T total{0};
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::int32_t label = labels[n * plane + i];
      if (label == ignore_index) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")");
      }
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < classes; ++c) peak = std::max(peak, lv[(n * classes + c) * plane + i]);
      T acc{0};
      for (std::size_t c = 0; c < classes; ++c) acc += std::exp(lv[(n * classes + c) * plane + i] - peak);
      const T lse = peak + std::log(acc);
      total += lse - lv[(n * classes + static_cast<std::size_t>(label)) * plane + i];
      ++count;
    }
  if (valid_count) *valid_count = count;
  const T value = count ? total / static_cast<T>(count) : T{0};
  std::vector<std::int32_t> kept(labels.begin(), labels.end());
  return make_result<T>("cross_entropy", Shape{1, 1, 1, 1}, {value}, {logits.node()},
                        [s, plane, classes, count, ignore_index, kept = std::move(kept)](Node<T>& self) {
                          if (count == 0) return;
                          T* gx = input_grad(self, 0);
                          const T* lv = self.inputs[0]->data.data();
                          const T g = self.grad[0] / static_cast<T>(count);
                          for (std::size_t n = 0; n < s[0]; ++n)
                            for (std::size_t i = 0; i < plane; ++i) {
                              const std::int32_t label = kept[n * plane + i];
                              if (label == ignore_index) continue;
                              T peak = -std::numeric_limits<T>::infinity();
                              for (std::size_t c = 0; c < classes; ++c)
                                peak = std::max(peak, lv[(n * classes + c) * plane + i]);
                              T acc{0};
                              for (std::size_t c = 0; c < classes; ++c)
                                acc += std::exp(lv[(n * classes + c) * plane + i] - peak);
                              for (std::size_t c = 0; c < classes; ++c) {
                                const std::size_t idx = (n * classes + c) * plane + i;
                                T p = std::exp(lv[idx] - peak) / acc;
                                if (c == static_cast<std::size_t>(label)) p -= T{1};
                                gx[idx] += g * p;
                              }
                            }
                        });
}

template <typename T>
BasicTensor<T> contrastive_from_similarity(const BasicTensor<T>& sim, const std::vector<ContrastiveTerm>& terms) {
  const Shape& s = sim.shape();
  if (s[0] != 1 || s[1] != 1 || s[2] != s[3]) {
    throw DimensionError("contrastive: similarity must be 1x1xPxP, got " + to_string(s));
  }
  const std::size_t p = s[2];
  for (const auto& t : terms) {
    if (t.positives.empty()) throw ContractError("contrastive: anchor without positives");
    auto bad = [p](std::size_t i) { return i >= p; };
    if (bad(t.anchor) || std::any_of(t.positives.begin(), t.positives.end(), bad) ||
        std::any_of(t.negatives.begin(), t.negatives.end(), bad)) {
      throw DimensionError("contrastive: index outside similarity matrix");
    }
  }
  const T* sv = sim.data().data();
  T total{0};
  for (const auto& t : terms) {
    const T* row = sv + t.anchor * p;
    T term{0};
    for (std::size_t pos : t.positives) {
      T peak = row[pos];
      for (std::size_t neg : t.negatives) peak = std::max(peak, row[neg]);
      T acc = std::exp(row[pos] - peak);
      for (std::size_t neg : t.negatives) acc += std::exp(row[neg] - peak);
      term += peak + std::log(acc) - row[pos];
    }
    total += term / static_cast<T>(t.positives.size());
  }
  const T value = terms.empty() ? T{0} : total / static_cast<T>(terms.size());
  return make_result<T>("contrastive", Shape{1, 1, 1, 1}, {value}, {sim.node()}, [p, terms](Node<T>& self) {
    if (terms.empty()) return;
    T* gs = input_grad(self, 0);
    const T* sv = self.inputs[0]->data.data();
    const T outer = self.grad[0] / static_cast<T>(terms.size());
    for (const auto& t : terms) {
      const T* row = sv + t.anchor * p;
      T* grow = gs + t.anchor * p;
      const T g = outer / static_cast<T>(t.positives.size());
      for (std::size_t pos : t.positives) {
        T peak = row[pos];
        for (std::size_t neg : t.negatives) peak = std::max(peak, row[neg]);
        T acc = std::exp(row[pos] - peak);
        for (std::size_t neg : t.negatives) acc += std::exp(row[neg] - peak);
        grow[pos] += g * (std::exp(row[pos] - peak) / acc - T{1});
        for (std::size_t neg : t.negatives) grow[neg] += g * std::exp(row[neg] - peak) / acc;
      }
    }
  });
}

#define FRM_INSTANTIATE_OPS(T)                                                                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                      \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                 \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> sum_axis(const BasicTensor<T>&, int);                                                 \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, int);                                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                                         \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>&);                                  \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                                  \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*,           \
                                 const Conv2dParams&);                                                          \
  template BasicTensor<T> batch_norm_train(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                           T, std::vector<T>*, std::vector<T>*);                                \
  template BasicTensor<T> batch_norm_eval(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                          const std::vector<T>&, const std::vector<T>&, T);                     \
  template BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>&, std::size_t, std::size_t);                   \
  template BasicTensor<T> bilinear_resize(const BasicTensor<T>&, std::size_t, std::size_t);                     \
  template BasicTensor<T> l2_normalize_channels(const BasicTensor<T>&, T);                                      \
  template BasicTensor<T> gather_pixels(const BasicTensor<T>&, const std::vector<PixelIndex>&);                 \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,           \
                                                std::int32_t, std::size_t*);                                    \
  template BasicTensor<T> contrastive_from_similarity(const BasicTensor<T>&, const std::vector<ContrastiveTerm>&);

FRM_INSTANTIATE_OPS(float)
FRM_INSTANTIATE_OPS(double)

#undef FRM_INSTANTIATE_OPS

}  // namespace frm
