#include "concept_lattice/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace concept_lattice {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

const NodePtr& node_of(const Tensor& t) { return TensorAccess::node(t); }

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_string(a) << " and " << shape_string(b);
  return os.str();
}

void require_finite(const char* op, const std::vector<double>& data) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

// Builds the result node and, when any input is tracked, records it on the tape.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  require_finite(op, data);
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  out->op = op;
  bool track = false;
  for (const Tensor& in : inputs) {
    if (in.defined() && in.requires_grad()) track = true;
  }
  if (track) {
    out->requires_grad = true;
    for (const Tensor& in : inputs) {
      if (in.defined()) out->inputs.push_back(node_of(in));
    }
    out->backward = std::move(backward_fn);
  }
  return TensorAccess::wrap(std::move(out));
}

Shape broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.size() == 1) return b.shape();
  if (b.size() == 1) return a.shape();
  throw ShapeError(two_shapes(op, a.shape(), b.shape()));
}

// Accumulates an output-shaped gradient into an input that may have been
// broadcast from a single element.
void accumulate(Node& in, const std::vector<double>& g, double scale = 1.0) {
  if (!in.requires_grad) return;
  auto& buf = in.grad_buffer();
  if (buf.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += scale * g[i];
  } else {
    double s = 0.0;
    for (double v : g) s += v;
    buf[0] += scale * s;
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << op << ": expected rank " << rank << ", got shape " << shape_string(t.shape());
    throw ShapeError(os.str());
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& src = *self.inputs[0];
    auto& g = src.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(src.data[i], self.data[i]);
    }
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->data[0];
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

void backward(const Tensor& loss) {
  const NodePtr& root = node_of(loss);
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  if (root->released) throw std::logic_error("backward: tape for this loss was already consumed");
  if (!root->requires_grad) throw std::logic_error("backward: loss does not depend on any tracked tensor");

  // Post-order DFS: every node appears after all of its inputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen{root.get()};
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->inputs.empty()) continue;
    n->inputs.clear();
    n->backward = nullptr;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("add", a, b);
  std::vector<double> out(numel(shape));
  const bool sa = a.size() == 1 && out.size() != 1, sb = b.size() == 1 && out.size() != 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] + b[sb ? 0 : i];
  return make_result("add", std::move(shape), std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("sub", a, b);
  std::vector<double> out(numel(shape));
  const bool sa = a.size() == 1 && out.size() != 1, sb = b.size() == 1 && out.size() != 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] - b[sb ? 0 : i];
  return make_result("sub", std::move(shape), std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad, -1.0);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape("mul", a, b);
  std::vector<double> out(numel(shape));
  const bool sa = a.size() == 1 && out.size() != 1, sb = b.size() == 1 && out.size() != 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[sa ? 0 : i] * b[sb ? 0 : i];
  return make_result("mul", std::move(shape), std::move(out), {a, b}, [sa, sb](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const std::size_t n = self.grad.size();
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[sa ? 0 : i] += self.grad[i] * nb.data[sb ? 0 : i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[sb ? 0 : i] += self.grad[i] * na.data[sa ? 0 : i];
    }
  });
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  return make_result("mul_scalar", a.shape(), std::move(out), {a},
                     [c](Node& self) { accumulate(*self.inputs[0], self.grad, c); });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  return make_result("add_scalar", a.shape(), std::move(out), {a},
                     [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(two_shapes("matmul", a.shape(), b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstMapMat g(self.grad.data(), m, n);
    if (na.requires_grad) {
      MapMat(na.grad_buffer().data(), m, k).noalias() += g * ConstMapMat(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MapMat(nb.grad_buffer().data(), k, n).noalias() += ConstMapMat(na.data.data(), m, k).transpose() * g;
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t plane() const { return out_h * out_w; }
  std::size_t columns() const { return batch * plane(); }
};

// cols is [patch, batch*out_h*out_w], row-major.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.in_ch + c) * g.height * g.width;
          double* dst = row + b * g.plane();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
              const bool inside = y >= 0 && y < static_cast<long>(g.height) && xx >= 0 &&
                                  xx < static_cast<long>(g.width);
              dst[oy * g.out_w + ox] = inside ? plane[y * g.width + xx] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = dx + (b * g.in_ch + c) * g.height * g.width;
          const double* src = row + b * g.plane();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.padding);
            if (y < 0 || y >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.padding);
              if (xx < 0 || xx >= static_cast<long>(g.width)) continue;
              plane[y * g.width + xx] += src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (x.dim(1) != weight.dim(1)) throw ShapeError(two_shapes("conv2d", x.shape(), weight.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                 weight.dim(3), stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    throw ShapeError(two_shapes("conv2d", x.shape(), weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_ch)) {
    throw ShapeError(two_shapes("conv2d (bias)", bias.shape(), weight.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  auto cols = std::make_shared<std::vector<double>>(g.patch() * g.columns());
  im2col(g, x.data().data(), cols->data());
  RowMat y = ConstMapMat(weight.data().data(), g.out_ch, g.patch()) *
             ConstMapMat(cols->data(), g.patch(), g.columns());

  std::vector<double> out(g.batch * g.out_ch * g.plane());
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const double shift = bias.defined() ? bias[o] : 0.0;
      const double* src = y.data() + o * g.columns() + b * g.plane();
      double* dst = out.data() + (b * g.out_ch + o) * g.plane();
      for (std::size_t p = 0; p < g.plane(); ++p) dst[p] = src[p] + shift;
    }
  }

  const bool has_bias = bias.defined();
  return make_result(
      "conv2d", {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(out),
      {x, weight, bias}, [g, cols, has_bias](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        RowMat dy(g.out_ch, g.columns());
        for (std::size_t b = 0; b < g.batch; ++b) {
          for (std::size_t o = 0; o < g.out_ch; ++o) {
            const double* src = self.grad.data() + (b * g.out_ch + o) * g.plane();
            std::copy(src, src + g.plane(), dy.data() + o * g.columns() + b * g.plane());
          }
        }
        ConstMapMat col_mat(cols->data(), g.patch(), g.columns());
        if (nw.requires_grad) {
          MapMat(nw.grad_buffer().data(), g.out_ch, g.patch()).noalias() += dy * col_mat.transpose();
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (std::size_t o = 0; o < g.out_ch; ++o) gb[o] += dy.row(o).sum();
        }
        if (nx.requires_grad) {
          RowMat dcols = ConstMapMat(nw.data.data(), g.out_ch, g.patch()).transpose() * dy;
          col2im(g, dcols.data(), nx.grad_buffer().data());
        }
      });
}

Tensor upsample_zeros(const Tensor& x, std::size_t factor) {
  require_rank("upsample_zeros", x, 4);
  if (factor == 0) throw ShapeError("upsample_zeros: factor must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0) throw ShapeError("upsample_zeros: empty spatial extent " + shape_string(x.shape()));
  const std::size_t oh = factor * (h - 1) + 1, ow = factor * (w - 1) + 1;
  std::vector<double> out(b * c * oh * ow, 0.0);
  for (std::size_t p = 0; p < b * c; ++p) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        out[(p * oh + i * factor) * ow + j * factor] = x[(p * h + i) * w + j];
      }
    }
  }
  return make_result("upsample_zeros", {b, c, oh, ow}, std::move(out), {x},
                     [b, c, h, w, oh, ow, factor](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t p = 0; p < b * c; ++p) {
                         for (std::size_t i = 0; i < h; ++i) {
                           for (std::size_t j = 0; j < w; ++j) {
                             g[(p * h + i) * w + j] += self.grad[(p * oh + i * factor) * ow + j * factor];
                           }
                         }
                       }
                     });
}

Tensor fractional_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                         std::size_t factor, std::size_t padding) {
  return conv2d(upsample_zeros(x, factor), weight, bias, 1, padding);
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary("leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  // log(sigmoid(v)) = min(v, 0) - log1p(exp(-|v|)); derivative sigmoid(-v).
  return unary(
      "log_sigmoid", x, [](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        if (v >= 0.0) {
          const double e = std::exp(-v);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(v));
      });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary("log", x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor instance_norm(const Tensor& x, double eps) {
  require_rank("instance_norm", x, 4);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * hw;
    double mu = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(hw);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[p] = inv;
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = (src[i] - mu) * inv;
  }
  return make_result("instance_norm", x.shape(), std::move(out), {x}, [planes, hw, inv_std](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double n = static_cast<double>(hw);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* dy = self.grad.data() + p * hw;
      const double* y = self.data.data() + p * hw;
      double sum_dy = 0.0, sum_dy_y = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[i];
        sum_dy_y += dy[i] * y[i];
      }
      const double inv = (*inv_std)[p];
      for (std::size_t i = 0; i < hw; ++i) {
        g[p * hw + i] += inv / n * (n * dy[i] - sum_dy - y[i] * sum_dy_y);
      }
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  return make_result("mean", {}, {s / n}, {x}, [n](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double d = self.grad[0] / n;
    for (double& v : g) v += d;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) throw ShapeError(two_shapes("reshape", x.shape(), shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [](Node& self) { accumulate(*self.inputs[0], self.grad); });
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

constexpr char kTensorMagic[4] = {'C', 'L', 'T', 'N'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("tensor: truncated header");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  write_u32(out, kTensorFormatVersion);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("tensor: truncated header");
  if (!std::equal(magic, magic + 4, kTensorMagic)) throw FormatError("tensor: bad magic");
  const std::uint32_t version = read_u32(in);
  if (version != kTensorFormatVersion) {
    throw FormatError("tensor: unsupported version " + std::to_string(version));
  }
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw FormatError("tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = read_u32(in);
  std::vector<double> data(numel(shape));
  if (!in.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    throw FormatError("tensor: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace concept_lattice
