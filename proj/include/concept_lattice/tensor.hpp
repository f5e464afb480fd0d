#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace concept_lattice {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised when operand shapes do not satisfy an op's shape rule.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN/Inf, or its input leaves the op's domain.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when serialized bytes do not match the expected layout.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// One tape entry. Leaves have no inputs and no backward function.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense fp64 row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a handle; copies share the underlying node. Values are
/// immutable after construction (except through `mutable_data`, which is
/// reserved for optimizers), and the gradient buffer is populated by
/// `backward`. Every op records itself on the tape when at least one input
/// requires a gradient.
class Tensor {
public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// False only for a default-constructed handle (used for "no bias").
  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no tape history, no gradient tracking.
  Tensor detach() const;

  /// Identity of the underlying node (not of the values).
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const char* op_name() const { return node_->op; }

private:
  friend struct TensorAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node);
  std::shared_ptr<detail::Node> node_;
};

/// Propagates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient, accumulating into existing leaf gradients. The interior tape is
/// released afterwards.
void backward(const Tensor& loss);

// Elementwise arithmetic. The only broadcasting permitted is a one-element
// tensor against any shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(double c, const Tensor& a);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

/// NCHW convolution with zero padding. `weight` is [out, in, kh, kw];
/// `bias` is [out] or an empty Tensor().
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);

/// Inserts (factor-1) zeros between neighbouring pixels:
/// [B,C,H,W] -> [B,C,factor*(H-1)+1, factor*(W-1)+1].
Tensor upsample_zeros(const Tensor& x, std::size_t factor);

/// Fractionally-strided convolution with stride 1/`factor`: zero insertion
/// followed by a stride-1 `conv2d`. Output side is
///   factor*(H-1) + 1 + 2*padding - k + 1,
/// so factor=2, k=4, padding=2 maps H to exactly 2H.
Tensor fractional_conv2d(const Tensor& x, const Tensor& weight,
                         const Tensor& bias, std::size_t factor,
                         std::size_t padding);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(sigmoid(x)) without overflow for large |x|.
Tensor log_sigmoid(const Tensor& x);
/// Natural log; a non-positive input is a NumericError.
Tensor log(const Tensor& x);
/// |x| with subgradient 0 at x == 0.
Tensor abs(const Tensor& x);

/// Normalizes each (batch, channel) plane of an NCHW tensor to zero mean and
/// unit variance (biased variance, no affine parameters).
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

/// Mean over all elements -> one-element tensor of shape [].
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Serialization: "CLTN", version u32, rank u32, dims u32[rank], then
// little-endian fp64 values in row-major order.
inline constexpr std::uint32_t kTensorFormatVersion = 1;
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace concept_lattice
