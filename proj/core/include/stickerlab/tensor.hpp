#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stickerlab/rng.hpp"

namespace stickerlab {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Operation tags recorded on the tape. "leaf" marks parameters and constants.
enum class Op {
  leaf,
  add,
  mul,
  scale,
  matmul,
  conv2d,
  conv1d_time,
  softmax,
  attention,
  group_norm,
  silu,
  reshape,
  permute,
  concat,
  broadcast,
  upsample2x,
  mean,
  mse,
};

const char* op_name(Op op);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One tape entry: the produced value plus everything backward needs. Inputs
// are only retained while autograd is enabled and some input requires grad,
// so inference graphs free themselves as handles go out of scope.
struct Node {
  Op op = Op::leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::vector<int> iattr;                  // op-specific integer attributes
  std::vector<double> dattr;               // op-specific scalar attributes
  std::vector<std::vector<double>> saved;  // cached forward values for backward

  int64_t size() const { return static_cast<int64_t>(value.size()); }
};

// Autograd recording toggle (thread-local). Forward values are always
// computed; only tape recording is suppressed.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Multiply-accumulate counter ticked by matmul/conv/attention forwards.
int64_t flop_count();
void reset_flop_count();

// Dense double-precision tensor handle. Copies share the underlying node;
// values are immutable after construction except for leaf data updated by an
// optimizer between graphs and grad accumulation during backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double fill, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  bool requires_grad() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();  // leaves only (parameter updates)

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;  // single-element tensors
  double at(std::initializer_list<int> idx) const;

  Tensor detach() const;  // same values, fresh constant leaf

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

// Elementwise and linear-algebra ops. All validate shapes and throw
// std::invalid_argument naming the offending dimension.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);  // add(a, scale(b, -1))
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);

// 2D convolution over [N, C, H, W] with odd kernel and zero "same" padding.
// Bias is optional ([Cout]); stride 2 requires even extents.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1);

// Nearest-neighbor 2x spatial upsample of [N, C, H, W].
Tensor upsample2x(const Tensor& x);

// 1D convolution across the leading time axis of [T, C, H, W]; spatial
// positions are independent. Odd kernel, zero padding in time.
Tensor conv1d_time(const Tensor& x, const Tensor& w);
Tensor conv1d_time(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor softmax(const Tensor& x);  // over the last dimension
// softmax(q kᵀ / √d) v with q:[n,d], k:[m,d], v:[m,dv].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Per-leading-index group normalization of [N, C, H, W]; gamma/beta are [C].
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, double eps = 1e-5);
Tensor silu(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
// Leading-dimension expansion only: x.shape must equal a suffix of target.
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor mean_all(const Tensor& x);               // scalar
Tensor mse(const Tensor& a, const Tensor& b);   // scalar

// Reverse-mode sweep from a scalar loss. Every requires_grad leaf reachable
// from it receives d(loss)/d(leaf) accumulated into its grad.
void backward(const Tensor& loss);

// Max over elements of |autodiff - central difference| / (|central| + eps)
// for a scalar-valued f, central step `step`.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-8,
                               double step = 1e-5);

}  // namespace stickerlab
