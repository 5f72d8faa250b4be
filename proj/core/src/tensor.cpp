#include "stickerlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace stickerlab {

namespace {

thread_local bool g_grad_enabled = true;
thread_local int64_t g_flops = 0;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::conv1d_time: return "conv1d-over-time";
    case Op::softmax: return "softmax";
    case Op::attention: return "scaled-dot-attention";
    case Op::group_norm: return "group-normalize";
    case Op::silu: return "silu";
    case Op::reshape: return "reshape";
    case Op::permute: return "permute";
    case Op::concat: return "concat-channels";
    case Op::broadcast: return "broadcast";
    case Op::upsample2x: return "upsample2x";
    case Op::mean: return "mean";
    case Op::mse: return "mse";
  }
  return "?";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

int64_t flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }

// ---------------------------------------------------------------------------
// Tensor handle

namespace {

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->op = Op::leaf;
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// Allocates the result node; the tape entry (inputs + attrs) is only kept
// when grad is enabled and some input requires it.
NodePtr make_result(Op op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                    std::vector<int> iattr = {}, std::vector<double> dattr = {},
                    std::vector<std::vector<double>> saved = {}) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    n->op = op;
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const auto& t : inputs) n->inputs.push_back(t.node());
    n->iattr = std::move(iattr);
    n->dattr = std::move(dattr);
    n->saved = std::move(saved);
  } else {
    n->op = op;
  }
  return n;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double fill, bool requires_grad) {
  return Tensor(make_leaf(shape, std::vector<double>(numel(shape), fill), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  check(numel(shape) == static_cast<int64_t>(data.size()),
        "from_data: shape " + shape_str(shape) + " wants " + std::to_string(numel(shape)) + " values, got " +
            std::to_string(data.size()));
  return Tensor(make_leaf(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(numel(shape));
  for (auto& v : d) v = rng.normal() * stddev;
  return Tensor(make_leaf(shape, std::move(d), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::size() const { return node_->size(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::data() const { return node_->value; }

std::vector<double>& Tensor::mutable_data() {
  if (node_->op != Op::leaf) throw std::logic_error("mutable_data: only leaf tensors may be mutated");
  return node_->value;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad: no gradient present (was backward run?)");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  check(size() == 1, "item: tensor has " + std::to_string(size()) + " elements, expected 1");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  check(idx.size() == s.size(), "at: rank mismatch");
  int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

Tensor Tensor::detach() const { return Tensor(make_leaf(node_->shape, node_->value, false)); }

// ---------------------------------------------------------------------------
// Forward ops

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor(make_result(Op::add, a.shape(), std::move(out), {a, b}));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor(make_result(Op::mul, a.shape(), std::move(out), {a, b}));
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return Tensor(make_result(Op::scale, x.shape(), std::move(out), {x}, {}, {c}));
}

Tensor add_scalar(const Tensor& x, double c) { return add(x, Tensor::full(x.shape(), c)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: expects rank-2 operands");
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  check(k == k2, "matmul: inner dimensions differ (a.shape[1]=" + std::to_string(k) +
                     " vs b.shape[0]=" + std::to_string(k2) + ")");
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<size_t>(i) * k + p];
      const double* brow = &bv[static_cast<size_t>(p) * n];
      double* crow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  g_flops += static_cast<int64_t>(m) * k * n;
  return Tensor(make_result(Op::matmul, {m, n}, std::move(out), {a, b}));
}

namespace {

void conv2d_validate(const Tensor& x, const Tensor& w, const Tensor* bias, int stride) {
  check(x.shape().size() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  check(w.shape().size() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  check(x.shape()[1] == w.shape()[1], "conv2d: channel mismatch (input C=" + std::to_string(x.shape()[1]) +
                                          " vs weight Cin=" + std::to_string(w.shape()[1]) + ")");
  check(w.shape()[2] % 2 == 1 && w.shape()[3] % 2 == 1, "conv2d: kernel extents must be odd");
  check(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  if (stride == 2)
    check(x.shape()[2] % 2 == 0 && x.shape()[3] % 2 == 0, "conv2d: stride 2 needs even spatial extents, got " +
                                                              shape_str(x.shape()));
  if (bias) check(bias->shape() == Shape{w.shape()[0]}, "conv2d: bias must be [Cout]");
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int stride) {
  conv2d_validate(x, w, bias, stride);
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const int ph = kh / 2, pw = kw / 2;
  const int Ho = H / stride, Wo = W / stride;
  std::vector<double> out(static_cast<size_t>(N) * Co * Ho * Wo, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  if (bias) {
    const auto& bv = bias->data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        double* o = &out[((static_cast<size_t>(n) * Co + co) * Ho) * Wo];
        const double b = bv[co];
        for (int i = 0; i < Ho * Wo; ++i) o[i] = b;
      }
  }
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Co; ++co) {
      double* oplane = &out[((static_cast<size_t>(n) * Co + co) * Ho) * Wo];
      for (int ci = 0; ci < C; ++ci) {
        const double* xplane = &xv[((static_cast<size_t>(n) * C + ci) * H) * W];
        const double* wk = &wv[((static_cast<size_t>(co) * C + ci) * kh) * kw];
        for (int dy = 0; dy < kh; ++dy) {
          for (int dx = 0; dx < kw; ++dx) {
            const double wght = wk[dy * kw + dx];
            if (wght == 0.0) continue;
            if (stride == 1) {
              const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
              const int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
              for (int oy = y0; oy < y1; ++oy) {
                const double* xrow = &xplane[(oy + dy - ph) * W];
                double* orow = &oplane[oy * W];
                for (int ox = x0; ox < x1; ++ox) orow[ox] += wght * xrow[ox + dx - pw];
              }
            } else {
              for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * stride + dy - ph;
                if (iy < 0 || iy >= H) continue;
                const double* xrow = &xplane[iy * W];
                double* orow = &oplane[oy * Wo];
                for (int ox = 0; ox < Wo; ++ox) {
                  const int ix = ox * stride + dx - pw;
                  if (ix < 0 || ix >= W) continue;
                  orow[ox] += wght * xrow[ix];
                }
              }
            }
          }
        }
      }
    }
  }
  g_flops += static_cast<int64_t>(N) * Co * C * kh * kw * Ho * Wo;
  std::vector<Tensor> inputs = {x, w};
  if (bias) inputs.push_back(*bias);
  return Tensor(make_result(Op::conv2d, {N, Co, Ho, Wo}, std::move(out), inputs, {stride}));
}

Tensor conv1d_time_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
  check(x.shape().size() == 4, "conv1d-over-time: input must be [T,C,H,W], got " + shape_str(x.shape()));
  check(w.shape().size() == 3, "conv1d-over-time: weight must be [Cout,Cin,k], got " + shape_str(w.shape()));
  check(x.shape()[1] == w.shape()[1], "conv1d-over-time: channel mismatch (input C=" + std::to_string(x.shape()[1]) +
                                          " vs weight Cin=" + std::to_string(w.shape()[1]) + ")");
  check(w.shape()[2] % 2 == 1, "conv1d-over-time: kernel extent must be odd");
  if (bias) check(bias->shape() == Shape{w.shape()[0]}, "conv1d-over-time: bias must be [Cout]");
  const int T = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Co = w.shape()[0], k = w.shape()[2];
  const int pc = k / 2;
  const int sp = H * W;
  std::vector<double> out(static_cast<size_t>(T) * Co * sp, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int t = 0; t < T; ++t) {
    for (int co = 0; co < Co; ++co) {
      double* o = &out[(static_cast<size_t>(t) * Co + co) * sp];
      if (bias) {
        const double b = bias->data()[co];
        for (int i = 0; i < sp; ++i) o[i] = b;
      }
      for (int dt = 0; dt < k; ++dt) {
        const int ts = t + dt - pc;
        if (ts < 0 || ts >= T) continue;
        for (int ci = 0; ci < C; ++ci) {
          const double wght = wv[(static_cast<size_t>(co) * C + ci) * k + dt];
          if (wght == 0.0) continue;
          const double* xp = &xv[(static_cast<size_t>(ts) * C + ci) * sp];
          for (int i = 0; i < sp; ++i) o[i] += wght * xp[i];
        }
      }
    }
  }
  g_flops += static_cast<int64_t>(T) * Co * C * k * sp;
  std::vector<Tensor> inputs = {x, w};
  if (bias) inputs.push_back(*bias);
  return Tensor(make_result(Op::conv1d_time, {T, Co, H, W}, std::move(out), inputs));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride) { return conv2d_impl(x, w, nullptr, stride); }
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  return conv2d_impl(x, w, &bias, stride);
}

Tensor upsample2x(const Tensor& x) {
  check(x.shape().size() == 4, "upsample2x: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::vector<double> out(static_cast<size_t>(N) * C * 4 * H * W);
  const auto& xv = x.data();
  for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
    const double* src = &xv[p * H * W];
    double* dst = &out[p * 4 * H * W];
    for (int y = 0; y < H; ++y)
      for (int x2 = 0; x2 < W; ++x2) {
        const double v = src[y * W + x2];
        dst[(2 * y) * 2 * W + 2 * x2] = v;
        dst[(2 * y) * 2 * W + 2 * x2 + 1] = v;
        dst[(2 * y + 1) * 2 * W + 2 * x2] = v;
        dst[(2 * y + 1) * 2 * W + 2 * x2 + 1] = v;
      }
  }
  return Tensor(make_result(Op::upsample2x, {N, C, 2 * H, 2 * W}, std::move(out), {x}));
}
Tensor conv1d_time(const Tensor& x, const Tensor& w) { return conv1d_time_impl(x, w, nullptr); }
Tensor conv1d_time(const Tensor& x, const Tensor& w, const Tensor& bias) { return conv1d_time_impl(x, w, &bias); }

Tensor softmax(const Tensor& x) {
  check(!x.shape().empty(), "softmax: rank must be >= 1");
  const int last = x.shape().back();
  const int64_t rows = x.size() / last;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = &xv[r * last];
    double* o = &out[r * last];
    double mx = in[0];
    for (int j = 1; j < last; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < last; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int j = 0; j < last; ++j) o[j] /= sum;
  }
  std::vector<std::vector<double>> saved = {out};
  return Tensor(make_result(Op::softmax, x.shape(), std::move(out), {x}, {}, {}, std::move(saved)));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const size_t rank = q.shape().size();
  check((rank == 2 || rank == 3) && k.shape().size() == rank && v.shape().size() == rank,
        "scaled-dot-attention: q/k/v must share rank 2 (single) or 3 (batched)");
  const bool batched = rank == 3;
  const int B = batched ? q.shape()[0] : 1;
  if (batched)
    check(k.shape()[0] == B && v.shape()[0] == B, "scaled-dot-attention: batch dims differ (q " +
                                                      std::to_string(B) + ", k " + std::to_string(k.shape()[0]) +
                                                      ", v " + std::to_string(v.shape()[0]) + ")");
  const int n = q.shape()[rank - 2], d = q.shape()[rank - 1];
  const int m = k.shape()[rank - 2], dk = k.shape()[rank - 1];
  const int mv = v.shape()[rank - 2], dv = v.shape()[rank - 1];
  check(d == dk, "scaled-dot-attention: q dim " + std::to_string(d) + " vs k dim " + std::to_string(dk));
  check(m == mv, "scaled-dot-attention: k rows " + std::to_string(m) + " vs v rows " + std::to_string(mv));
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& qv = q.data();
  const auto& kv = k.data();
  const auto& vv = v.data();
  std::vector<double> probs(static_cast<size_t>(B) * n * m, 0.0);
  std::vector<double> out(static_cast<size_t>(B) * n * dv, 0.0);
  for (int b = 0; b < B; ++b) {
    const double* qb = &qv[static_cast<size_t>(b) * n * d];
    const double* kb = &kv[static_cast<size_t>(b) * m * d];
    const double* vb = &vv[static_cast<size_t>(b) * m * dv];
    double* pb = &probs[static_cast<size_t>(b) * n * m];
    double* ob = &out[static_cast<size_t>(b) * n * dv];
    for (int i = 0; i < n; ++i) {
      double* prow = &pb[static_cast<size_t>(i) * m];
      const double* qi = &qb[static_cast<size_t>(i) * d];
      for (int j = 0; j < m; ++j) {
        double acc = 0.0;
        const double* kj = &kb[static_cast<size_t>(j) * d];
        for (int p = 0; p < d; ++p) acc += qi[p] * kj[p];
        prow[j] = acc * s;
      }
      double mx = prow[0];
      for (int j = 1; j < m; ++j) mx = std::max(mx, prow[j]);
      double sum = 0.0;
      for (int j = 0; j < m; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        sum += prow[j];
      }
      for (int j = 0; j < m; ++j) prow[j] /= sum;
      double* orow = &ob[static_cast<size_t>(i) * dv];
      for (int j = 0; j < m; ++j) {
        const double p = prow[j];
        const double* vrow = &vb[static_cast<size_t>(j) * dv];
        for (int c = 0; c < dv; ++c) orow[c] += p * vrow[c];
      }
    }
  }
  g_flops += static_cast<int64_t>(B) * n * m * (d + dv);
  Shape out_shape = batched ? Shape{B, n, dv} : Shape{n, dv};
  std::vector<std::vector<double>> saved = {std::move(probs)};
  return Tensor(make_result(Op::attention, out_shape, std::move(out), {q, k, v}, {}, {}, std::move(saved)));
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, double eps) {
  check(x.shape().size() == 4, "group-normalize: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(groups >= 1 && C % groups == 0,
        "group-normalize: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
  check(gamma.shape() == Shape{C}, "group-normalize: gamma must be [C]");
  check(beta.shape() == Shape{C}, "group-normalize: beta must be [C]");
  const int cg = C / groups;
  const int sp = H * W;
  const int64_t gsize = static_cast<int64_t>(cg) * sp;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(x.size());
  std::vector<double> mean_inv(static_cast<size_t>(N) * groups * 2);  // (mu, inv_std) pairs
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const double* base = &xv[(static_cast<size_t>(n) * C + static_cast<size_t>(g) * cg) * sp];
      double mu = 0.0;
      for (int64_t i = 0; i < gsize; ++i) mu += base[i];
      mu /= static_cast<double>(gsize);
      double var = 0.0;
      for (int64_t i = 0; i < gsize; ++i) {
        const double dv = base[i] - mu;
        var += dv * dv;
      }
      var /= static_cast<double>(gsize);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean_inv[(static_cast<size_t>(n) * groups + g) * 2] = mu;
      mean_inv[(static_cast<size_t>(n) * groups + g) * 2 + 1] = inv;
      for (int c = 0; c < cg; ++c) {
        const int ch = g * cg + c;
        const double* xp = &xv[(static_cast<size_t>(n) * C + ch) * sp];
        double* op = &out[(static_cast<size_t>(n) * C + ch) * sp];
        const double gm = gv[ch], bt = bv[ch];
        for (int i = 0; i < sp; ++i) op[i] = gm * (xp[i] - mu) * inv + bt;
      }
    }
  }
  std::vector<std::vector<double>> saved = {std::move(mean_inv)};
  return Tensor(
      make_result(Op::group_norm, x.shape(), std::move(out), {x, gamma, beta}, {groups}, {eps}, std::move(saved)));
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  return Tensor(make_result(Op::silu, x.shape(), std::move(out), {x}));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  check(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " (" + std::to_string(x.size()) +
                                      " elements) cannot become " + shape_str(shape));
  return Tensor(make_result(Op::reshape, shape, x.data(), {x}));
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  const int rank = static_cast<int>(s.size());
  check(static_cast<int>(perm.size()) == rank, "permute: perm rank mismatch");
  Shape out_shape(rank);
  std::vector<bool> seen(rank, false);
  for (int i = 0; i < rank; ++i) {
    check(perm[i] >= 0 && perm[i] < rank && !seen[perm[i]], "permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  std::vector<int64_t> in_strides(rank, 1), out_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * s[i + 1];
  for (int i = rank - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  std::vector<int> idx(rank, 0);
  const int64_t n = x.size();
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (int i = 0; i < rank; ++i) src += static_cast<int64_t>(idx[i]) * in_strides[perm[i]];
    out[o] = xv[src];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<int> iattr(perm.begin(), perm.end());
  return Tensor(make_result(Op::permute, out_shape, std::move(out), {x}, std::move(iattr)));
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: no inputs");
  const Shape& first = xs[0].shape();
  const int rank = static_cast<int>(first.size());
  check(axis >= 0 && axis < rank, "concat: axis " + std::to_string(axis) + " out of range for rank " +
                                      std::to_string(rank));
  Shape out_shape = first;
  int total = 0;
  for (const auto& t : xs) {
    check(static_cast<int>(t.shape().size()) == rank, "concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis)
        check(t.shape()[i] == first[i], "concat: dimension " + std::to_string(i) + " differs (" +
                                            std::to_string(t.shape()[i]) + " vs " + std::to_string(first[i]) + ")");
    total += t.shape()[axis];
  }
  out_shape[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (int i = axis + 1; i < rank; ++i) inner *= first[i];
  std::vector<double> out(numel(out_shape));
  int64_t offset = 0;
  for (const auto& t : xs) {
    const int64_t block = static_cast<int64_t>(t.shape()[axis]) * inner;
    const auto& tv = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(&tv[o * block], block, &out[o * total * inner + offset]);
    offset += block;
  }
  std::vector<int> iattr = {axis};
  for (const auto& t : xs) iattr.push_back(t.shape()[axis]);
  return Tensor(make_result(Op::concat, out_shape, std::move(out), xs, std::move(iattr)));
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  const Shape& s = x.shape();
  check(target.size() >= s.size(), "broadcast: target rank smaller than input rank");
  const size_t off = target.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i)
    check(target[off + i] == s[i], "broadcast: only leading-dimension expansion is supported; trailing dim " +
                                       std::to_string(i) + " is " + std::to_string(s[i]) + " vs target " +
                                       std::to_string(target[off + i]));
  const int64_t reps = numel(target) / std::max<int64_t>(1, x.size());
  std::vector<double> out(numel(target));
  const auto& xv = x.data();
  for (int64_t r = 0; r < reps; ++r) std::copy(xv.begin(), xv.end(), out.begin() + r * x.size());
  return Tensor(make_result(Op::broadcast, target, std::move(out), {x}));
}

Tensor mean_all(const Tensor& x) {
  check(x.size() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor(make_result(Op::mean, {1}, {acc / static_cast<double>(x.size())}, {x}));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  return Tensor(make_result(Op::mse, {1}, {acc / static_cast<double>(a.size())}, {a, b}));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

std::vector<double>& grad_of(const NodePtr& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

void backward_add(Node& n) {
  for (int s = 0; s < 2; ++s) {
    if (!n.inputs[s]->requires_grad) continue;
    auto& g = grad_of(n.inputs[s]);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

void backward_mul(Node& n) {
  const auto& a = n.inputs[0]->value;
  const auto& b = n.inputs[1]->value;
  if (n.inputs[0]->requires_grad) {
    auto& g = grad_of(n.inputs[0]);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b[i];
  }
  if (n.inputs[1]->requires_grad) {
    auto& g = grad_of(n.inputs[1]);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a[i];
  }
}

void backward_scale(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  const double c = n.dattr[0];
  auto& g = grad_of(n.inputs[0]);
  for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
}

void backward_matmul(Node& n) {
  const int m = n.inputs[0]->shape[0], k = n.inputs[0]->shape[1], c = n.shape[1];
  const auto& av = n.inputs[0]->value;
  const auto& bv = n.inputs[1]->value;
  if (n.inputs[0]->requires_grad) {
    auto& ga = grad_of(n.inputs[0]);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* grow = &n.grad[static_cast<size_t>(i) * c];
        const double* brow = &bv[static_cast<size_t>(p) * c];
        for (int j = 0; j < c; ++j) acc += grow[j] * brow[j];
        ga[static_cast<size_t>(i) * k + p] += acc;
      }
  }
  if (n.inputs[1]->requires_grad) {
    auto& gb = grad_of(n.inputs[1]);
    for (int i = 0; i < m; ++i) {
      const double* arow = &av[static_cast<size_t>(i) * k];
      const double* grow = &n.grad[static_cast<size_t>(i) * c];
      for (int p = 0; p < k; ++p) {
        const double aip = arow[p];
        if (aip == 0.0) continue;
        double* gbrow = &gb[static_cast<size_t>(p) * c];
        for (int j = 0; j < c; ++j) gbrow[j] += aip * grow[j];
      }
    }
  }
}

void backward_conv2d(Node& n) {
  const auto& xn = n.inputs[0];
  const auto& wn = n.inputs[1];
  const bool has_bias = n.inputs.size() == 3;
  const int N = xn->shape[0], C = xn->shape[1], H = xn->shape[2], W = xn->shape[3];
  const int Co = wn->shape[0], kh = wn->shape[2], kw = wn->shape[3];
  const int ph = kh / 2, pw = kw / 2;
  const int stride = n.iattr.empty() ? 1 : n.iattr[0];
  const int Ho = n.shape[2], Wo = n.shape[3];
  const auto& xv = xn->value;
  const auto& wv = wn->value;
  std::vector<double>* gx = xn->requires_grad ? &grad_of(xn) : nullptr;
  std::vector<double>* gw = wn->requires_grad ? &grad_of(wn) : nullptr;
  std::vector<double>* gb = has_bias && n.inputs[2]->requires_grad ? &grad_of(n.inputs[2]) : nullptr;
  for (int nn = 0; nn < N; ++nn) {
    for (int co = 0; co < Co; ++co) {
      const double* gplane = &n.grad[((static_cast<size_t>(nn) * Co + co) * Ho) * Wo];
      if (gb) {
        double acc = 0.0;
        for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
        (*gb)[co] += acc;
      }
      for (int ci = 0; ci < C; ++ci) {
        const double* xplane = &xv[((static_cast<size_t>(nn) * C + ci) * H) * W];
        const double* wk = &wv[((static_cast<size_t>(co) * C + ci) * kh) * kw];
        double* gxplane = gx ? &(*gx)[((static_cast<size_t>(nn) * C + ci) * H) * W] : nullptr;
        double* gwk = gw ? &(*gw)[((static_cast<size_t>(co) * C + ci) * kh) * kw] : nullptr;
        for (int dy = 0; dy < kh; ++dy) {
          for (int dx = 0; dx < kw; ++dx) {
            double wacc = 0.0;
            const double wght = wk[dy * kw + dx];
            if (stride == 1) {
              const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
              const int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
              for (int oy = y0; oy < y1; ++oy) {
                const double* grow = &gplane[oy * W];
                const double* xrow = &xplane[(oy + dy - ph) * W];
                double* gxrow = gxplane ? &gxplane[(oy + dy - ph) * W] : nullptr;
                for (int ox = x0; ox < x1; ++ox) {
                  const double g = grow[ox];
                  wacc += g * xrow[ox + dx - pw];
                  if (gxrow) gxrow[ox + dx - pw] += g * wght;
                }
              }
            } else {
              for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * stride + dy - ph;
                if (iy < 0 || iy >= H) continue;
                const double* grow = &gplane[oy * Wo];
                const double* xrow = &xplane[iy * W];
                double* gxrow = gxplane ? &gxplane[iy * W] : nullptr;
                for (int ox = 0; ox < Wo; ++ox) {
                  const int ix = ox * stride + dx - pw;
                  if (ix < 0 || ix >= W) continue;
                  const double g = grow[ox];
                  wacc += g * xrow[ix];
                  if (gxrow) gxrow[ix] += g * wght;
                }
              }
            }
            if (gwk) gwk[dy * kw + dx] += wacc;
          }
        }
      }
    }
  }
}

void backward_upsample2x(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  const int H = n.inputs[0]->shape[2], W = n.inputs[0]->shape[3];
  const int64_t planes = static_cast<int64_t>(n.inputs[0]->shape[0]) * n.inputs[0]->shape[1];
  auto& g = grad_of(n.inputs[0]);
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = &n.grad[p * 4 * H * W];
    double* dst = &g[p * H * W];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        dst[y * W + x] += src[(2 * y) * 2 * W + 2 * x] + src[(2 * y) * 2 * W + 2 * x + 1] +
                          src[(2 * y + 1) * 2 * W + 2 * x] + src[(2 * y + 1) * 2 * W + 2 * x + 1];
  }
}

void backward_conv1d_time(Node& n) {
  const auto& xn = n.inputs[0];
  const auto& wn = n.inputs[1];
  const bool has_bias = n.inputs.size() == 3;
  const int T = xn->shape[0], C = xn->shape[1], H = xn->shape[2], W = xn->shape[3];
  const int Co = wn->shape[0], k = wn->shape[2];
  const int pc = k / 2;
  const int sp = H * W;
  const auto& xv = xn->value;
  const auto& wv = wn->value;
  std::vector<double>* gx = xn->requires_grad ? &grad_of(xn) : nullptr;
  std::vector<double>* gw = wn->requires_grad ? &grad_of(wn) : nullptr;
  std::vector<double>* gb = has_bias && n.inputs[2]->requires_grad ? &grad_of(n.inputs[2]) : nullptr;
  for (int t = 0; t < T; ++t) {
    for (int co = 0; co < Co; ++co) {
      const double* g = &n.grad[(static_cast<size_t>(t) * Co + co) * sp];
      if (gb) {
        double acc = 0.0;
        for (int i = 0; i < sp; ++i) acc += g[i];
        (*gb)[co] += acc;
      }
      for (int dt = 0; dt < k; ++dt) {
        const int ts = t + dt - pc;
        if (ts < 0 || ts >= T) continue;
        for (int ci = 0; ci < C; ++ci) {
          const double wght = wv[(static_cast<size_t>(co) * C + ci) * k + dt];
          const double* xp = &xv[(static_cast<size_t>(ts) * C + ci) * sp];
          double wacc = 0.0;
          double* gxp = gx ? &(*gx)[(static_cast<size_t>(ts) * C + ci) * sp] : nullptr;
          for (int i = 0; i < sp; ++i) {
            wacc += g[i] * xp[i];
            if (gxp) gxp[i] += g[i] * wght;
          }
          if (gw) (*gw)[(static_cast<size_t>(co) * C + ci) * k + dt] += wacc;
        }
      }
    }
  }
}

void backward_softmax(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  const int last = n.shape.back();
  const int64_t rows = n.size() / last;
  const auto& y = n.saved[0];
  auto& g = grad_of(n.inputs[0]);
  for (int64_t r = 0; r < rows; ++r) {
    const double* yr = &y[r * last];
    const double* gr = &n.grad[r * last];
    double dot = 0.0;
    for (int j = 0; j < last; ++j) dot += gr[j] * yr[j];
    double* go = &g[r * last];
    for (int j = 0; j < last; ++j) go[j] += yr[j] * (gr[j] - dot);
  }
}

void backward_attention(Node& n) {
  const auto& qn = n.inputs[0];
  const auto& kn = n.inputs[1];
  const auto& vn = n.inputs[2];
  const size_t rank = qn->shape.size();
  const int B = rank == 3 ? qn->shape[0] : 1;
  const int nq = qn->shape[rank - 2], d = qn->shape[rank - 1];
  const int m = kn->shape[rank - 2], dv = vn->shape[rank - 1];
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& probs = n.saved[0];
  const auto& qv = qn->value;
  const auto& kv = kn->value;
  const auto& vv = vn->value;
  std::vector<double>* gq = qn->requires_grad ? &grad_of(qn) : nullptr;
  std::vector<double>* gk = kn->requires_grad ? &grad_of(kn) : nullptr;
  std::vector<double>* gv = vn->requires_grad ? &grad_of(vn) : nullptr;
  std::vector<double> dprobs(static_cast<size_t>(nq) * m);
  for (int b = 0; b < B; ++b) {
    const double* qb = &qv[static_cast<size_t>(b) * nq * d];
    const double* kb = &kv[static_cast<size_t>(b) * m * d];
    const double* vb = &vv[static_cast<size_t>(b) * m * dv];
    const double* pb = &probs[static_cast<size_t>(b) * nq * m];
    const double* gb = &n.grad[static_cast<size_t>(b) * nq * dv];
    std::fill(dprobs.begin(), dprobs.end(), 0.0);
    // dV and dP
    for (int i = 0; i < nq; ++i) {
      const double* grow = &gb[static_cast<size_t>(i) * dv];
      const double* prow = &pb[static_cast<size_t>(i) * m];
      double* dprow = &dprobs[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) {
        const double* vrow = &vb[static_cast<size_t>(j) * dv];
        double acc = 0.0;
        for (int c = 0; c < dv; ++c) acc += grow[c] * vrow[c];
        dprow[j] = acc;
        if (gv) {
          double* gvrow = &(*gv)[(static_cast<size_t>(b) * m + j) * dv];
          const double p = prow[j];
          for (int c = 0; c < dv; ++c) gvrow[c] += p * grow[c];
        }
      }
    }
    // softmax backward into raw scores, then into q and k
    for (int i = 0; i < nq; ++i) {
      const double* prow = &pb[static_cast<size_t>(i) * m];
      const double* dprow = &dprobs[static_cast<size_t>(i) * m];
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += dprow[j] * prow[j];
      const double* qi = &qb[static_cast<size_t>(i) * d];
      for (int j = 0; j < m; ++j) {
        const double da = prow[j] * (dprow[j] - dot) * s;
        if (da == 0.0) continue;
        const double* kj = &kb[static_cast<size_t>(j) * d];
        if (gq) {
          double* gqi = &(*gq)[(static_cast<size_t>(b) * nq + i) * d];
          for (int p = 0; p < d; ++p) gqi[p] += da * kj[p];
        }
        if (gk) {
          double* gkj = &(*gk)[(static_cast<size_t>(b) * m + j) * d];
          for (int p = 0; p < d; ++p) gkj[p] += da * qi[p];
        }
      }
    }
  }
}

void backward_group_norm(Node& n) {
  const auto& xn = n.inputs[0];
  const auto& gn = n.inputs[1];
  const auto& bn = n.inputs[2];
  const int N = xn->shape[0], C = xn->shape[1], H = xn->shape[2], W = xn->shape[3];
  const int groups = n.iattr[0];
  const int cg = C / groups;
  const int sp = H * W;
  const int64_t gsize = static_cast<int64_t>(cg) * sp;
  const auto& xv = xn->value;
  const auto& gv = gn->value;
  const auto& stats = n.saved[0];
  std::vector<double>* gx = xn->requires_grad ? &grad_of(xn) : nullptr;
  std::vector<double>* gg = gn->requires_grad ? &grad_of(gn) : nullptr;
  std::vector<double>* gb = bn->requires_grad ? &grad_of(bn) : nullptr;
  for (int nn = 0; nn < N; ++nn) {
    for (int g = 0; g < groups; ++g) {
      const double mu = stats[(static_cast<size_t>(nn) * groups + g) * 2];
      const double inv = stats[(static_cast<size_t>(nn) * groups + g) * 2 + 1];
      // Accumulate the two reductions over the group.
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int c = 0; c < cg; ++c) {
        const int ch = g * cg + c;
        const double* xp = &xv[(static_cast<size_t>(nn) * C + ch) * sp];
        const double* dy = &n.grad[(static_cast<size_t>(nn) * C + ch) * sp];
        const double gm = gv[ch];
        for (int i = 0; i < sp; ++i) {
          const double xh = (xp[i] - mu) * inv;
          const double dxh = dy[i] * gm;
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
      }
      const double inv_m = 1.0 / static_cast<double>(gsize);
      for (int c = 0; c < cg; ++c) {
        const int ch = g * cg + c;
        const double* xp = &xv[(static_cast<size_t>(nn) * C + ch) * sp];
        const double* dy = &n.grad[(static_cast<size_t>(nn) * C + ch) * sp];
        const double gm = gv[ch];
        double* gxp = gx ? &(*gx)[(static_cast<size_t>(nn) * C + ch) * sp] : nullptr;
        double acc_g = 0.0, acc_b = 0.0;
        for (int i = 0; i < sp; ++i) {
          const double xh = (xp[i] - mu) * inv;
          if (gxp) {
            const double dxh = dy[i] * gm;
            gxp[i] += inv * (dxh - inv_m * sum_dxh - xh * inv_m * sum_dxh_xh);
          }
          acc_g += dy[i] * xh;
          acc_b += dy[i];
        }
        if (gg) (*gg)[ch] += acc_g;
        if (gb) (*gb)[ch] += acc_b;
      }
    }
  }
}

void backward_silu(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  const auto& xv = n.inputs[0]->value;
  auto& g = grad_of(n.inputs[0]);
  for (size_t i = 0; i < g.size(); ++i) {
    const double sg = sigmoid(xv[i]);
    g[i] += n.grad[i] * sg * (1.0 + xv[i] * (1.0 - sg));
  }
}

void backward_reshape(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  auto& g = grad_of(n.inputs[0]);
  for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
}

void backward_permute(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  const Shape& in_shape = n.inputs[0]->shape;
  const int rank = static_cast<int>(in_shape.size());
  std::vector<int64_t> in_strides(rank, 1), out_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  for (int i = rank - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * n.shape[i + 1];
  auto& g = grad_of(n.inputs[0]);
  std::vector<int> idx(rank, 0);
  const int64_t count = n.size();
  for (int64_t o = 0; o < count; ++o) {
    int64_t src = 0;
    for (int i = 0; i < rank; ++i) src += static_cast<int64_t>(idx[i]) * in_strides[n.iattr[i]];
    g[src] += n.grad[o];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < n.shape[i]) break;
      idx[i] = 0;
    }
  }
}

void backward_concat(Node& n) {
  const int axis = n.iattr[0];
  const int rank = static_cast<int>(n.shape.size());
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= n.shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= n.shape[i];
  const int total = n.shape[axis];
  int64_t offset = 0;
  for (size_t s = 0; s < n.inputs.size(); ++s) {
    const int64_t block = static_cast<int64_t>(n.iattr[1 + s]) * inner;
    if (n.inputs[s]->requires_grad) {
      auto& g = grad_of(n.inputs[s]);
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = &n.grad[o * total * inner + offset];
        double* dst = &g[o * block];
        for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
    offset += block;
  }
}

void backward_broadcast(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  auto& g = grad_of(n.inputs[0]);
  const int64_t block = n.inputs[0]->size();
  const int64_t reps = n.size() / std::max<int64_t>(1, block);
  for (int64_t r = 0; r < reps; ++r) {
    const double* src = &n.grad[r * block];
    for (int64_t i = 0; i < block; ++i) g[i] += src[i];
  }
}

void backward_mean(Node& n) {
  if (!n.inputs[0]->requires_grad) return;
  auto& g = grad_of(n.inputs[0]);
  const double d = n.grad[0] / static_cast<double>(g.size());
  for (auto& v : g) v += d;
}

void backward_mse(Node& n) {
  const auto& a = n.inputs[0]->value;
  const auto& b = n.inputs[1]->value;
  const double c = 2.0 * n.grad[0] / static_cast<double>(a.size());
  if (n.inputs[0]->requires_grad) {
    auto& g = grad_of(n.inputs[0]);
    for (size_t i = 0; i < g.size(); ++i) g[i] += c * (a[i] - b[i]);
  }
  if (n.inputs[1]->requires_grad) {
    auto& g = grad_of(n.inputs[1]);
    for (size_t i = 0; i < g.size(); ++i) g[i] -= c * (a[i] - b[i]);
  }
}

void dispatch_backward(Node& n) {
  switch (n.op) {
    case Op::leaf: return;
    case Op::add: return backward_add(n);
    case Op::mul: return backward_mul(n);
    case Op::scale: return backward_scale(n);
    case Op::matmul: return backward_matmul(n);
    case Op::conv2d: return backward_conv2d(n);
    case Op::conv1d_time: return backward_conv1d_time(n);
    case Op::softmax: return backward_softmax(n);
    case Op::attention: return backward_attention(n);
    case Op::group_norm: return backward_group_norm(n);
    case Op::silu: return backward_silu(n);
    case Op::reshape: return backward_reshape(n);
    case Op::permute: return backward_permute(n);
    case Op::concat: return backward_concat(n);
    case Op::broadcast: return backward_broadcast(n);
    case Op::upsample2x: return backward_upsample2x(n);
    case Op::mean: return backward_mean(n);
    case Op::mse: return backward_mse(n);
  }
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor (got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")) + ")");
  if (!loss.requires_grad()) return;  // nothing upstream wants gradients

  // Iterative DFS topological order; input order makes traversal deterministic.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get()});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->inputs.size()) {
      Node* child = f.n->inputs[f.next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad.empty()) dispatch_backward(*n);
  }
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                               double step) {
  Tensor xp = Tensor::from_data(x.shape(), x.data(), true);
  Tensor loss = f(xp);
  if (loss.size() != 1) throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
  backward(loss);
  const std::vector<double> autograd = xp.has_grad() ? xp.grad() : std::vector<double>(x.size(), 0.0);

  NoGradGuard no_grad;
  std::vector<double> base = x.data();
  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    std::vector<double> up = base, dn = base;
    up[i] += step;
    dn[i] -= step;
    const double fp = f(Tensor::from_data(x.shape(), std::move(up))).item();
    const double fm = f(Tensor::from_data(x.shape(), std::move(dn))).item();
    const double central = (fp - fm) / (2.0 * step);
    const double rel = std::abs(autograd[i] - central) / (std::abs(central) + eps);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace stickerlab
