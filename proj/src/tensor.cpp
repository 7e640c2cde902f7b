#include "smit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace smit {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScalarMul: return "scalar_mul";
    case Op::kScalarAdd: return "scalar_add";
    case Op::kAbs: return "abs";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kChannelMean: return "channel_mean";
    case Op::kChannelVar: return "channel_var";
    case Op::kRelu: return "relu";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSqrt: return "sqrt";
    case Op::kClamp: return "clamp";
    case Op::kMaxConst: return "max_const";
    case Op::kUpsample2: return "upsample2";
    case Op::kAvgPool2: return "avg_pool2";
    case Op::kConcat: return "concat";
    case Op::kReshape: return "reshape";
    case Op::kSlice: return "slice";
    case Op::kConv2d: return "conv2d";
    case Op::kFullyConnected: return "fully_connected";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw std::invalid_argument(std::string("op ") + op_name(op) + ": " + detail);
}

void require(bool cond, Op op, const std::string& detail) {
  if (!cond) shape_error(op, detail);
}

}  // namespace

namespace detail {
std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}
}  // namespace detail

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::wrap(ImplPtr impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(static_cast<size_t>(smit::numel(shape)), value);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != smit::numel(shape))
    throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (double& v : t.data()) v = rng.normal() * stddev;
  return t;
}

const std::vector<double>& Tensor::grad() const {
  return impl_->ensure_grad();
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item(): tensor has shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::all_finite() const {
  for (double v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::detach_copy() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return wrap(std::move(impl));
}

void assert_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite())
    throw std::runtime_error("non-finite value in " + what);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_current_tape = nullptr;
thread_local int g_no_grad_depth = 0;
}  // namespace

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() {
  clear();
  g_current_tape = prev_;
}

Tape* Tape::current() { return g_current_tape; }

void Tape::clear() {
  for (auto& n : nodes_) {
    if (n->tape == this) {
      n->tape = nullptr;
      n->tape_pos = -1;
    }
  }
  nodes_.clear();
}

void Tape::record(ImplPtr node) {
  node->tape = this;
  node->tape_pos = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
}

NoGradGuard::NoGradGuard() : prev_(false) { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

// ---------------------------------------------------------------------------
// Broadcasting machinery for elementwise binary ops.
// Ranks must match; every dim must agree or be 1 on one side.

namespace {

struct BroadcastPlan {
  Shape out;
  bool same = false;              // identical shapes, flat fast path
  std::vector<int64_t> stride_a;  // strides with 0 on broadcast dims
  std::vector<int64_t> stride_b;
};

BroadcastPlan broadcast_plan(Op op, const Shape& a, const Shape& b) {
  require(a.size() == b.size(), op,
          "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  int r = static_cast<int>(a.size());
  plan.out.resize(r);
  for (int i = 0; i < r; ++i) {
    require(a[i] == b[i] || a[i] == 1 || b[i] == 1, op,
            "incompatible dims " + shape_str(a) + " vs " + shape_str(b));
    plan.out[i] = std::max(a[i], b[i]);
  }
  auto strides_of = [&](const Shape& s) {
    std::vector<int64_t> st(r);
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      st[i] = (s[i] == 1 && plan.out[i] != 1) ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  plan.stride_a = strides_of(a);
  plan.stride_b = strides_of(b);
  return plan;
}

// Walks every output position of a broadcast op, handing (out_idx, a_idx,
// b_idx) to fn in row-major order.
template <typename F>
void broadcast_walk(const BroadcastPlan& plan, F&& fn) {
  int r = static_cast<int>(plan.out.size());
  std::vector<int> idx(r, 0);
  int64_t ai = 0, bi = 0;
  int64_t total = numel(plan.out);
  for (int64_t oi = 0; oi < total; ++oi) {
    fn(oi, ai, bi);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ai += plan.stride_a[d];
      bi += plan.stride_b[d];
      if (idx[d] < plan.out[d]) break;
      ai -= plan.stride_a[d] * plan.out[d];
      bi -= plan.stride_b[d] * plan.out[d];
      idx[d] = 0;
    }
  }
}

void check_rank4(Op op, const Shape& s) {
  require(s.size() == 4, op, "expected rank-4 input, got " + shape_str(s));
}

// ---------------------------------------------------------------------------
// Conv2d kernels (zero padding). The forward accumulates one output plane at
// a time in a small buffer so the inner loops stay in registers/L1.

constexpr int kPlaneStack = 1024;

// copies x into a zero-padded buffer; returns pointer to use (avoids the
// copy when pad == 0)
const double* pad_input(const std::vector<double>& x, int n, int c, int h, int w,
                        int p, std::vector<double>& buf) {
  if (p == 0) return x.data();
  int hp = h + 2 * p, wp = w + 2 * p;
  buf.assign(static_cast<size_t>(n) * c * hp * wp, 0.0);
  for (int im = 0; im < n; ++im)
    for (int ic = 0; ic < c; ++ic) {
      const double* src = x.data() + (static_cast<size_t>(im) * c + ic) * h * w;
      double* dst = buf.data() + (static_cast<size_t>(im) * c + ic) * hp * wp;
      for (int y = 0; y < h; ++y)
        std::memcpy(dst + (y + p) * wp + p, src + static_cast<size_t>(y) * w,
                    sizeof(double) * w);
    }
  return buf.data();
}

void conv2d_forward(const double* pad, const double* w, const double* bias,
                    double* out, int n, int ci, int hp, int wp, int co, int k,
                    int s, int ho, int wo) {
  const int npix = ho * wo;
#pragma omp parallel
  {
    std::vector<double> heap;
    if (npix > kPlaneStack) heap.resize(npix);
#pragma omp for collapse(2) schedule(static)
    for (int im = 0; im < n; ++im) {
      for (int oc = 0; oc < co; ++oc) {
        double stack[kPlaneStack];
        double* acc = npix <= kPlaneStack ? stack : heap.data();
        const double b0 = bias ? bias[oc] : 0.0;
        for (int i = 0; i < npix; ++i) acc[i] = b0;
        for (int ic = 0; ic < ci; ++ic) {
          const double* src = pad + (static_cast<size_t>(im) * ci + ic) * hp * wp;
          const double* ker = w + (static_cast<size_t>(oc) * ci + ic) * k * k;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const double kv = ker[ky * k + kx];
              for (int oy = 0; oy < ho; ++oy) {
                const double* __restrict srow = src + (oy * s + ky) * wp + kx;
                double* __restrict drow = acc + oy * wo;
                if (s == 1) {
                  for (int ox = 0; ox < wo; ++ox) drow[ox] += kv * srow[ox];
                } else {
                  for (int ox = 0; ox < wo; ++ox) drow[ox] += kv * srow[ox * s];
                }
              }
            }
        }
        std::memcpy(out + (static_cast<size_t>(im) * co + oc) * npix, acc,
                    sizeof(double) * npix);
      }
    }
  }
}

// dL/dweight: per (oc, ic) dot products of output grads against the padded
// input; batch summed sequentially inside so the reduction order is fixed.
void conv2d_backward_weight(const double* pad, const double* gout, double* gw,
                            int n, int ci, int hp, int wp, int co, int k,
                            int s, int ho, int wo) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    for (int ic = 0; ic < ci; ++ic) {
      double* gk = gw + (static_cast<size_t>(oc) * ci + ic) * k * k;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (int im = 0; im < n; ++im) {
            const double* src = pad + (static_cast<size_t>(im) * ci + ic) * hp * wp;
            const double* g = gout + (static_cast<size_t>(im) * co + oc) * ho * wo;
            for (int oy = 0; oy < ho; ++oy) {
              const double* __restrict srow = src + (oy * s + ky) * wp + kx;
              const double* __restrict grow = g + oy * wo;
              if (s == 1) {
                for (int ox = 0; ox < wo; ++ox) acc += grow[ox] * srow[ox];
              } else {
                for (int ox = 0; ox < wo; ++ox) acc += grow[ox] * srow[ox * s];
              }
            }
          }
          gk[ky * k + kx] += acc;
        }
    }
  }
}

// dL/dinput: scatter through the kernel into a per-(im,ic) padded plane,
// then add the unpadded window into the input grad.
void conv2d_backward_input(const double* w, const double* gout, double* gx,
                           int n, int ci, int h, int wd, int p, int co, int k,
                           int s, int ho, int wo) {
  const int hp = h + 2 * p, wp = wd + 2 * p;
  const int padpix = hp * wp;
#pragma omp parallel
  {
    std::vector<double> plane(padpix);
#pragma omp for collapse(2) schedule(static)
    for (int im = 0; im < n; ++im) {
      for (int ic = 0; ic < ci; ++ic) {
        std::fill(plane.begin(), plane.end(), 0.0);
        for (int oc = 0; oc < co; ++oc) {
          const double* ker = w + (static_cast<size_t>(oc) * ci + ic) * k * k;
          const double* g = gout + (static_cast<size_t>(im) * co + oc) * ho * wo;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const double kv = ker[ky * k + kx];
              for (int oy = 0; oy < ho; ++oy) {
                double* __restrict prow = plane.data() + (oy * s + ky) * wp + kx;
                const double* __restrict grow = g + oy * wo;
                if (s == 1) {
                  for (int ox = 0; ox < wo; ++ox) prow[ox] += kv * grow[ox];
                } else {
                  for (int ox = 0; ox < wo; ++ox) prow[ox * s] += kv * grow[ox];
                }
              }
            }
        }
        double* dst = gx + (static_cast<size_t>(im) * ci + ic) * h * wd;
        for (int y = 0; y < h; ++y) {
          const double* prow = plane.data() + (y + p) * wp + p;
          for (int x = 0; x < wd; ++x) dst[y * wd + x] += prow[x];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// apply(): forward dispatch

Tensor apply(Op op, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  for (const auto& t : inputs)
    if (!t.defined()) shape_error(op, "undefined input tensor");

  auto out = std::make_shared<TensorImpl>();
  auto unary_in = [&]() -> const TensorImpl& {
    require(inputs.size() == 1, op, "expected 1 input");
    return *inputs[0].impl();
  };

  switch (op) {
    case Op::kLeaf:
      shape_error(op, "leaf is not an executable op");

    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      require(inputs.size() == 2, op, "expected 2 inputs");
      const auto& a = *inputs[0].impl();
      const auto& b = *inputs[1].impl();
      BroadcastPlan plan = broadcast_plan(op, a.shape, b.shape);
      out->shape = plan.out;
      out->data.resize(numel(plan.out));
      const double* pa = a.data.data();
      const double* pb = b.data.data();
      double* po = out->data.data();
      if (plan.same) {
        const int64_t n = a.numel();
        switch (op) {
          case Op::kAdd: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
          case Op::kSub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
          case Op::kMul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
          default:       for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
        }
      } else {
        switch (op) {
          case Op::kAdd:
            broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] + pb[j]; });
            break;
          case Op::kSub:
            broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] - pb[j]; });
            break;
          case Op::kMul:
            broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] * pb[j]; });
            break;
          default:
            broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) { po[o] = pa[i] / pb[j]; });
            break;
        }
      }
      break;
    }

    case Op::kScalarMul: {
      const auto& a = unary_in();
      out->shape = a.shape;
      out->data.resize(a.numel());
      for (int64_t i = 0; i < a.numel(); ++i) out->data[i] = a.data[i] * attrs.alpha;
      break;
    }
    case Op::kScalarAdd: {
      const auto& a = unary_in();
      out->shape = a.shape;
      out->data.resize(a.numel());
      for (int64_t i = 0; i < a.numel(); ++i) out->data[i] = a.data[i] + attrs.alpha;
      break;
    }
    case Op::kAbs: {
      const auto& a = unary_in();
      out->shape = a.shape;
      out->data.resize(a.numel());
      for (int64_t i = 0; i < a.numel(); ++i) out->data[i] = std::fabs(a.data[i]);
      break;
    }
    case Op::kMean:
    case Op::kSum: {
      const auto& a = unary_in();
      require(a.numel() > 0, op, "empty input");
      double acc = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i) acc += a.data[i];
      out->shape = {1};
      out->data = {op == Op::kMean ? acc / static_cast<double>(a.numel()) : acc};
      break;
    }
    case Op::kChannelMean:
    case Op::kChannelVar: {
      const auto& a = unary_in();
      check_rank4(op, a.shape);
      const int n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3];
      const int64_t plane = static_cast<int64_t>(h) * w;
      require(plane >= 1, op, "empty spatial plane");
      out->shape = {n, c, 1, 1};
      out->data.resize(static_cast<size_t>(n) * c);
      for (int i = 0; i < n * c; ++i) {
        const double* src = a.data.data() + i * plane;
        double mu = 0.0;
        for (int64_t j = 0; j < plane; ++j) mu += src[j];
        mu /= static_cast<double>(plane);
        if (op == Op::kChannelMean) {
          out->data[i] = mu;
        } else {
          double var = 0.0;  // population variance
          for (int64_t j = 0; j < plane; ++j) {
            double d = src[j] - mu;
            var += d * d;
          }
          out->data[i] = var / static_cast<double>(plane);
        }
      }
      break;
    }
    case Op::kRelu:
    case Op::kLeakyRelu:
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kLog:
    case Op::kExp:
    case Op::kSqrt:
    case Op::kClamp:
    case Op::kMaxConst: {
      const auto& a = unary_in();
      out->shape = a.shape;
      out->data.resize(a.numel());
      const double* pa = a.data.data();
      double* po = out->data.data();
      const int64_t n = a.numel();
      switch (op) {
        case Op::kRelu:
          for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
          break;
        case Op::kLeakyRelu:
          for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : attrs.alpha * pa[i];
          break;
        case Op::kTanh:
          for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
          break;
        case Op::kSigmoid:
          for (int64_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
          break;
        case Op::kLog:
          for (int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
          break;
        case Op::kExp:
          for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
          break;
        case Op::kSqrt:
          for (int64_t i = 0; i < n; ++i) po[i] = std::sqrt(pa[i]);
          break;
        case Op::kClamp:
          require(attrs.lo <= attrs.hi, op, "clamp bounds out of order");
          for (int64_t i = 0; i < n; ++i) po[i] = std::min(std::max(pa[i], attrs.lo), attrs.hi);
          break;
        default:  // kMaxConst
          for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > attrs.hi ? pa[i] : attrs.hi;
          break;
      }
      break;
    }
    case Op::kUpsample2: {
      const auto& a = unary_in();
      check_rank4(op, a.shape);
      const int n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3];
      out->shape = {n, c, 2 * h, 2 * w};
      out->data.resize(numel(out->shape));
      for (int i = 0; i < n * c; ++i) {
        const double* src = a.data.data() + static_cast<size_t>(i) * h * w;
        double* dst = out->data.data() + static_cast<size_t>(i) * 4 * h * w;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double v = src[y * w + x];
            double* d = dst + (2 * y) * 2 * w + 2 * x;
            d[0] = v;
            d[1] = v;
            d[2 * w] = v;
            d[2 * w + 1] = v;
          }
      }
      break;
    }
    case Op::kAvgPool2: {
      const auto& a = unary_in();
      check_rank4(op, a.shape);
      const int n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3];
      require(h % 2 == 0 && w % 2 == 0, op, "odd spatial size " + shape_str(a.shape));
      out->shape = {n, c, h / 2, w / 2};
      out->data.resize(numel(out->shape));
      for (int i = 0; i < n * c; ++i) {
        const double* src = a.data.data() + static_cast<size_t>(i) * h * w;
        double* dst = out->data.data() + static_cast<size_t>(i) * (h / 2) * (w / 2);
        for (int y = 0; y < h / 2; ++y)
          for (int x = 0; x < w / 2; ++x) {
            const double* s = src + (2 * y) * w + 2 * x;
            dst[y * (w / 2) + x] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
          }
      }
      break;
    }
    case Op::kConcat: {
      require(!inputs.empty(), op, "expected at least 1 input");
      const auto& first = *inputs[0].impl();
      const int r = static_cast<int>(first.shape.size());
      require(attrs.axis >= 0 && attrs.axis < r, op, "axis out of range");
      Shape oshape = first.shape;
      for (size_t t = 1; t < inputs.size(); ++t) {
        const auto& s = inputs[t].impl()->shape;
        require(static_cast<int>(s.size()) == r, op, "rank mismatch across parts");
        for (int d = 0; d < r; ++d)
          require(d == attrs.axis || s[d] == first.shape[d], op,
                  "dim mismatch " + shape_str(s) + " vs " + shape_str(first.shape));
        oshape[attrs.axis] += s[attrs.axis];
      }
      out->shape = oshape;
      out->data.resize(numel(oshape));
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < attrs.axis; ++d) outer *= oshape[d];
      for (int d = attrs.axis + 1; d < r; ++d) inner *= oshape[d];
      int64_t off = 0;
      for (const auto& part : inputs) {
        const auto& p = *part.impl();
        const int64_t rows = p.shape[attrs.axis] * inner;
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(out->data.data() + (o * oshape[attrs.axis] * inner + off),
                      p.data.data() + o * rows, sizeof(double) * rows);
        off += rows;
      }
      break;
    }
    case Op::kReshape: {
      const auto& a = unary_in();
      // target shape is carried via attrs-free convention: ops::reshape fills it in
      shape_error(op, "reshape must go through ops::reshape");
      (void)a;
      break;
    }
    case Op::kSlice: {
      const auto& a = unary_in();
      const int r = static_cast<int>(a.shape.size());
      require(attrs.axis >= 0 && attrs.axis < r, op, "axis out of range");
      require(attrs.start >= 0 && attrs.len > 0 &&
                  attrs.start + attrs.len <= a.shape[attrs.axis],
              op,
              "slice [" + std::to_string(attrs.start) + "," +
                  std::to_string(attrs.start + attrs.len) + ") outside dim " +
                  std::to_string(a.shape[attrs.axis]));
      Shape oshape = a.shape;
      oshape[attrs.axis] = attrs.len;
      out->shape = oshape;
      out->data.resize(numel(oshape));
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < attrs.axis; ++d) outer *= a.shape[d];
      for (int d = attrs.axis + 1; d < r; ++d) inner *= a.shape[d];
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out->data.data() + o * attrs.len * inner,
                    a.data.data() + (o * a.shape[attrs.axis] + attrs.start) * inner,
                    sizeof(double) * attrs.len * inner);
      break;
    }
    case Op::kConv2d: {
      require(inputs.size() == 2 || inputs.size() == 3, op, "expected (x, w[, b])");
      const auto& x = *inputs[0].impl();
      const auto& w = *inputs[1].impl();
      check_rank4(op, x.shape);
      require(w.shape.size() == 4, op, "kernel must be rank 4, got " + shape_str(w.shape));
      const int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
      const int co = w.shape[0], k = w.shape[2];
      require(w.shape[1] == ci, op,
              "in-channel mismatch: input " + shape_str(x.shape) + " kernel " +
                  shape_str(w.shape));
      require(w.shape[2] == w.shape[3], op, "kernel must be square");
      require(attrs.stride >= 1 && attrs.pad >= 0, op, "bad stride/pad");
      const int ho = conv_out_size(h, k, attrs.stride, attrs.pad);
      const int wo = conv_out_size(wd, k, attrs.stride, attrs.pad);
      require(ho >= 1 && wo >= 1, op,
              "kernel " + std::to_string(k) + " too large for input " + shape_str(x.shape));
      const double* bias = nullptr;
      if (inputs.size() == 3) {
        const auto& b = *inputs[2].impl();
        require(b.shape == Shape{co}, op, "bias must have shape (" + std::to_string(co) + ")");
        bias = b.data.data();
      }
      out->shape = {n, co, ho, wo};
      out->data.resize(numel(out->shape));
      std::vector<double> padbuf;
      const double* pad = pad_input(x.data, n, ci, h, wd, attrs.pad, padbuf);
      conv2d_forward(pad, w.data.data(), bias, out->data.data(), n, ci,
                     h + 2 * attrs.pad, wd + 2 * attrs.pad, co, k, attrs.stride, ho, wo);
      break;
    }
    case Op::kFullyConnected: {
      require(inputs.size() == 3, op, "expected (x, w, b)");
      const auto& x = *inputs[0].impl();
      const auto& w = *inputs[1].impl();
      const auto& b = *inputs[2].impl();
      require(x.shape.size() == 2, op, "input must be rank 2, got " + shape_str(x.shape));
      require(w.shape.size() == 2, op, "weight must be rank 2, got " + shape_str(w.shape));
      const int n = x.shape[0], in = x.shape[1], outw = w.shape[0];
      require(w.shape[1] == in, op,
              "dim mismatch: input " + shape_str(x.shape) + " weight " + shape_str(w.shape));
      require(b.shape == Shape{outw}, op, "bias must have shape (" + std::to_string(outw) + ")");
      out->shape = {n, outw};
      out->data.resize(static_cast<size_t>(n) * outw);
#pragma omp parallel for schedule(static)
      for (int i = 0; i < n; ++i) {
        const double* xi = x.data.data() + static_cast<size_t>(i) * in;
        double* oi = out->data.data() + static_cast<size_t>(i) * outw;
        for (int o = 0; o < outw; ++o) {
          const double* wo_ = w.data.data() + static_cast<size_t>(o) * in;
          double acc = b.data[o];
          for (int j = 0; j < in; ++j) acc += xi[j] * wo_[j];
          oi[o] = acc;
        }
      }
      break;
    }
  }

  // record for backward
  bool track = !NoGradGuard::active() && Tape::current() != nullptr;
  bool any_rg = false;
  for (const auto& t : inputs) any_rg = any_rg || t.requires_grad();
  if (track && any_rg) {
    out->requires_grad = true;
    out->op = op;
    out->attrs = attrs;
    out->inputs.reserve(inputs.size());
    for (const auto& t : inputs) out->inputs.push_back(t.impl());
    Tape::current()->record(out);
  }
  return Tensor::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// backward rules

namespace {

void backward_node(TensorImpl& node) {
  const std::vector<double>& g = node.grad;
  auto& in = node.inputs;
  auto wants = [&](size_t i) { return in[i]->requires_grad; };

  switch (node.op) {
    case Op::kLeaf:
      return;

    case Op::kAdd:
    case Op::kSub: {
      const double sign = node.op == Op::kSub ? -1.0 : 1.0;
      BroadcastPlan plan = broadcast_plan(node.op, in[0]->shape, in[1]->shape);
      if (plan.same) {
        const int64_t n = node.numel();
        if (wants(0)) {
          double* ga = in[0]->ensure_grad().data();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (wants(1)) {
          double* gb = in[1]->ensure_grad().data();
          for (int64_t i = 0; i < n; ++i) gb[i] += sign * g[i];
        }
      } else {
        double* ga = wants(0) ? in[0]->ensure_grad().data() : nullptr;
        double* gb = wants(1) ? in[1]->ensure_grad().data() : nullptr;
        broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += sign * g[o];
        });
      }
      break;
    }
    case Op::kMul:
    case Op::kDiv: {
      BroadcastPlan plan = broadcast_plan(node.op, in[0]->shape, in[1]->shape);
      const double* pa = in[0]->data.data();
      const double* pb = in[1]->data.data();
      const double* po = node.data.data();
      double* ga = wants(0) ? in[0]->ensure_grad().data() : nullptr;
      double* gb = wants(1) ? in[1]->ensure_grad().data() : nullptr;
      if (node.op == Op::kMul) {
        if (plan.same) {
          const int64_t n = node.numel();
          if (ga)
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
          if (gb)
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
        } else {
          broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
            if (ga) ga[i] += g[o] * pb[j];
            if (gb) gb[j] += g[o] * pa[i];
          });
        }
      } else {  // div: d(a/b)/da = 1/b, d(a/b)/db = -out/b
        if (plan.same) {
          const int64_t n = node.numel();
          if (ga)
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / pb[i];
          if (gb)
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * po[i] / pb[i];
        } else {
          broadcast_walk(plan, [&](int64_t o, int64_t i, int64_t j) {
            if (ga) ga[i] += g[o] / pb[j];
            if (gb) gb[j] -= g[o] * po[o] / pb[j];
          });
        }
      }
      break;
    }
    case Op::kScalarMul: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += node.attrs.alpha * g[i];
      break;
    }
    case Op::kScalarAdd: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i];
      break;
    }
    case Op::kAbs: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      for (int64_t i = 0; i < node.numel(); ++i)
        ga[i] += pa[i] > 0.0 ? g[i] : (pa[i] < 0.0 ? -g[i] : 0.0);
      break;
    }
    case Op::kMean: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double gi = g[0] / static_cast<double>(in[0]->numel());
      for (int64_t i = 0; i < in[0]->numel(); ++i) ga[i] += gi;
      break;
    }
    case Op::kSum: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      for (int64_t i = 0; i < in[0]->numel(); ++i) ga[i] += g[0];
      break;
    }
    case Op::kChannelMean: {
      if (!wants(0)) break;
      const Shape& s = in[0]->shape;
      const int64_t plane = static_cast<int64_t>(s[2]) * s[3];
      double* ga = in[0]->ensure_grad().data();
      for (int i = 0; i < s[0] * s[1]; ++i) {
        const double gi = g[i] / static_cast<double>(plane);
        double* dst = ga + i * plane;
        for (int64_t j = 0; j < plane; ++j) dst[j] += gi;
      }
      break;
    }
    case Op::kChannelVar: {
      if (!wants(0)) break;
      const Shape& s = in[0]->shape;
      const int64_t plane = static_cast<int64_t>(s[2]) * s[3];
      const double* pa = in[0]->data.data();
      double* ga = in[0]->ensure_grad().data();
      for (int i = 0; i < s[0] * s[1]; ++i) {
        const double* src = pa + i * plane;
        double mu = 0.0;
        for (int64_t j = 0; j < plane; ++j) mu += src[j];
        mu /= static_cast<double>(plane);
        const double gi = 2.0 * g[i] / static_cast<double>(plane);
        double* dst = ga + i * plane;
        for (int64_t j = 0; j < plane; ++j) dst[j] += gi * (src[j] - mu);
      }
      break;
    }
    case Op::kRelu: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      for (int64_t i = 0; i < node.numel(); ++i)
        if (pa[i] > 0.0) ga[i] += g[i];
      break;
    }
    case Op::kLeakyRelu: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      const double slope = node.attrs.alpha;
      for (int64_t i = 0; i < node.numel(); ++i)
        ga[i] += pa[i] > 0.0 ? g[i] : slope * g[i];
      break;
    }
    case Op::kTanh: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* po = node.data.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i] * (1.0 - po[i] * po[i]);
      break;
    }
    case Op::kSigmoid: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* po = node.data.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i] * po[i] * (1.0 - po[i]);
      break;
    }
    case Op::kLog: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i] / pa[i];
      break;
    }
    case Op::kExp: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* po = node.data.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i] * po[i];
      break;
    }
    case Op::kSqrt: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* po = node.data.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i] * 0.5 / po[i];
      break;
    }
    case Op::kClamp: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      for (int64_t i = 0; i < node.numel(); ++i)
        if (pa[i] >= node.attrs.lo && pa[i] <= node.attrs.hi) ga[i] += g[i];
      break;
    }
    case Op::kMaxConst: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      const double* pa = in[0]->data.data();
      for (int64_t i = 0; i < node.numel(); ++i)
        if (pa[i] > node.attrs.hi) ga[i] += g[i];
      break;
    }
    case Op::kUpsample2: {
      if (!wants(0)) break;
      const Shape& s = in[0]->shape;
      const int h = s[2], w = s[3];
      double* ga = in[0]->ensure_grad().data();
      for (int i = 0; i < s[0] * s[1]; ++i) {
        double* dst = ga + static_cast<size_t>(i) * h * w;
        const double* src = g.data() + static_cast<size_t>(i) * 4 * h * w;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double* sp = src + (2 * y) * 2 * w + 2 * x;
            dst[y * w + x] += sp[0] + sp[1] + sp[2 * w] + sp[2 * w + 1];
          }
      }
      break;
    }
    case Op::kAvgPool2: {
      if (!wants(0)) break;
      const Shape& s = in[0]->shape;
      const int h = s[2], w = s[3];
      double* ga = in[0]->ensure_grad().data();
      for (int i = 0; i < s[0] * s[1]; ++i) {
        double* dst = ga + static_cast<size_t>(i) * h * w;
        const double* src = g.data() + static_cast<size_t>(i) * (h / 2) * (w / 2);
        for (int y = 0; y < h / 2; ++y)
          for (int x = 0; x < w / 2; ++x) {
            const double gv = 0.25 * src[y * (w / 2) + x];
            double* d = dst + (2 * y) * w + 2 * x;
            d[0] += gv;
            d[1] += gv;
            d[w] += gv;
            d[w + 1] += gv;
          }
      }
      break;
    }
    case Op::kConcat: {
      const int axis = node.attrs.axis;
      const Shape& os = node.shape;
      const int r = static_cast<int>(os.size());
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= os[d];
      for (int d = axis + 1; d < r; ++d) inner *= os[d];
      int64_t off = 0;
      for (size_t t = 0; t < in.size(); ++t) {
        const int64_t rows = in[t]->shape[axis] * inner;
        if (wants(t)) {
          double* ga = in[t]->ensure_grad().data();
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * os[axis] * inner + off;
            double* dst = ga + o * rows;
            for (int64_t i = 0; i < rows; ++i) dst[i] += src[i];
          }
        }
        off += rows;
      }
      break;
    }
    case Op::kReshape: {
      if (!wants(0)) break;
      double* ga = in[0]->ensure_grad().data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i];
      break;
    }
    case Op::kSlice: {
      if (!wants(0)) break;
      const int axis = node.attrs.axis;
      const Shape& s = in[0]->shape;
      const int r = static_cast<int>(s.size());
      int64_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= s[d];
      for (int d = axis + 1; d < r; ++d) inner *= s[d];
      double* ga = in[0]->ensure_grad().data();
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * node.attrs.len * inner;
        double* dst = ga + (o * s[axis] + node.attrs.start) * inner;
        for (int64_t i = 0; i < static_cast<int64_t>(node.attrs.len) * inner; ++i)
          dst[i] += src[i];
      }
      break;
    }
    case Op::kConv2d: {
      const auto& x = *in[0];
      const auto& w = *in[1];
      const int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
      const int co = w.shape[0], k = w.shape[2];
      const int s = node.attrs.stride, p = node.attrs.pad;
      const int ho = node.shape[2], wo = node.shape[3];
      if (wants(1)) {
        std::vector<double> padbuf;
        const double* pad = pad_input(x.data, n, ci, h, wd, p, padbuf);
        conv2d_backward_weight(pad, g.data(), in[1]->ensure_grad().data(), n, ci,
                               h + 2 * p, wd + 2 * p, co, k, s, ho, wo);
      }
      if (wants(0)) {
        conv2d_backward_input(w.data.data(), g.data(), in[0]->ensure_grad().data(),
                              n, ci, h, wd, p, co, k, s, ho, wo);
      }
      if (in.size() == 3 && wants(2)) {
        double* gb = in[2]->ensure_grad().data();
        for (int im = 0; im < n; ++im)
          for (int oc = 0; oc < co; ++oc) {
            const double* src = g.data() + (static_cast<size_t>(im) * co + oc) * ho * wo;
            double acc = 0.0;
            for (int i = 0; i < ho * wo; ++i) acc += src[i];
            gb[oc] += acc;
          }
      }
      break;
    }
    case Op::kFullyConnected: {
      const auto& x = *in[0];
      const auto& w = *in[1];
      const int n = x.shape[0], inw = x.shape[1], outw = w.shape[0];
      if (wants(0)) {
        double* gx = in[0]->ensure_grad().data();
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < outw; ++o) {
            const double gv = g[static_cast<size_t>(i) * outw + o];
            const double* wo_ = w.data.data() + static_cast<size_t>(o) * inw;
            double* dst = gx + static_cast<size_t>(i) * inw;
            for (int j = 0; j < inw; ++j) dst[j] += gv * wo_[j];
          }
      }
      if (wants(1)) {
        double* gw = in[1]->ensure_grad().data();
        for (int i = 0; i < n; ++i) {
          const double* xi = x.data.data() + static_cast<size_t>(i) * inw;
          for (int o = 0; o < outw; ++o) {
            const double gv = g[static_cast<size_t>(i) * outw + o];
            double* dst = gw + static_cast<size_t>(o) * inw;
            for (int j = 0; j < inw; ++j) dst[j] += gv * xi[j];
          }
        }
      }
      if (wants(2)) {
        double* gb = in[2]->ensure_grad().data();
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < outw; ++o) gb[o] += g[static_cast<size_t>(i) * outw + o];
      }
      break;
    }
  }
}

}  // namespace

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  auto impl = loss.impl();
  if (impl->tape != this || impl->tape_pos < 0)
    throw std::invalid_argument("backward: loss is not on this tape (detached graph)");
  if (nodes_.empty()) throw std::invalid_argument("backward: tape is empty");

  const int loss_pos = impl->tape_pos;

  // mark the ancestry of the loss; everything else on the tape is skipped
  std::vector<char> active(loss_pos + 1, 0);
  std::unordered_set<TensorImpl*> needed;
  needed.insert(impl.get());
  for (int i = loss_pos; i >= 0; --i) {
    TensorImpl* node = nodes_[i].get();
    if (!needed.count(node)) continue;
    active[i] = 1;
    for (auto& inp : node->inputs) needed.insert(inp.get());
  }

  impl->ensure_grad()[0] += 1.0;

  // reverse sweep: consumers sit later on the tape, so each node's output
  // grad is complete by the time its rule runs; each node runs exactly once
  for (int i = loss_pos; i >= 0; --i) {
    if (active[i]) backward_node(*nodes_[i]);
  }
}

// ---------------------------------------------------------------------------
// convenience wrappers

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) { return apply(Op::kAdd, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply(Op::kSub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply(Op::kMul, {a, b}); }
Tensor div(const Tensor& a, const Tensor& b) { return apply(Op::kDiv, {a, b}); }

Tensor scalar_mul(const Tensor& a, double c) {
  OpAttrs at;
  at.alpha = c;
  return apply(Op::kScalarMul, {a}, at);
}

Tensor scalar_add(const Tensor& a, double c) {
  OpAttrs at;
  at.alpha = c;
  return apply(Op::kScalarAdd, {a}, at);
}

Tensor abs(const Tensor& a) { return apply(Op::kAbs, {a}); }
Tensor mean(const Tensor& a) { return apply(Op::kMean, {a}); }
Tensor sum(const Tensor& a) { return apply(Op::kSum, {a}); }
Tensor channel_mean(const Tensor& a) { return apply(Op::kChannelMean, {a}); }
Tensor channel_var(const Tensor& a) { return apply(Op::kChannelVar, {a}); }
Tensor relu(const Tensor& a) { return apply(Op::kRelu, {a}); }

Tensor leaky_relu(const Tensor& a, double slope) {
  OpAttrs at;
  at.alpha = slope;
  return apply(Op::kLeakyRelu, {a}, at);
}

Tensor tanh(const Tensor& a) { return apply(Op::kTanh, {a}); }
Tensor sigmoid(const Tensor& a) { return apply(Op::kSigmoid, {a}); }
Tensor log(const Tensor& a) { return apply(Op::kLog, {a}); }
Tensor exp(const Tensor& a) { return apply(Op::kExp, {a}); }
Tensor sqrt(const Tensor& a) { return apply(Op::kSqrt, {a}); }

Tensor clamp(const Tensor& a, double lo, double hi) {
  OpAttrs at;
  at.lo = lo;
  at.hi = hi;
  return apply(Op::kClamp, {a}, at);
}

Tensor max_const(const Tensor& a, double c) {
  OpAttrs at;
  at.hi = c;
  return apply(Op::kMaxConst, {a}, at);
}

Tensor upsample_nearest2x(const Tensor& a) { return apply(Op::kUpsample2, {a}); }
Tensor avg_pool2(const Tensor& a) { return apply(Op::kAvgPool2, {a}); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply(Op::kConcat, parts, at);
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  return apply(Op::kSlice, {a}, at);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  return apply(Op::kConv2d, {x, w, b}, at);
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  OpAttrs at;
  at.stride = stride;
  at.pad = pad;
  return apply(Op::kConv2d, {x, w}, at);
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
  return apply(Op::kFullyConnected, {x, w, b});
}

}  // namespace ops

}  // namespace smit
