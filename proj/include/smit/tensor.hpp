#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "smit/rng.hpp"

namespace smit {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScalarMul,
  kScalarAdd,
  kAbs,
  kMean,
  kSum,
  kChannelMean,
  kChannelVar,
  kRelu,
  kLeakyRelu,
  kTanh,
  kSigmoid,
  kLog,
  kExp,
  kSqrt,
  kClamp,
  kMaxConst,
  kUpsample2,
  kAvgPool2,
  kConcat,
  kReshape,
  kSlice,
  kConv2d,
  kFullyConnected,
};

const char* op_name(Op op);

// Attribute record for apply(); which fields are read depends on the op kind.
struct OpAttrs {
  int stride = 1;
  int pad = 0;
  int axis = 0;
  int start = 0;   // slice
  int len = 0;     // slice
  double alpha = 0.0;  // leaky slope, scalar factor / addend
  double lo = 0.0;     // clamp
  double hi = 0.0;     // clamp / max-with-constant threshold
};

class Tensor;
class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;

  // provenance, used by the backward rules
  Op op = Op::kLeaf;
  OpAttrs attrs;
  std::vector<std::shared_ptr<TensorImpl>> inputs;

  // position on the recording tape, if any
  Tape* tape = nullptr;
  int tape_pos = -1;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  std::vector<double>& ensure_grad();
};
}  // namespace detail

// Dense n-dimensional array, row-major, double precision. Copying a Tensor
// copies the handle, not the storage; two handles to the same node alias.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double>& grad() { return impl_->ensure_grad(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // value of a one-element tensor
  double item() const;

  bool all_finite() const;

  // detached value copy (no graph linkage, no grad requirement)
  Tensor detach_copy() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Recording tape for reverse-mode differentiation. Ops append their output
// node while a tape is current and grad mode is on; backward() replays the
// recorded list in reverse. One tape per logical worker.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  size_t size() const { return nodes_.size(); }
  void clear();

  // dL/dleaf for every requires_grad leaf reachable from loss; accumulates (+=)
  void backward(const Tensor& loss);

  void record(std::shared_ptr<detail::TensorImpl> node);

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
  Tape* prev_ = nullptr;
};

// Disables recording (and requires_grad propagation) while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  static bool active();

 private:
  bool prev_;
};

// Generic op entry point: validates shapes, runs the forward kernel and
// records the node when gradients are being tracked.
Tensor apply(Op op, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

namespace ops {
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor abs(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor channel_mean(const Tensor& a);
Tensor channel_var(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor max_const(const Tensor& a, double c);
Tensor upsample_nearest2x(const Tensor& a);
Tensor avg_pool2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b);
}  // namespace ops

// conv output size for one spatial dim
inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

void assert_finite(const Tensor& t, const std::string& what);

}  // namespace smit
