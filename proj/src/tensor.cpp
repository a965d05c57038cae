#include "decaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>
#include <unordered_set>

#ifdef DECAPS_USE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace decaps {

namespace {

void check_shape_valid(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("invalid shape " + shape_str(shape) + ": dims must be >= 1");
  }
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> data,
                                      bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds a non-leaf node; requires_grad is inherited from parents.
std::shared_ptr<TensorNode> make_op_node(
    const char* op, Shape shape, std::vector<double> data,
    std::vector<std::shared_ptr<TensorNode>> parents,
    std::function<void(const std::vector<double>&, GradSink&)> backprop) {
  detail::check_finite(data, op);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->is_leaf = false;
  node->requires_grad = false;
  for (const auto& p : parents) node->requires_grad |= p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return node;
}

int64_t strides_of(const Shape& shape, std::vector<int64_t>& strides) {
  strides.assign(shape.size(), 1);
  int64_t total = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    strides[i] = total;
    total *= shape[i];
  }
  return total;
}

}  // namespace

int64_t shape_size(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

void check_finite(const std::vector<double>& values, const char* op) {
  // Branch-free exponent scan; NaN and Inf both carry an all-ones exponent.
  constexpr uint64_t kExpMask = 0x7ff0000000000000ULL;
  uint64_t bad = 0;
  for (double v : values) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    bad |= static_cast<uint64_t>((bits & kExpMask) == kExpMask);
  }
  if (bad) {
    throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

#ifndef DECAPS_USE_OPENBLAS
namespace {

// Restrict-qualified parameters let the vectorizer drop runtime alias checks
// (local __restrict pointers get "versioned" past ~8 streams and then bail).
__attribute__((noinline)) void axpy8(int n, double v0, double v1, double v2, double v3, double v4, double v5,
           double v6, double v7, const double* __restrict bl, double* __restrict c0,
           double* __restrict c1, double* __restrict c2, double* __restrict c3,
           double* __restrict c4, double* __restrict c5, double* __restrict c6,
           double* __restrict c7) {
  for (int j = 0; j < n; ++j) {
    const double bj = bl[j];
    c0[j] += v0 * bj;
    c1[j] += v1 * bj;
    c2[j] += v2 * bj;
    c3[j] += v3 * bj;
    c4[j] += v4 * bj;
    c5[j] += v5 * bj;
    c6[j] += v6 * bj;
    c7[j] += v7 * bj;
  }
}

__attribute__((noinline)) void axpy2(int n, double v0, double v1, const double* __restrict bl,
           double* __restrict c0, double* __restrict c1) {
  for (int j = 0; j < n; ++j) {
    const double bj = bl[j];
    c0[j] += v0 * bj;
    c1[j] += v1 * bj;
  }
}

__attribute__((noinline)) void axpy1(int n, double v0, const double* __restrict bl, double* __restrict c0) {
  for (int j = 0; j < n; ++j) c0[j] += v0 * bl[j];
}

// 8-row panels keep the streaming kernel compute-bound: each loaded element
// of B feeds eight FMAs. `a_step` is the per-l stride within one logical row
// of A (1 for row-major A, m for transposed A).
void gemm_blocked(int m, int n, int k, const double* a, int64_t a_row_stride,
                  int64_t a_step, const double* b, double* c) {
  int i = 0;
  for (; i + 8 <= m; i += 8) {
    const double* a0 = a + i * a_row_stride;
    double* c0 = c + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double* bl = b + static_cast<int64_t>(l) * n;
      const int64_t o = l * a_step;
      axpy8(n, a0[o], a0[a_row_stride + o], a0[2 * a_row_stride + o],
            a0[3 * a_row_stride + o], a0[4 * a_row_stride + o],
            a0[5 * a_row_stride + o], a0[6 * a_row_stride + o],
            a0[7 * a_row_stride + o], bl, c0, c0 + n, c0 + 2 * n, c0 + 3 * n,
            c0 + 4 * n, c0 + 5 * n, c0 + 6 * n, c0 + 7 * n);
    }
  }
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * a_row_stride;
    double* c0 = c + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const double* bl = b + static_cast<int64_t>(l) * n;
      const int64_t o = l * a_step;
      axpy2(n, a0[o], a0[a_row_stride + o], bl, c0, c0 + n);
    }
  }
  for (; i < m; ++i) {
    const double* a0 = a + i * a_row_stride;
    double* c0 = c + static_cast<int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      axpy1(n, a0[l * a_step], b + static_cast<int64_t>(l) * n, c0);
    }
  }
}

}  // namespace
#endif  // !DECAPS_USE_OPENBLAS

#ifdef DECAPS_USE_OPENBLAS
namespace {
// The trainer parallelizes over samples; BLAS must stay single-threaded both
// for determinism and to avoid oversubscribing the cores.
const bool openblas_pinned = [] {
  openblas_set_num_threads(1);
  return true;
}();
}  // namespace
#endif

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c) {
#ifdef DECAPS_USE_OPENBLAS
  (void)openblas_pinned;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a, k, b, n,
              1.0, c, n);
#else
  gemm_blocked(m, n, k, a, /*a_row_stride=*/k, /*a_step=*/1, b, c);
#endif
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
#ifdef DECAPS_USE_OPENBLAS
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b, k, 1.0,
              c, n);
#else
  // Transposed into scratch so the streaming kernel applies.
  thread_local std::vector<double> scratch;
  scratch.resize(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j) {
    const double* bj = b + static_cast<int64_t>(j) * k;
    for (int l = 0; l < k; ++l) scratch[static_cast<int64_t>(l) * n + j] = bj[l];
  }
  gemm_blocked(m, n, k, a, k, 1, scratch.data(), c);
#endif
}

// c[m,n] += a[k,m]^T * b[k,n]; logical row i of A^T strides by m.
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c) {
#ifdef DECAPS_USE_OPENBLAS
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a, m, b, n, 1.0,
              c, n);
#else
  gemm_blocked(m, n, k, a, /*a_row_stride=*/1, /*a_step=*/m, b, c);
#endif
}

// Overwrite variant (c = a^T b) for scratch buffers that skip zero-fill.
void gemm_tn_overwrite(int m, int n, int k, const double* a, const double* b,
                       double* c) {
#ifdef DECAPS_USE_OPENBLAS
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a, m, b, n, 0.0,
              c, n);
#else
  std::fill(c, c + static_cast<int64_t>(m) * n, 0.0);
  gemm_blocked(m, n, k, a, /*a_row_stride=*/1, /*a_step=*/m, b, c);
#endif
}

}  // namespace detail

// --- Tensor basics ---------------------------------------------------------

Tensor Tensor::constant(Shape shape, double value, bool requires_grad) {
  check_shape_valid(shape);
  if (!std::isfinite(value)) throw NumericError("tensor_create: non-finite fill value");
  const int64_t n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return constant(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_valid(shape);
  if (shape_size(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("tensor_create: " + shape_str(shape) + " needs " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  detail::check_finite(values, "tensor_create");
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  check_shape_valid(shape);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::gaussian(Shape shape, double mean, double stddev, Rng& rng,
                        bool requires_grad) {
  check_shape_valid(shape);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng.gaussian(mean, stddev);
  return from_data(std::move(shape), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

int64_t Tensor::size() const { return node_ ? node_->size() : 0; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

double Tensor::operator[](int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= size()) {
    throw ShapeError("flat index out of range");
  }
  return node_->data[flat_index];
}

double Tensor::scalar() const {
  if (size() != 1) throw ContractError("scalar() on tensor of size " + std::to_string(size()));
  return node_->data[0];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("gradient not populated; run backward() first");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

// --- broadcasting helpers ---------------------------------------------------

namespace {

enum class Bcast {
  kSame,       // identical shapes
  kScalarA,    // a is size-1
  kScalarB,    // b is size-1
  kMapA,       // a == b.shape minus last axis; a replicated over b's last axis
  kMapB,       // symmetric
};

Bcast classify_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return Bcast::kSame;
  if (shape_size(a) == 1) return Bcast::kScalarA;
  if (shape_size(b) == 1) return Bcast::kScalarB;
  if (b.size() == a.size() + 1 &&
      std::equal(a.begin(), a.end(), b.begin())) {
    return Bcast::kMapA;
  }
  if (a.size() == b.size() + 1 &&
      std::equal(b.begin(), b.end(), a.begin())) {
    return Bcast::kMapB;
  }
  throw ShapeError("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace

// --- elementwise ------------------------------------------------------------

namespace {

// Iterates the output space once per mode; broadcast operands are addressed
// by block (outer, lane) so the inner loops stay division-free.
template <typename F>
void ew_apply(Bcast mode, int64_t n, int64_t last, const double* a, const double* b,
              double* out, F f) {
  switch (mode) {
    case Bcast::kSame:
      for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
      break;
    case Bcast::kScalarA: {
      const double av = a[0];
      for (int64_t i = 0; i < n; ++i) out[i] = f(av, b[i]);
      break;
    }
    case Bcast::kScalarB: {
      const double bv = b[0];
      for (int64_t i = 0; i < n; ++i) out[i] = f(a[i], bv);
      break;
    }
    case Bcast::kMapA:
      for (int64_t o = 0; o < n / last; ++o) {
        const double av = a[o];
        const double* bo = b + o * last;
        double* oo = out + o * last;
        for (int64_t j = 0; j < last; ++j) oo[j] = f(av, bo[j]);
      }
      break;
    case Bcast::kMapB:
      for (int64_t o = 0; o < n / last; ++o) {
        const double bv = b[o];
        const double* ao = a + o * last;
        double* oo = out + o * last;
        for (int64_t j = 0; j < last; ++j) oo[j] = f(ao[j], bv);
      }
      break;
  }
}

// buf += per-element gradient g(i), folded onto a possibly-broadcast operand.
// `operand_mode` describes how THIS operand was broadcast in the forward op.
template <typename G>
void ew_accumulate(Bcast operand_mode, int64_t n, int64_t last, double* buf, G g) {
  switch (operand_mode) {
    case Bcast::kSame:
      for (int64_t i = 0; i < n; ++i) buf[i] += g(i);
      break;
    case Bcast::kScalarA: {  // operand is the scalar
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) s += g(i);
      buf[0] += s;
      break;
    }
    case Bcast::kMapA: {  // operand is the map over the trailing axis
      for (int64_t o = 0; o < n / last; ++o) {
        double s = 0.0;
        const int64_t base = o * last;
        for (int64_t j = 0; j < last; ++j) s += g(base + j);
        buf[o] += s;
      }
      break;
    }
    default:
      throw ContractError("ew_accumulate: unexpected mode");
  }
}

Tensor binary_op(EwOp op, const Tensor& a, const Tensor& b) {
  const char* name = op == EwOp::kAdd   ? "add"
                     : op == EwOp::kSub ? "sub"
                     : op == EwOp::kMul ? "mul"
                                        : "div";
  const Bcast mode = classify_broadcast(a.shape(), b.shape());
  const Shape& out_shape = (mode == Bcast::kScalarA || mode == Bcast::kMapA)
                               ? b.shape()
                               : a.shape();
  const int64_t n = shape_size(out_shape);
  const int64_t last = out_shape.empty() ? 1 : out_shape.back();

  const double* av = a.data().data();
  const double* bv = b.data().data();

  if (op == EwOp::kDiv) {
    for (double d : b.data()) {
      if (std::abs(d) < kDivEpsilon) {
        throw NumericError("div: divisor magnitude below epsilon guard");
      }
    }
  }

  std::vector<double> out(n);
  switch (op) {
    case EwOp::kAdd:
      ew_apply(mode, n, last, av, bv, out.data(), [](double x, double y) { return x + y; });
      break;
    case EwOp::kSub:
      ew_apply(mode, n, last, av, bv, out.data(), [](double x, double y) { return x - y; });
      break;
    case EwOp::kMul:
      ew_apply(mode, n, last, av, bv, out.data(), [](double x, double y) { return x * y; });
      break;
    case EwOp::kDiv:
      ew_apply(mode, n, last, av, bv, out.data(), [](double x, double y) { return x / y; });
      break;
    default:
      throw ContractError("binary_op: not a binary op");
  }

  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  // Mode as seen from each operand: kSame when full-size, kScalarA/kMapA when
  // this operand is the broadcast one.
  const Bcast a_mode = mode == Bcast::kScalarA ? Bcast::kScalarA
                       : mode == Bcast::kMapA  ? Bcast::kMapA
                                               : Bcast::kSame;
  const Bcast b_mode = mode == Bcast::kScalarB ? Bcast::kScalarA
                       : mode == Bcast::kMapB  ? Bcast::kMapA
                                               : Bcast::kSame;

  auto backprop = [op, mode, a_mode, b_mode, last, an, bn, n](
                      const std::vector<double>& up, GradSink& sink) {
    const double* u = up.data();
    const double* ad = an->data.data();
    const double* bd = bn->data.data();
    // Expands a broadcast operand into a full-size scratch once, so every
    // gradient loop below runs division-free.
    thread_local std::vector<double> scratch;
    auto expanded = [&](const double* src, Bcast operand_mode) -> const double* {
      if (operand_mode == Bcast::kSame) return src;
      scratch.resize(static_cast<size_t>(n));
      if (operand_mode == Bcast::kScalarA) {
        std::fill(scratch.begin(), scratch.end(), src[0]);
      } else {
        for (int64_t o = 0; o < n / last; ++o) {
          std::fill(scratch.begin() + o * last, scratch.begin() + (o + 1) * last, src[o]);
        }
      }
      return scratch.data();
    };
    if (an->requires_grad) {
      double* buf = sink.buffer(an.get()).data();
      switch (op) {
        case EwOp::kAdd:
        case EwOp::kSub:
          ew_accumulate(a_mode, n, last, buf, [u](int64_t i) { return u[i]; });
          break;
        case EwOp::kMul: {
          const double* bfull = expanded(bd, b_mode);
          ew_accumulate(a_mode, n, last, buf,
                        [u, bfull](int64_t i) { return u[i] * bfull[i]; });
          break;
        }
        case EwOp::kDiv: {
          const double* bfull = expanded(bd, b_mode);
          ew_accumulate(a_mode, n, last, buf,
                        [u, bfull](int64_t i) { return u[i] / bfull[i]; });
          break;
        }
        default: break;
      }
    }
    if (bn->requires_grad) {
      double* buf = sink.buffer(bn.get()).data();
      switch (op) {
        case EwOp::kAdd:
          ew_accumulate(b_mode, n, last, buf, [u](int64_t i) { return u[i]; });
          break;
        case EwOp::kSub:
          ew_accumulate(b_mode, n, last, buf, [u](int64_t i) { return -u[i]; });
          break;
        case EwOp::kMul: {
          const double* afull = expanded(ad, a_mode);
          ew_accumulate(b_mode, n, last, buf,
                        [u, afull](int64_t i) { return u[i] * afull[i]; });
          break;
        }
        case EwOp::kDiv: {
          // At most one side broadcasts, so the scratch cannot be clobbered.
          const double* afull = expanded(ad, a_mode);
          const double* bfull = b_mode == Bcast::kSame ? bd : expanded(bd, b_mode);
          ew_accumulate(b_mode, n, last, buf, [u, afull, bfull](int64_t i) {
            return -u[i] * afull[i] / (bfull[i] * bfull[i]);
          });
          break;
        }
        default: break;
      }
    }
  };

  return Tensor::wrap(make_op_node(name, out_shape, std::move(out), {an, bn},
                                   std::move(backprop)));
}

Tensor unary_op(EwOp op, const Tensor& a) {
  const int64_t n = a.size();
  const auto& av = a.data();
  std::vector<double> out(n);
  const char* name = "unary";
  switch (op) {
    case EwOp::kRelu:
      name = "relu";
      for (int64_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
    case EwOp::kSqrt:
      name = "sqrt";
      for (int64_t i = 0; i < n; ++i) {
        if (av[i] < 0.0) throw NumericError("sqrt: negative input");
        out[i] = std::sqrt(av[i]);
      }
      break;
    case EwOp::kSquare:
      name = "square";
      for (int64_t i = 0; i < n; ++i) out[i] = av[i] * av[i];
      break;
    default:
      throw ContractError("unary_op: not a unary op");
  }

  auto an = a.node_ptr();
  auto backprop = [op, an, n](const std::vector<double>& up, GradSink& sink) {
    if (!an->requires_grad) return;
    auto& buf = sink.buffer(an.get());
    switch (op) {
      case EwOp::kRelu:
        for (int64_t i = 0; i < n; ++i) buf[i] += an->data[i] > 0.0 ? up[i] : 0.0;
        break;
      case EwOp::kSqrt:
        // Derivative clamped near zero; callers keep checked points away
        // from the kink, mirroring relu.
        for (int64_t i = 0; i < n; ++i) {
          buf[i] += up[i] * 0.5 / std::sqrt(std::max(an->data[i], 1e-24));
        }
        break;
      case EwOp::kSquare:
        for (int64_t i = 0; i < n; ++i) buf[i] += up[i] * 2.0 * an->data[i];
        break;
      default: break;
    }
  };

  return Tensor::wrap(make_op_node(name, a.shape(), std::move(out), {an},
                                   std::move(backprop)));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(EwOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(EwOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(EwOp::kMul, a, b); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary_op(EwOp::kDiv, a, b); }
Tensor relu(const Tensor& a) { return unary_op(EwOp::kRelu, a); }
Tensor sqrt_elem(const Tensor& a) { return unary_op(EwOp::kSqrt, a); }
Tensor square(const Tensor& a) { return unary_op(EwOp::kSquare, a); }

Tensor elementwise(EwOp op, const Tensor& a) {
  switch (op) {
    case EwOp::kRelu:
    case EwOp::kSqrt:
    case EwOp::kSquare:
      return unary_op(op, a);
    default:
      throw ContractError("elementwise: binary op needs two operands");
  }
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case EwOp::kAdd:
    case EwOp::kSub:
    case EwOp::kMul:
    case EwOp::kDiv:
      return binary_op(op, a, b);
    default:
      throw ContractError("elementwise: unary op takes one operand");
  }
}

Tensor add_scalar(const Tensor& a, double c) {
  return add(a, Tensor::constant({1}, c));
}

Tensor mul_scalar(const Tensor& a, double c) {
  return mul(a, Tensor::constant({1}, c));
}

Tensor reciprocal_clamped(const Tensor& a, double floor) {
  if (floor <= 0.0) throw ContractError("reciprocal_clamped: floor must be positive");
  const int64_t n = a.size();
  const auto& av = a.data();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / std::max(av[i], floor);

  auto an = a.node_ptr();
  auto backprop = [an, n, floor](const std::vector<double>& up, GradSink& sink) {
    if (!an->requires_grad) return;
    auto& buf = sink.buffer(an.get());
    for (int64_t i = 0; i < n; ++i) {
      const double x = an->data[i];
      if (x > floor) buf[i] += -up[i] / (x * x);
      // clamped region: derivative 0
    }
  };
  return Tensor::wrap(make_op_node("reciprocal_clamped", a.shape(), std::move(out),
                                   {an}, std::move(backprop)));
}

// --- matmul / conv ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: need rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<int64_t>(m) * n, 0.0);
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());

  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  auto backprop = [an, bn, m, n, k](const std::vector<double>& up, GradSink& sink) {
    if (an->requires_grad) {
      auto& ga = sink.buffer(an.get());
      detail::gemm_nt(m, k, n, up.data(), bn->data.data(), ga.data());
    }
    if (bn->requires_grad) {
      auto& gb = sink.buffer(bn.get());
      detail::gemm_tn(k, n, m, an->data.data(), up.data(), gb.data());
    }
  };
  return Tensor::wrap(make_op_node("matmul", Shape{m, n}, std::move(out), {an, bn},
                                   std::move(backprop)));
}

namespace {

struct ConvDims {
  int c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernels, int stride, int padding) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [c,h,w]");
  if (kernels.rank() != 4) throw ShapeError("conv2d: kernels must be [c_out,c_in,kh,kw]");
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  ConvDims d;
  d.c_in = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.c_out = kernels.dim(0);
  d.kh = kernels.dim(2);
  d.kw = kernels.dim(3);
  d.stride = stride;
  d.pad = padding;
  if (kernels.dim(1) != d.c_in) {
    throw ShapeError("conv2d: kernel c_in " + std::to_string(kernels.dim(1)) +
                     " != input channels " + std::to_string(d.c_in));
  }
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
    throw ShapeError("conv2d: kernel exceeds padded input extent");
  }
  d.h_out = (d.h + 2 * padding - d.kh) / stride + 1;
  d.w_out = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

// cols is [c_in*kh*kw, h_out*w_out], row-major.
void im2col(const double* x, const ConvDims& d, double* cols) {
  const int hw_out = d.h_out * d.w_out;
  int row = 0;
  for (int c = 0; c < d.c_in; ++c) {
    const double* xc = x + static_cast<int64_t>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj, ++row) {
        double* dst = cols + static_cast<int64_t>(row) * hw_out;
        for (int oy = 0; oy < d.h_out; ++oy) {
          const int iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.w_out, 0.0);
            dst += d.w_out;
            continue;
          }
          const double* xr = xc + static_cast<int64_t>(iy) * d.w;
          for (int ox = 0; ox < d.w_out; ++ox) {
            const int ix = ox * d.stride - d.pad + kj;
            *dst++ = (ix >= 0 && ix < d.w) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvDims& d, double* x) {
  const int hw_out = d.h_out * d.w_out;
  int row = 0;
  for (int c = 0; c < d.c_in; ++c) {
    double* xc = x + static_cast<int64_t>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj, ++row) {
        const double* src = cols + static_cast<int64_t>(row) * hw_out;
        for (int oy = 0; oy < d.h_out; ++oy) {
          const int iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.h) {
            src += d.w_out;
            continue;
          }
          double* xr = xc + static_cast<int64_t>(iy) * d.w;
          for (int ox = 0; ox < d.w_out; ++ox) {
            const int ix = ox * d.stride - d.pad + kj;
            if (ix >= 0 && ix < d.w) xr[ix] += src[ox];
          }
          src += d.w_out;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int stride, int padding) {
  const ConvDims d = conv_dims(input, kernels, stride, padding);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.c_out)) {
    throw ShapeError("conv2d: bias must be [c_out]");
  }
  const int hw_out = d.h_out * d.w_out;
  const int kdim = d.c_in * d.kh * d.kw;

  auto cols = std::make_shared<std::vector<double>>(
      static_cast<int64_t>(kdim) * hw_out);
  im2col(input.data().data(), d, cols->data());

  std::vector<double> out(static_cast<int64_t>(d.c_out) * hw_out, 0.0);
  detail::gemm_nn(d.c_out, hw_out, kdim, kernels.data().data(), cols->data(),
                  out.data());
  if (bias.defined()) {
    for (int c = 0; c < d.c_out; ++c) {
      double* oc = out.data() + static_cast<int64_t>(c) * hw_out;
      const double bv = bias[c];
      for (int i = 0; i < hw_out; ++i) oc[i] += bv;
    }
  }

  auto xn = input.node_ptr();
  auto wn = kernels.node_ptr();
  std::shared_ptr<TensorNode> bn = bias.defined() ? bias.node_ptr() : nullptr;

  auto backprop = [xn, wn, bn, d, cols, hw_out, kdim](const std::vector<double>& up,
                                                      GradSink& sink) {
    if (wn->requires_grad) {
      auto& gw = sink.buffer(wn.get());
      detail::gemm_nt(d.c_out, kdim, hw_out, up.data(), cols->data(), gw.data());
    }
    if (bn && bn->requires_grad) {
      auto& gb = sink.buffer(bn.get());
      for (int c = 0; c < d.c_out; ++c) {
        const double* uc = up.data() + static_cast<int64_t>(c) * hw_out;
        double s = 0.0;
        for (int i = 0; i < hw_out; ++i) s += uc[i];
        gb[c] += s;
      }
    }
    if (xn->requires_grad) {
      // overwrite semantics, so the scratch skips its zero fill
      std::unique_ptr<double[]> gcols(new double[static_cast<int64_t>(kdim) * hw_out]);
      detail::gemm_tn_overwrite(kdim, hw_out, d.c_out, wn->data.data(), up.data(),
                                gcols.get());
      auto& gx = sink.buffer(xn.get());
      col2im(gcols.get(), d, gx.data());
    }
  };

  std::vector<std::shared_ptr<TensorNode>> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return Tensor::wrap(make_op_node("conv2d", Shape{d.c_out, d.h_out, d.w_out},
                                   std::move(out), std::move(parents),
                                   std::move(backprop)));
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int padding) {
  return conv2d(input, kernels, Tensor(), stride, padding);
}

// --- structure --------------------------------------------------------------

Tensor detach(const Tensor& t) {
  return Tensor::from_data(t.shape(),
                           std::vector<double>(t.data().begin(), t.data().end()));
}

Tensor reshape(const Tensor& t, Shape new_shape) {
  check_shape_valid(new_shape);
  if (shape_size(new_shape) != t.size()) {
    throw ShapeError("reshape: " + shape_str(t.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  auto tn = t.node_ptr();
  std::vector<double> out(tn->data);
  auto backprop = [tn](const std::vector<double>& up, GradSink& sink) {
    if (!tn->requires_grad) return;
    auto& buf = sink.buffer(tn.get());
    for (size_t i = 0; i < up.size(); ++i) buf[i] += up[i];
  };
  return Tensor::wrap(make_op_node("reshape", std::move(new_shape), std::move(out),
                                   {tn}, std::move(backprop)));
}

Tensor permute(const Tensor& t, const std::vector<int>& order) {
  const Shape& in_shape = t.shape();
  const int r = t.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    if (order[i] < 0 || order[i] >= r || seen[order[i]]) {
      throw ShapeError("permute: invalid axis order");
    }
    seen[order[i]] = true;
    out_shape[i] = in_shape[order[i]];
  }

  std::vector<int64_t> in_strides;
  strides_of(in_shape, in_strides);
  const int64_t n = t.size();

  // Source index per output position, built with an odometer over the output
  // space (no per-element division).
  auto source_of = std::make_shared<std::vector<int64_t>>(n);
  {
    std::vector<int64_t> step(r);
    for (int axis = 0; axis < r; ++axis) step[axis] = in_strides[order[axis]];
    std::vector<int64_t> coords(r, 0);
    int64_t in_idx = 0;
    for (int64_t i = 0; i < n; ++i) {
      (*source_of)[i] = in_idx;
      for (int axis = r - 1; axis >= 0; --axis) {
        ++coords[axis];
        in_idx += step[axis];
        if (coords[axis] < out_shape[axis]) break;
        coords[axis] = 0;
        in_idx -= step[axis] * out_shape[axis];
      }
    }
  }

  const auto& src = t.data();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = src[(*source_of)[i]];

  auto tn = t.node_ptr();
  auto backprop = [tn, source_of, n](const std::vector<double>& up, GradSink& sink) {
    if (!tn->requires_grad) return;
    auto& buf = sink.buffer(tn.get());
    for (int64_t i = 0; i < n; ++i) buf[(*source_of)[i]] += up[i];
  };
  return Tensor::wrap(make_op_node("permute", std::move(out_shape), std::move(out),
                                   {tn}, std::move(backprop)));
}

Tensor narrow0(const Tensor& t, int start, int len) {
  const Shape& s = t.shape();
  if (s.empty()) throw ShapeError("narrow0: rank-0 tensor");
  if (start < 0 || len < 1 || start + len > s[0]) {
    throw ShapeError("narrow0: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") outside axis of size " +
                     std::to_string(s[0]));
  }
  const int64_t inner = t.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = len;
  const auto& src = t.data();
  std::vector<double> out(src.begin() + start * inner,
                          src.begin() + (start + len) * inner);

  auto tn = t.node_ptr();
  auto backprop = [tn, start, inner](const std::vector<double>& up, GradSink& sink) {
    if (!tn->requires_grad) return;
    auto& buf = sink.buffer(tn.get());
    for (size_t i = 0; i < up.size(); ++i) buf[start * inner + i] += up[i];
  };
  return Tensor::wrap(make_op_node("narrow0", std::move(out_shape), std::move(out),
                                   {tn}, std::move(backprop)));
}

Tensor stack0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("stack0: empty input");
  const Shape& base = parts[0].shape();
  for (const Tensor& p : parts) {
    if (p.shape() != base) throw ShapeError("stack0: mismatched part shapes");
  }
  const int64_t inner = parts[0].size();
  Shape out_shape;
  out_shape.push_back(static_cast<int>(parts.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());

  std::vector<double> out;
  out.reserve(inner * parts.size());
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(parts.size());
  for (const Tensor& p : parts) {
    const auto& d = p.data();
    out.insert(out.end(), d.begin(), d.end());
    parents.push_back(p.node_ptr());
  }

  auto parent_copy = parents;
  auto backprop = [parent_copy, inner](const std::vector<double>& up, GradSink& sink) {
    for (size_t k = 0; k < parent_copy.size(); ++k) {
      if (!parent_copy[k]->requires_grad) continue;
      auto& buf = sink.buffer(parent_copy[k].get());
      const double* src = up.data() + k * inner;
      for (int64_t i = 0; i < inner; ++i) buf[i] += src[i];
    }
  };
  return Tensor::wrap(make_op_node("stack0", std::move(out_shape), std::move(out),
                                   std::move(parents), std::move(backprop)));
}

// --- reductions --------------------------------------------------------------

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<int64_t> out_index_of;  // input flat index -> output flat index
  int64_t group_size = 1;
  bool trailing = false;  // reduced axes are exactly the trailing ones
};

ReducePlan plan_reduce(const Shape& in_shape, const std::vector<int>& axes) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<bool> reduced(r, false);
  for (int a : axes) {
    if (a < 0 || a >= r) throw ShapeError("reduce: axis " + std::to_string(a) + " out of range");
    if (reduced[a]) throw ShapeError("reduce: duplicate axis");
    reduced[a] = true;
  }
  ReducePlan plan;
  for (int i = 0; i < r; ++i) {
    if (!reduced[i]) plan.out_shape.push_back(in_shape[i]);
    else plan.group_size *= in_shape[i];
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};

  // Contiguous-group case (reduction over the trailing axes): no index map.
  plan.trailing = true;
  for (int i = 0; i < r; ++i) {
    const bool should_reduce = i >= r - static_cast<int>(axes.size());
    if (reduced[i] != should_reduce) {
      plan.trailing = false;
      break;
    }
  }
  if (plan.trailing) return plan;

  std::vector<int64_t> out_strides;
  strides_of(plan.out_shape, out_strides);

  // Per-input-axis contribution to the output index (0 for reduced axes),
  // walked with an odometer over the input space.
  std::vector<int64_t> step(r, 0);
  {
    int out_axis = 0;
    for (int axis = 0; axis < r; ++axis) {
      if (!reduced[axis]) step[axis] = out_strides[out_axis++];
    }
  }
  const int64_t n = shape_size(in_shape);
  plan.out_index_of.resize(n);
  std::vector<int64_t> coords(r, 0);
  int64_t out_idx = 0;
  for (int64_t idx = 0; idx < n; ++idx) {
    plan.out_index_of[idx] = out_idx;
    for (int axis = r - 1; axis >= 0; --axis) {
      ++coords[axis];
      out_idx += step[axis];
      if (coords[axis] < in_shape[axis]) break;
      coords[axis] = 0;
      out_idx -= step[axis] * in_shape[axis];
    }
  }
  return plan;
}

}  // namespace

Tensor reduce(ReduceOp op, const Tensor& t, const std::vector<int>& axes) {
  auto plan = std::make_shared<ReducePlan>(plan_reduce(t.shape(), axes));
  const int64_t n = t.size();
  const int64_t out_n = shape_size(plan->out_shape);
  const auto& src = t.data();

  std::vector<double> out;
  auto argmax = std::make_shared<std::vector<int64_t>>();
  const int64_t group = plan->group_size;
  switch (op) {
    case ReduceOp::kSum:
    case ReduceOp::kMean: {
      out.assign(out_n, 0.0);
      if (plan->trailing) {
        for (int64_t o = 0; o < out_n; ++o) {
          const double* block = src.data() + o * group;
          double s = 0.0;
          for (int64_t j = 0; j < group; ++j) s += block[j];
          out[o] = s;
        }
      } else {
        for (int64_t i = 0; i < n; ++i) out[plan->out_index_of[i]] += src[i];
      }
      if (op == ReduceOp::kMean) {
        const double inv = 1.0 / static_cast<double>(group);
        for (double& v : out) v *= inv;
      }
      break;
    }
    case ReduceOp::kMax: {
      out.assign(out_n, -std::numeric_limits<double>::infinity());
      argmax->assign(out_n, -1);
      for (int64_t i = 0; i < n; ++i) {
        const int64_t o = plan->trailing ? i / group : plan->out_index_of[i];
        if (src[i] > out[o]) {  // strict: ties keep the first (row-major) hit
          out[o] = src[i];
          (*argmax)[o] = i;
        }
      }
      break;
    }
  }

  auto tn = t.node_ptr();
  const double inv_group = 1.0 / static_cast<double>(group);
  auto backprop = [op, tn, plan, argmax, n, group, inv_group](
                      const std::vector<double>& up, GradSink& sink) {
    if (!tn->requires_grad) return;
    auto& buf = sink.buffer(tn.get());
    switch (op) {
      case ReduceOp::kSum:
        if (plan->trailing) {
          for (size_t o = 0; o < up.size(); ++o) {
            double* block = buf.data() + o * group;
            const double g = up[o];
            for (int64_t j = 0; j < group; ++j) block[j] += g;
          }
        } else {
          for (int64_t i = 0; i < n; ++i) buf[i] += up[plan->out_index_of[i]];
        }
        break;
      case ReduceOp::kMean:
        if (plan->trailing) {
          for (size_t o = 0; o < up.size(); ++o) {
            double* block = buf.data() + o * group;
            const double g = up[o] * inv_group;
            for (int64_t j = 0; j < group; ++j) block[j] += g;
          }
        } else {
          for (int64_t i = 0; i < n; ++i) buf[i] += up[plan->out_index_of[i]] * inv_group;
        }
        break;
      case ReduceOp::kMax:
        for (size_t o = 0; o < argmax->size(); ++o) buf[(*argmax)[o]] += up[o];
        break;
    }
  };
  const char* name = op == ReduceOp::kSum ? "reduce_sum"
                     : op == ReduceOp::kMean ? "reduce_mean"
                                             : "reduce_max";
  return Tensor::wrap(make_op_node(name, plan->out_shape, std::move(out), {tn},
                                   std::move(backprop)));
}

Tensor reduce_sum(const Tensor& t, const std::vector<int>& axes) {
  return reduce(ReduceOp::kSum, t, axes);
}
Tensor reduce_mean(const Tensor& t, const std::vector<int>& axes) {
  return reduce(ReduceOp::kMean, t, axes);
}
Tensor reduce_max(const Tensor& t, const std::vector<int>& axes) {
  return reduce(ReduceOp::kMax, t, axes);
}

Tensor softmax(const Tensor& t, int axis) {
  const Shape& s = t.shape();
  const int r = t.rank();
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const int64_t len = s[axis];

  const auto& src = t.data();
  std::vector<double> out(t.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < len; ++l) mx = std::max(mx, src[base + l * inner]);
      double sum = 0.0;
      for (int64_t l = 0; l < len; ++l) {
        const double e = std::exp(src[base + l * inner] - mx);
        out[base + l * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int64_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }
  }

  auto tn = t.node_ptr();
  auto out_copy = std::make_shared<std::vector<double>>(out);
  auto backprop = [tn, out_copy, outer, inner, len](const std::vector<double>& up,
                                                    GradSink& sink) {
    if (!tn->requires_grad) return;
    auto& buf = sink.buffer(tn.get());
    const auto& y = *out_copy;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * len * inner + in;
        double dot = 0.0;
        for (int64_t l = 0; l < len; ++l) {
          const int64_t idx = base + l * inner;
          dot += up[idx] * y[idx];
        }
        for (int64_t l = 0; l < len; ++l) {
          const int64_t idx = base + l * inner;
          buf[idx] += y[idx] * (up[idx] - dot);
        }
      }
    }
  };
  return Tensor::wrap(make_op_node("softmax", s, std::move(out), {tn},
                                   std::move(backprop)));
}

// --- autodiff ---------------------------------------------------------------

std::vector<double>& GradSink::buffer(TensorNode* node) {
  auto it = bufs_.find(node);
  if (it == bufs_.end()) {
    it = bufs_.emplace(node, std::vector<double>(node->data.size(), 0.0)).first;
  }
  return it->second;
}

void GradStore::accumulate(TensorNode* node, const std::vector<double>& g) {
  auto it = grads_.find(node);
  if (it == grads_.end()) {
    grads_.emplace(node, g);
  } else {
    auto& dst = it->second;
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

void GradStore::add_from(const GradStore& other) {
  for (const auto& [node, g] : other.grads_) accumulate(node, g);
}

const std::vector<double>* GradStore::find(TensorNode* node) const {
  auto it = grads_.find(node);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradStore::clear() { grads_.clear(); }

namespace {

// Reverse topological order of the reachable requires_grad subgraph.
std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  // Iterative post-order DFS.
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root->requires_grad) stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());  // root first
  return order;
}

void run_backward(const Tensor& loss, double seed, GradStore* store) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  TensorNode* root = loss.node();
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!root->requires_grad) {
    throw ContractError("backward: loss does not depend on any tracked tensor");
  }
  if (root->consumed) {
    throw ContractError("backward: graph already consumed; re-run the forward pass");
  }
  root->consumed = true;

  GradSink sink;
  sink.buffer(root)[0] = seed;
  for (TensorNode* node : topo_order(root)) {
    auto& g = sink.buffer(node);
    if (node->is_leaf) {
      if (store) {
        store->accumulate(node, g);
      } else {
        if (node->grad.empty()) {
          node->grad = g;
        } else {
          for (size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
        }
      }
      continue;
    }
    if (node->backprop) node->backprop(g, sink);
  }
}

}  // namespace

void backward(const Tensor& loss) { run_backward(loss, 1.0, nullptr); }

void backward(const Tensor& loss, double seed, GradStore& store) {
  run_backward(loss, seed, &store);
}

}  // namespace decaps
