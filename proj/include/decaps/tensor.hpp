#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "decaps/errors.hpp"
#include "decaps/rng.hpp"

namespace decaps {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class GradSink;

// One vertex of the reverse-mode graph. Tensors are shared handles to nodes;
// a node stays alive while any output depending on it does.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaves only, populated by backward()
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // set on a loss root after backward()
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pushes d(root)/d(parent) contributions into the sink, given d(root)/d(this).
  std::function<void(const std::vector<double>&, GradSink&)> backprop;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
};

// Dense row-major tensor with optional gradient tracking. Values are checked
// finite after every public operation; immutability after construction is the
// rule, with mutable_data() reserved for the optimizer and deserialization.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, double value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor gaussian(Shape shape, double mean, double stddev, Rng& rng,
                         bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  int64_t size() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  double operator[](int64_t flat_index) const;
  double scalar() const;  // size-1 tensors only

  bool has_grad() const;
  std::span<const double> grad() const;
  void clear_grad();

  std::span<double> mutable_data();

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

enum class EwOp { kAdd, kSub, kMul, kDiv, kRelu, kSqrt, kSquare };
enum class ReduceOp { kSum, kMean, kMax };

// --- elementwise ---------------------------------------------------------
// Binary ops accept equal shapes, a size-1 scalar on either side, or a
// "map over trailing axis" broadcast: a's shape equal to b's shape minus its
// last axis (e.g. a [h,w] map applied to [h,w,d] votes), on either side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);  // |divisor| >= kDivEpsilon
Tensor relu(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);
Tensor square(const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// 1 / max(x, floor); the guarded reciprocal used inside cosine/normalize
// compositions where a vanishing denominator has a defined meaning.
Tensor reciprocal_clamped(const Tensor& a, double floor);

// --- linear algebra / conv ----------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
// input [c_in,h,w], kernels [c_out,c_in,kh,kw], optional bias [c_out].
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias,
              int stride, int padding);
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int padding);

// --- structure -----------------------------------------------------------
// Value copy outside the graph.
Tensor detach(const Tensor& t);
Tensor reshape(const Tensor& t, Shape new_shape);
Tensor permute(const Tensor& t, const std::vector<int>& order);
Tensor narrow0(const Tensor& t, int start, int len);  // slice along axis 0
Tensor stack0(const std::vector<Tensor>& parts);      // new leading axis

// --- reductions / softmax -------------------------------------------------
// Reduced axes are removed; reducing away every axis yields shape {1}.
Tensor reduce(ReduceOp op, const Tensor& t, const std::vector<int>& axes);
Tensor reduce_sum(const Tensor& t, const std::vector<int>& axes);
Tensor reduce_mean(const Tensor& t, const std::vector<int>& axes);
Tensor reduce_max(const Tensor& t, const std::vector<int>& axes);
Tensor softmax(const Tensor& t, int axis);

// --- autodiff -------------------------------------------------------------

// Per-node gradient buffers for one backward traversal.
class GradSink {
 public:
  std::vector<double>& buffer(TensorNode* node);
  const std::unordered_map<TensorNode*, std::vector<double>>& buffers() const {
    return bufs_;
  }

 private:
  std::unordered_map<TensorNode*, std::vector<double>> bufs_;
};

// Accumulates leaf gradients across backward calls without touching the
// shared nodes, so per-sample backward passes can run on worker threads and
// be reduced deterministically afterwards.
class GradStore {
 public:
  void accumulate(TensorNode* node, const std::vector<double>& g);
  void add_from(const GradStore& other);
  const std::vector<double>* find(TensorNode* node) const;
  const std::unordered_map<TensorNode*, std::vector<double>>& entries() const {
    return grads_;
  }
  void clear();
  bool empty() const { return grads_.empty(); }

 private:
  std::unordered_map<TensorNode*, std::vector<double>> grads_;
};

// Seeds d(loss)/d(loss) = 1 and writes .grad on every reachable leaf that
// requires it. The loss must be scalar; a second backward on the same root
// without re-running the forward pass is an error.
void backward(const Tensor& loss);
// Trainer path: seeds with `seed` and accumulates leaf grads into `store`.
void backward(const Tensor& loss, double seed, GradStore& store);

inline constexpr double kDivEpsilon = 1e-12;

namespace detail {
// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c);
// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c);
// c[m,n] += a[k,m]^T * b[k,n]
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c);
// c[m,n] = a[k,m]^T * b[k,n]
void gemm_tn_overwrite(int m, int n, int k, const double* a, const double* b, double* c);
void check_finite(const std::vector<double>& values, const char* op);
}  // namespace detail

}  // namespace decaps
