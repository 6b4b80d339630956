#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace meshtrack {

class Tape;
class BackwardCtx;

// Dense row-major tensor of doubles. Values are immutable once created as far
// as the autodiff machinery is concerned; handles share storage cheaply.
// A tensor is either a plain constant or attached to a Tape node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<int> shape, std::vector<double> data);
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return store_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return store_ ? store_->size() : 0; }

  const double* data() const { return store_->data(); }
  double* data() { return store_->data(); }
  const std::vector<double>& vec() const { return *store_; }
  double operator[](std::size_t i) const { return (*store_)[i]; }

  // Value of a one-element tensor.
  double item() const;

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  // A tensor participates in gradient computation iff it is on a tape.
  bool requires_grad() const { return on_tape(); }

  std::shared_ptr<std::vector<double>> storage() const { return store_; }

 private:
  friend class Tape;
  std::shared_ptr<std::vector<double>> store_;
  std::vector<int> shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Handed to backward functions: the gradient flowing into a node plus
// accumulation buffers for its parents.
class BackwardCtx {
 public:
  const double* out_grad() const;
  std::size_t out_size() const;
  // Gradient accumulation buffer for parent i (zero-initialized on first
  // request), or nullptr when that parent is a constant.
  double* parent_grad(std::size_t i);
  std::size_t parent_size(std::size_t i) const;

 private:
  friend class Tape;
  BackwardCtx(Tape* tape, int node) : tape_(tape), node_(node) {}
  Tape* tape_;
  int node_;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction; backward() walks them once in reverse.
// Single-owner: one thread records and runs backward. Parallelism lives
// inside individual operations.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable leaf. The returned handle shares
  // storage with `value`.
  Tensor leaf(const Tensor& value);

  // Records an operation node. `inputs` are the tensors the backward
  // function wants gradients routed to (constants allowed, they are
  // skipped). Returns `value` bound to the new node. When no input is on a
  // tape the value is returned unbound and `backward` is discarded.
  Tensor record(std::initializer_list<const Tensor*> inputs, Tensor value,
                std::function<void(BackwardCtx&)> backward);

  // The tape shared by any on-tape tensor among `ts` (nullptr if none).
  // Mixing tensors from two different tapes is rejected.
  static Tape* joint_tape(std::initializer_list<const Tensor*> ts);

  // Reverse pass from a scalar root. Repeatable: each call recomputes all
  // gradients from scratch, deterministically.
  void backward(const Tensor& root);

  // Accumulated gradient of `t` after backward(); zeros if no gradient
  // reached it.
  Tensor grad(const Tensor& t) const;

  void clear();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class BackwardCtx;
  struct Node {
    std::vector<int> parents;  // node ids, -1 for constant inputs
    std::vector<int> shape;
    std::size_t numel = 0;
    std::function<void(BackwardCtx&)> backward;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// ---- elementwise (shapes must match exactly, or either side is scalar) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor maximum(const Tensor& a, double threshold);
Tensor relu(const Tensor& a);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(double s, const Tensor& a) { return div(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ----

// Reduce over `axes` (empty = all axes). Reduced dimensions are dropped.
Tensor sum(const Tensor& a, std::vector<int> axes = {});
Tensor mean(const Tensor& a, std::vector<int> axes = {});

struct MinReduce {
  Tensor values;
  // Flat index into the input of the (first) minimizer per output element;
  // the gradient is routed there exclusively.
  std::vector<std::int64_t> argmin;
};
MinReduce reduce_min(const Tensor& a, std::vector<int> axes = {});

// ---- shape ----

Tensor reshape(const Tensor& a, std::vector<int> shape);
// Concatenation along axis 0.
Tensor concat(const std::vector<Tensor>& parts);

// ---- neural-network primitives ----

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad);
// x: [Cin,D,H,W], w: [Cout,Cin,kd,kh,kw].
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<int, 3> stride, std::array<int, 3> pad);
// x: [Cin,D,H,W], w: [Cin,Cout,kd,kh,kw]; exact adjoint of conv3d with the
// same stride/pad.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias,
                        std::array<int, 3> stride, std::array<int, 3> pad);
// Per-channel standardization over all non-channel dimensions (channel =
// axis 0) followed by affine gamma/beta (each of shape [C]).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

}  // namespace meshtrack
