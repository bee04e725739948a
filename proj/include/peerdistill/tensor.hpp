#pragma once

// Reverse-mode automatic differentiation over dense row-major double arrays.
//
// A Tensor is a shared handle onto a buffer of values plus an optional
// gradient buffer. Operations in ops.hpp record a node on the thread's active
// Tape whenever one of their inputs requires a gradient; Tape::backward then
// walks the recorded nodes in reverse order. Leaf tensors (model parameters)
// accumulate gradients across backward calls until zero_grad().
//
// A Tape is installed for the lifetime of the object (RAII) and is meant to
// cover exactly one forward/backward episode. Tapes nest: the previous tape is
// restored on destruction.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace peerdistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::span<double> grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  std::span<double> mutable_values() { return impl_->values; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zero-length span when no gradient has been accumulated yet.
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_buffer() { return impl_->grad_buffer(); }
  void zero_grad();

  // New leaf holding a copy of the values; never records on a tape.
  Tensor detach() const;

  // Deep copy that keeps requires_grad.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept;

  // Inputs must already be on this tape or be leaves; this keeps the node list
  // topologically ordered by construction.
  void record(std::initializer_list<Tensor> inputs, const Tensor& output,
              BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  // Intermediate gradients are reset first, so repeated calls add exactly one
  // more copy of the gradient into each leaf.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  Tape* previous_;
};

// Backward on the active tape. Throws ContractError when no tape is active,
// the loss is not scalar, or the loss was not produced on the active tape.
void backward(const Tensor& loss);

// True when an operation over these inputs should be recorded.
bool should_record(std::initializer_list<Tensor> inputs);

// Scalar function of a flat parameter vector.
using ScalarFn = std::function<double(std::span<const double>)>;
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

// max_k |analytic_k - central_k| / max(1, |central_k|) with central
// differences of the given step.
double finite_diff_check(const ScalarFn& f, const GradientFn& gradient,
                         std::span<const double> x, double step);

// Same check for a loss assembled from tensors: `loss` is rebuilt on a fresh
// tape for every evaluation; every input with requires_grad is perturbed.
double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> inputs, double step);

}  // namespace peerdistill
