#include "peerdistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "peerdistill/error.hpp"

namespace peerdistill {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::span<double> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + shape_string(shape) +
                                     " has a zero extent");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->values.assign(shape_size(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return impl_->values[0];
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from(impl_->shape, impl_->values, false);
}

Tensor Tensor::clone() const {
  return from(impl_->shape, impl_->values, impl_->requires_grad);
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() noexcept { return g_current_tape; }

void Tape::record(std::initializer_list<Tensor> inputs, const Tensor& output,
                  BackwardFn fn) {
  Node node;
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.impl());
  node.output = output.impl();
  node.output->requires_grad = true;
  node.fn = std::move(fn);
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape())
                                        : std::string("<undefined>")));
  }
  auto it = std::find_if(nodes_.rbegin(), nodes_.rend(), [&](const Node& n) {
    return n.output == loss.impl();
  });
  if (it == nodes_.rend()) {
    throw ContractError("backward() on a loss that is not on the active tape");
  }
  const std::size_t last = static_cast<std::size_t>(nodes_.rend() - it) - 1;

  for (std::size_t i = 0; i <= last; ++i) {
    auto& g = nodes_[i].output->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
  loss.impl()->grad_buffer()[0] = 1.0;

  for (std::size_t i = last + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.fn();
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

bool should_record(std::initializer_list<Tensor> inputs) {
  if (Tape::current() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

double finite_diff_check(const ScalarFn& f, const GradientFn& gradient,
                         std::span<const double> x, double step) {
  const std::vector<double> analytic = gradient(x);
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + step;
    const double plus = f(probe);
    probe[k] = saved - step;
    const double minus = f(probe);
    probe[k] = saved;
    const double central = (plus - minus) / (2.0 * step);
    const double err =
        std::abs(analytic.at(k) - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

double finite_diff_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& loss,
    std::vector<Tensor> inputs, double step) {
  std::vector<std::size_t> trainable;
  std::size_t total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].requires_grad()) {
      trainable.push_back(i);
      total += inputs[i].size();
    }
  }

  auto scatter = [&](std::span<const double> flat) {
    std::size_t off = 0;
    for (std::size_t i : trainable) {
      auto dst = inputs[i].mutable_values();
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(),
                  dst.begin());
      off += dst.size();
    }
  };

  std::vector<double> x0;
  x0.reserve(total);
  for (std::size_t i : trainable) {
    auto v = inputs[i].values();
    x0.insert(x0.end(), v.begin(), v.end());
  }

  ScalarFn value = [&](std::span<const double> flat) {
    scatter(flat);
    return loss(inputs).item();
  };
  GradientFn grad = [&](std::span<const double> flat) {
    scatter(flat);
    for (std::size_t i : trainable) inputs[i].zero_grad();
    std::vector<double> out;
    out.reserve(total);
    {
      Tape tape;
      tape.backward(loss(inputs));
    }
    for (std::size_t i : trainable) {
      auto g = inputs[i].grad();
      if (g.empty()) {
        out.insert(out.end(), inputs[i].size(), 0.0);
      } else {
        out.insert(out.end(), g.begin(), g.end());
      }
    }
    return out;
  };

  const double err = finite_diff_check(value, grad, x0, step);
  scatter(x0);
  return err;
}

}  // namespace peerdistill
