#pragma once

// Tape-based reverse-mode autodiff over small dense tensors.
//
// A Tape owns every value produced during one forward pass. Nodes are
// appended in topological order, and backward() walks them once in reverse.
// Each op is a free function taking Var handles; a node is only given a
// backward closure when at least one input requires a gradient.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mecq/tensor.hpp"

namespace mecq::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Maps upstream gradient to one gradient per input (an empty Tensor for
// inputs that do not need one).
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  // Zero tensor for any node the loss does not depend on.
  Tensor operator[](Var v) const;
  bool reached(Var v) const { return v.id() < grads_.size() && grads_[v.id()].defined(); }

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string_view op);

  Gradients backward(Var loss) const;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string op;
  };
  std::vector<Node> nodes_;
};

// Custom forward with a user-supplied vector-Jacobian product. Used for the
// straight-through estimator, where backward deliberately ignores the true
// derivative of forward.
class CustomOp {
 public:
  using Forward = std::function<Tensor(const Tensor& input)>;
  using Vjp = std::function<Tensor(const Tensor& input, const Tensor& grad_out)>;

  CustomOp(Forward forward, Vjp vjp, std::string name = "custom")
      : forward_(std::move(forward)), vjp_(std::move(vjp)), name_(std::move(name)) {}

  Var operator()(Var x) const;

 private:
  Forward forward_;
  Vjp vjp_;
  std::string name_;
};

CustomOp custom_gradient(CustomOp::Forward forward, CustomOp::Vjp vjp, std::string name = "custom");

// --- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var relu(Var a);
Var reshape(Var a, Shape shape);

// (N, F) + (F) broadcast over rows.
Var add_bias(Var a, Var bias);

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
};
// NCHW input, OIHW weight.
Var conv2d(Var x, Var w, Conv2dParams p = {});

// Per-channel y = gamma * x + beta on NCHW input.
Var channel_affine(Var x, Var gamma, Var beta);

// (N, C, H, W) -> (N, C).
Var global_avg_pool(Var x);

// Row-wise log-softmax with max subtraction.
Var log_softmax(Var a);
Var softmax(Var a);

Var reduce_sum(Var a);
Var reduce_mean(Var a);

// Scalars -> rank-1 vector.
Var stack(const std::vector<Var>& scalars);

// Scales each column to unit L2 norm; all-zero columns pass through.
Var normalize_columns(Var z);

// Tr(sum_j coeffs[j] * (X - shift*I)^j) for j >= 1; coeffs[0] is ignored
// (the constant term belongs to the caller).
Var trace_poly(Var x, double shift, const std::vector<double>& coeffs);

}  // namespace mecq::ad
