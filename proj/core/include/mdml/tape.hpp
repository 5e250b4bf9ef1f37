#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mdml/value_matrix.hpp"

namespace mdml {

// A trainable tensor: value, accumulated gradient and adaptive-moment state.
struct Parameter {
  std::string name;
  ValueMatrix value;
  ValueMatrix grad;
  ValueMatrix moment1;
  ValueMatrix moment2;
  std::uint64_t steps = 0;

  Parameter() = default;
  Parameter(std::string n, ValueMatrix v);

  void zero_grad() { grad.fill(0.0); }
};

// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

// Reverse-mode recorder over dense matrices.
//
// Nodes are appended in execution order; backward() visits them in exact
// reverse order and accumulates additively. A node only stores a backward
// closure when at least one of its inputs requires a gradient, so graphs built
// over frozen parameters cost nothing on the reverse sweep.
//
// A Tape is single-threaded. Independent tapes may run concurrently as long as
// the parameters they read are not being written.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(ValueMatrix value);
  Var constant(double value);
  Var input(ValueMatrix value, bool requires_grad);
  // Reads p.value in place; p must outlive the tape. Gradients accumulate
  // into p.grad during backward() when requires_grad is set.
  Var parameter(Parameter& p, bool requires_grad = true);
  Var parameter(const Parameter& p);

  // Dense algebra.
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);                 // same shape
  Var sub(Var a, Var b);                 // same shape
  Var add_row(Var a, Var row);           // row (1 x cols) broadcast over rows of a
  Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }
  Var scale(Var a, double k);
  Var add_scalar(Var a, double c);
  Var exp(Var a);
  Var relu(Var a);                       // subgradient 0 at the kink
  Var gelu(Var a);                       // exact erf form
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  // Per-row softmax of logits / t, with t a 1x1 node.
  Var softmax_temp(Var logits, Var t);
  Var column(Var a, std::size_t c);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var sum(Var a);
  Var mean(Var a);
  // Mean binary cross-entropy of probabilities p (n x 1) against 0/1 targets.
  Var mean_bce(Var p, std::span<const int> targets);
  // mean_ij (x_hat_ij - x_ij)^2 / var_j
  Var weighted_squared_error(Var x_hat, const ValueMatrix& x, std::span<const double> variance);

  void backward(Var loss);

  const ValueMatrix& value(Var v) const;
  double scalar(Var v) const;
  // Gradient of the last backward() w.r.t. this node; zeros if none reached it.
  const ValueMatrix& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    ValueMatrix owned;
    const ValueMatrix* external = nullptr;
    ValueMatrix grad;
    bool requires_grad = false;
    Parameter* sink = nullptr;
    std::function<void(Tape&)> backward;

    const ValueMatrix& value() const { return external ? *external : owned; }
  };

  Var push(Node node);
  Node& node(Var v);
  const Node& node(Var v) const;
  ValueMatrix& grad_buffer(Var v);
  bool any_requires(std::initializer_list<Var> vars) const;

  std::vector<Node> nodes_;
  bool swept_ = false;
};

// Standalone clamped binary cross-entropy; p is clamped to [1e-7, 1 - 1e-7].
double bce(double p, int target);
inline constexpr double kBceClamp = 1e-7;

double gelu_value(double x) noexcept;
double gelu_derivative(double x) noexcept;

namespace testing {
// Fault injection for mutation tests of the gradient checker: flips the sign
// of the GELU backward pass while enabled. Not for production use.
void set_gelu_backward_sign_flip(bool enabled);
bool gelu_backward_sign_flip();
}  // namespace testing

}  // namespace mdml
