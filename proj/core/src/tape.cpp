#include "mdml/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <string>

#include "mdml/errors.hpp"

namespace mdml {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const ValueMatrix& m) {
  return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                  static_cast<Eigen::Index>(m.cols()));
}
MutMap view(ValueMatrix& m) {
  return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                static_cast<Eigen::Index>(m.cols()));
}

std::string shape(const ValueMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::atomic<bool> g_gelu_sign_flip{false};

}  // namespace

Parameter::Parameter(std::string n, ValueMatrix v)
    : name(std::move(n)),
      value(std::move(v)),
      grad(value.rows(), value.cols()),
      moment1(value.rows(), value.cols()),
      moment2(value.rows(), value.cols()) {}

double gelu_value(double x) noexcept { return x * 0.5 * std::erfc(-x * kInvSqrt2); }

double gelu_derivative(double x) noexcept {
  const double cdf = 0.5 * std::erfc(-x * kInvSqrt2);
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

double bce(double p, int target) {
  if (target != 0 && target != 1) {
    throw ParameterError("bce: target must be 0 or 1, got " + std::to_string(target));
  }
  const double q = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
  return target == 1 ? -std::log(q) : -std::log(1.0 - q);
}

namespace testing {
void set_gelu_backward_sign_flip(bool enabled) { g_gelu_sign_flip.store(enabled); }
bool gelu_backward_sign_flip() { return g_gelu_sign_flip.load(); }
}  // namespace testing

// ---------------------------------------------------------------------------
// bookkeeping

Var Tape::push(Node n) {
  if (swept_) throw UsageError("Tape: cannot record after backward()");
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw UsageError("Tape: invalid node handle");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw UsageError("Tape: invalid node handle");
  return nodes_[v.id];
}

ValueMatrix& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty() && !n.value().empty()) n.grad = ValueMatrix(n.value().rows(), n.value().cols());
  return n.grad;
}

bool Tape::any_requires(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return node(v).requires_grad; });
}

const ValueMatrix& Tape::value(Var v) const { return node(v).value(); }

double Tape::scalar(Var v) const {
  const ValueMatrix& m = value(v);
  if (m.size() != 1) throw UsageError("Tape::scalar: node is " + shape(m));
  return m.data()[0];
}

const ValueMatrix& Tape::grad(Var v) const {
  static const ValueMatrix kEmpty;
  const Node& n = node(v);
  return n.grad.empty() ? kEmpty : n.grad;
}

// ---------------------------------------------------------------------------
// leaves

Var Tape::constant(ValueMatrix value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(double value) { return constant(ValueMatrix(1, 1, value)); }

Var Tape::input(ValueMatrix value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p, bool requires_grad) {
  Node n;
  n.external = &p.value;
  n.requires_grad = requires_grad;
  if (requires_grad) n.sink = &p;
  return push(std::move(n));
}

Var Tape::parameter(const Parameter& p) {
  Node n;
  n.external = &p.value;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// ops

Var Tape::matmul(Var a, Var b) {
  const ValueMatrix& av = value(a);
  const ValueMatrix& bv = value(b);
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: " + shape(av) + " x " + shape(bv));
  }
  Node n;
  n.owned = ValueMatrix(av.rows(), bv.cols());
  view(n.owned).noalias() = view(av) * view(bv);
  n.requires_grad = any_requires({a, b});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, b, self](Tape& t) {
      const ValueMatrix& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) {
        view(t.grad_buffer(a)).noalias() += view(g) * view(t.value(b)).transpose();
      }
      if (t.requires_grad(b)) {
        view(t.grad_buffer(b)).noalias() += view(t.value(a)).transpose() * view(g);
      }
    };
  }
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const ValueMatrix& av = value(a);
  const ValueMatrix& bv = value(b);
  if (!av.same_shape(bv)) throw DimensionError("add: " + shape(av) + " vs " + shape(bv));
  Node n;
  n.owned = av;
  auto out = n.owned.data();
  auto in = bv.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  n.requires_grad = any_requires({a, b});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, b, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      for (Var v : {a, b}) {
        if (!t.requires_grad(v)) continue;
        auto dst = t.grad_buffer(v).data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    };
  }
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const ValueMatrix& av = value(a);
  const ValueMatrix& bv = value(b);
  if (!av.same_shape(bv)) throw DimensionError("sub: " + shape(av) + " vs " + shape(bv));
  Node n;
  n.owned = av;
  auto out = n.owned.data();
  auto in = bv.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= in[i];
  n.requires_grad = any_requires({a, b});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, b, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      if (t.requires_grad(a)) {
        auto dst = t.grad_buffer(a).data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
      if (t.requires_grad(b)) {
        auto dst = t.grad_buffer(b).data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
      }
    };
  }
  return push(std::move(n));
}

Var Tape::add_row(Var a, Var row) {
  const ValueMatrix& av = value(a);
  const ValueMatrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: " + shape(av) + " + " + shape(rv));
  }
  Node n;
  n.owned = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto out = n.owned.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += rv(0, c);
  }
  n.requires_grad = any_requires({a, row});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, row, self](Tape& t) {
      const ValueMatrix& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) {
        auto dst = t.grad_buffer(a).data();
        auto src = g.data();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
      }
      if (t.requires_grad(row)) {
        ValueMatrix& dr = t.grad_buffer(row);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) dr(0, c) += g(r, c);
        }
      }
    };
  }
  return push(std::move(n));
}

Var Tape::scale(Var a, double k) {
  Node n;
  n.owned = value(a);
  for (double& x : n.owned.data()) x *= k;
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, k, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      auto dst = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += k * g[i];
    };
  }
  return push(std::move(n));
}

Var Tape::add_scalar(Var a, double c) {
  Node n;
  n.owned = value(a);
  for (double& x : n.owned.data()) x += c;
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      auto dst = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    };
  }
  return push(std::move(n));
}

Var Tape::exp(Var a) {
  Node n;
  n.owned = value(a);
  for (double& x : n.owned.data()) x = std::exp(x);
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      const auto y = t.nodes_[self].value().data();
      auto dst = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i];
    };
  }
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  Node n;
  n.owned = value(a);
  for (double& x : n.owned.data()) x = x > 0.0 ? x : 0.0;
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      const auto x = t.value(a).data();
      auto dst = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) dst[i] += g[i];
      }
    };
  }
  return push(std::move(n));
}

Var Tape::gelu(Var a) {
  Node n;
  n.owned = value(a);
  for (double& x : n.owned.data()) x = gelu_value(x);
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, self](Tape& t) {
      const double sign = testing::gelu_backward_sign_flip() ? -1.0 : 1.0;
      const auto g = t.nodes_[self].grad.data();
      const auto x = t.value(a).data();
      auto dst = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += sign * g[i] * gelu_derivative(x[i]);
    };
  }
  return push(std::move(n));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const ValueMatrix& xv = value(x);
  const ValueMatrix& gv = value(gain);
  const ValueMatrix& bv = value(bias);
  const std::size_t cols = xv.cols();
  if (cols < 2) throw DimensionError("layer_norm: needs at least 2 columns, got " + shape(xv));
  if (gv.rows() != 1 || gv.cols() != cols || bv.rows() != 1 || bv.cols() != cols) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(cols));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");

  // Normalized activations and per-row inverse std are kept for the backward pass.
  auto normalized = std::make_shared<ValueMatrix>(xv.rows(), cols);
  auto inv_std = std::make_shared<std::vector<double>>(xv.rows());
  Node n;
  n.owned = ValueMatrix(xv.rows(), cols);
  const double inv_cols = 1.0 / static_cast<double>(cols);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean *= inv_cols;
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var *= inv_cols;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    auto nh = normalized->row(r);
    auto out = n.owned.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      nh[c] = (in[c] - mean) * is;
      out[c] = nh[c] * gv(0, c) + bv(0, c);
    }
  }
  n.requires_grad = any_requires({x, gain, bias});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [x, gain, bias, self, normalized, inv_std](Tape& t) {
      const ValueMatrix& g = t.nodes_[self].grad;
      const ValueMatrix& gv = t.value(gain);
      const std::size_t cols = g.cols();
      const double inv_cols = 1.0 / static_cast<double>(cols);
      if (t.requires_grad(gain) || t.requires_grad(bias)) {
        ValueMatrix* dg = t.requires_grad(gain) ? &t.grad_buffer(gain) : nullptr;
        ValueMatrix* db = t.requires_grad(bias) ? &t.grad_buffer(bias) : nullptr;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            if (dg) (*dg)(0, c) += g(r, c) * (*normalized)(r, c);
            if (db) (*db)(0, c) += g(r, c);
          }
        }
      }
      if (t.requires_grad(x)) {
        ValueMatrix& dx = t.grad_buffer(x);
        std::vector<double> dnh(cols);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double mean_d = 0.0;
          double mean_dn = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            dnh[c] = g(r, c) * gv(0, c);
            mean_d += dnh[c];
            mean_dn += dnh[c] * (*normalized)(r, c);
          }
          mean_d *= inv_cols;
          mean_dn *= inv_cols;
          const double is = (*inv_std)[r];
          for (std::size_t c = 0; c < cols; ++c) {
            dx(r, c) += is * (dnh[c] - mean_d - (*normalized)(r, c) * mean_dn);
          }
        }
      }
    };
  }
  return push(std::move(n));
}

Var Tape::softmax_temp(Var logits, Var t) {
  const ValueMatrix& lv = value(logits);
  const double temp = scalar(t);
  if (!(temp > 0.0)) throw ParameterError("softmax_temp: temperature must be > 0");
  Node n;
  n.owned = ValueMatrix(lv.rows(), lv.cols());
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const auto in = lv.row(r);
    auto out = n.owned.row(r);
    double mx = in[0];
    for (double v : in) mx = std::max(mx, v);
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp((in[c] - mx) / temp);
      total += out[c];
    }
    for (double& v : out) v /= total;
  }
  n.requires_grad = any_requires({logits, t});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [logits, t, self](Tape& tp) {
      const ValueMatrix& g = tp.nodes_[self].grad;
      const ValueMatrix& s = tp.nodes_[self].value();
      const ValueMatrix& lv = tp.value(logits);
      const double temp = tp.scalar(t);
      ValueMatrix* dl = tp.requires_grad(logits) ? &tp.grad_buffer(logits) : nullptr;
      double dtemp = 0.0;
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * s(r, c);
        for (std::size_t c = 0; c < g.cols(); ++c) {
          // dL/du for u = logits / t
          const double du = s(r, c) * (g(r, c) - dot);
          if (dl) (*dl)(r, c) += du / temp;
          dtemp -= du * lv(r, c) / (temp * temp);
        }
      }
      if (tp.requires_grad(t)) tp.grad_buffer(t)(0, 0) += dtemp;
    };
  }
  return push(std::move(n));
}

Var Tape::column(Var a, std::size_t c) {
  const ValueMatrix& av = value(a);
  if (c >= av.cols()) throw DimensionError("column: index out of range for " + shape(av));
  Node n;
  n.owned = ValueMatrix(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) n.owned(r, 0) = av(r, c);
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, c, self](Tape& t) {
      const ValueMatrix& g = t.nodes_[self].grad;
      ValueMatrix& da = t.grad_buffer(a);
      for (std::size_t r = 0; r < g.rows(); ++r) da(r, c) += g(r, 0);
    };
  }
  return push(std::move(n));
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t end) {
  const ValueMatrix& av = value(a);
  if (begin > end || end > av.rows()) throw DimensionError("slice_rows: bad range for " + shape(av));
  Node n;
  n.owned = ValueMatrix(end - begin, av.cols());
  std::copy(av.data().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()),
            av.data().begin() + static_cast<std::ptrdiff_t>(end * av.cols()),
            n.owned.data().begin());
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, begin, self](Tape& t) {
      const auto g = t.nodes_[self].grad.data();
      ValueMatrix& da = t.grad_buffer(a);
      auto dst = da.data().subspan(begin * da.cols(), g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    };
  }
  return push(std::move(n));
}

Var Tape::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  Node n;
  n.owned = ValueMatrix(1, 1, total);
  n.requires_grad = any_requires({a});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [a, self](Tape& t) {
      const double g = t.nodes_[self].grad(0, 0);
      for (double& d : t.grad_buffer(a).data()) d += g;
    };
  }
  return push(std::move(n));
}

Var Tape::mean(Var a) {
  const std::size_t count = value(a).size();
  if (count == 0) throw UsageError("mean: empty node");
  return scale(sum(a), 1.0 / static_cast<double>(count));
}

Var Tape::mean_bce(Var p, std::span<const int> targets) {
  const ValueMatrix& pv = value(p);
  if (pv.cols() != 1 || pv.rows() != targets.size()) {
    throw DimensionError("mean_bce: probabilities " + shape(pv) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw UsageError("mean_bce: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) total += bce(pv(i, 0), targets[i]);
  Node n;
  n.owned = ValueMatrix(1, 1, total / static_cast<double>(targets.size()));
  n.requires_grad = any_requires({p});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    std::vector<int> tg(targets.begin(), targets.end());
    n.backward = [p, self, tg = std::move(tg)](Tape& t) {
      const double g = t.nodes_[self].grad(0, 0) / static_cast<double>(tg.size());
      const ValueMatrix& pv = t.value(p);
      ValueMatrix& dp = t.grad_buffer(p);
      for (std::size_t i = 0; i < tg.size(); ++i) {
        const double q = pv(i, 0);
        // Zero gradient where the clamp is active.
        if (q <= kBceClamp || q >= 1.0 - kBceClamp) continue;
        dp(i, 0) += tg[i] == 1 ? -g / q : g / (1.0 - q);
      }
    };
  }
  return push(std::move(n));
}

Var Tape::weighted_squared_error(Var x_hat, const ValueMatrix& x, std::span<const double> variance) {
  const ValueMatrix& xh = value(x_hat);
  if (!xh.same_shape(x)) {
    throw DimensionError("weighted_squared_error: " + shape(xh) + " vs " + shape(x));
  }
  if (variance.size() != x.cols()) {
    throw DimensionError("weighted_squared_error: variance length does not match columns");
  }
  if (x.empty()) throw UsageError("weighted_squared_error: empty batch");
  std::vector<double> inv(variance.size());
  for (std::size_t j = 0; j < variance.size(); ++j) {
    if (!(variance[j] > 0.0)) throw ParameterError("weighted_squared_error: non-positive variance");
    inv[j] = 1.0 / variance[j];
  }
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double d = xh(r, c) - x(r, c);
      total += d * d * inv[c];
    }
  }
  const double denom = static_cast<double>(x.size());
  Node n;
  n.owned = ValueMatrix(1, 1, total / denom);
  n.requires_grad = any_requires({x_hat});
  if (n.requires_grad) {
    const std::uint32_t self = static_cast<std::uint32_t>(nodes_.size());
    n.backward = [x_hat, x, inv = std::move(inv), denom, self](Tape& t) {
      const double g = t.nodes_[self].grad(0, 0);
      const ValueMatrix& xh = t.value(x_hat);
      ValueMatrix& d = t.grad_buffer(x_hat);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
          d(r, c) += g * 2.0 * (xh(r, c) - x(r, c)) * inv[c] / denom;
        }
      }
    };
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------

void Tape::backward(Var loss) {
  const ValueMatrix& lv = value(loss);
  if (lv.size() != 1) throw UsageError("backward: loss must be scalar, got " + shape(lv));
  if (swept_) throw UsageError("backward: tape already swept");
  swept_ = true;
  if (!node(loss).requires_grad) return;
  grad_buffer(loss)(0, 0) = 1.0;
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this);
    if (n.sink) {
      Parameter& p = *n.sink;
      if (!p.grad.same_shape(p.value)) p.grad = ValueMatrix(p.value.rows(), p.value.cols());
      auto dst = p.grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace mdml
