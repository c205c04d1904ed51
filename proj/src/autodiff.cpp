#include "mecq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mecq/errors.hpp"

namespace mecq::ad {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Tensor Gradients::operator[](Var v) const {
  if (v.id() >= shapes_.size()) throw ContractError("gradient lookup for a Var from another tape");
  if (grads_[v.id()].defined()) return grads_[v.id()];
  return Tensor(shapes_[v.id()]);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, "leaf"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string_view op) {
  Node node;
  node.value = std::move(value);
  node.op = std::string(op);
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError(std::string(op) + ": input belongs to another tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.numel() != 1 || lv.rank() != 0)
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(lv.shape));

  std::vector<Tensor> grads(nodes_.size());
  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const Node& n : nodes_) shapes.push_back(n.value.shape);

  grads[loss.id()] = Tensor::scalar(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || !grads[i].defined()) continue;
    std::vector<Tensor> in_grads = node.backward(grads[i]);
    if (in_grads.size() != node.inputs.size())
      throw ContractError(node.op + ": backward returned wrong number of gradients");
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t src = node.inputs[k];
      if (!nodes_[src].requires_grad || !in_grads[k].defined()) continue;
      if (in_grads[k].shape != nodes_[src].value.shape)
        throw ContractError(node.op + ": gradient shape " + shape_str(in_grads[k].shape) +
                            " does not match input shape " + shape_str(nodes_[src].value.shape));
      if (grads[src].defined())
        grads[src].values += in_grads[k].values;
      else
        grads[src] = std::move(in_grads[k]);
    }
  }
  return Gradients(std::move(grads), std::move(shapes));
}

Var CustomOp::operator()(Var x) const {
  Tensor input = x.value();
  Tensor out = forward_(input);
  auto vjp = vjp_;
  const std::string name = name_;
  return x.tape()->record(
      std::move(out), {x},
      [vjp, input = std::move(input), name](const Tensor& g) {
        Tensor gi = vjp(input, g);
        if (gi.shape != input.shape)
          throw ContractError(name + ": custom backward produced shape " + shape_str(gi.shape) +
                              " for input " + shape_str(input.shape));
        return std::vector<Tensor>{std::move(gi)};
      },
      name_);
}

CustomOp custom_gradient(CustomOp::Forward forward, CustomOp::Vjp vjp, std::string name) {
  return CustomOp(std::move(forward), std::move(vjp), std::move(name));
}

namespace {

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("op on an unbound Var");
  return *a.tape();
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul", "operands must be rank 2");
  require(a.shape()[1] == b.shape()[0], "matmul",
          "inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return tape_of(a).record(
      std::move(out), {a, b},
      [a, b](const Tensor& g) {
        Tensor ga(a.shape());
        Tensor gb(b.shape());
        if (a.requires_grad()) ga.matrix().noalias() = g.matrix() * b.value().matrix().transpose();
        if (b.requires_grad()) gb.matrix().noalias() = a.value().matrix().transpose() * g.matrix();
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      },
      "matmul");
}

Var transpose(Var a) {
  require(a.value().rank() == 2, "transpose", "operand must be rank 2");
  Tensor out({a.shape()[1], a.shape()[0]});
  out.matrix() = a.value().matrix().transpose();
  return tape_of(a).record(
      std::move(out), {a},
      [a](const Tensor& g) {
        Tensor ga(a.shape());
        ga.matrix() = g.matrix().transpose();
        return std::vector<Tensor>{std::move(ga)};
      },
      "transpose");
}

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out(a.shape(), a.value().values + b.value().values);
  return tape_of(a).record(
      std::move(out), {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; }, "add");
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out(a.shape(), a.value().values - b.value().values);
  return tape_of(a).record(
      std::move(out), {a, b},
      [](const Tensor& g) { return std::vector<Tensor>{g, Tensor(g.shape, -g.values)}; }, "sub");
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out(a.shape(), a.value().values * b.value().values);
  return tape_of(a).record(
      std::move(out), {a, b},
      [a, b](const Tensor& g) {
        return std::vector<Tensor>{Tensor(g.shape, g.values * b.value().values),
                                   Tensor(g.shape, g.values * a.value().values)};
      },
      "mul");
}

Var scale(Var a, double c) {
  Tensor out(a.shape(), a.value().values * c);
  return tape_of(a).record(
      std::move(out), {a}, [c](const Tensor& g) { return std::vector<Tensor>{Tensor(g.shape, g.values * c)}; },
      "scale");
}

Var add_scalar(Var a, double c) {
  Tensor out(a.shape(), a.value().values + c);
  return tape_of(a).record(
      std::move(out), {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; }, "add_scalar");
}

Var relu(Var a) {
  Tensor out(a.shape(), a.value().values.max(0.0));
  return tape_of(a).record(
      std::move(out), {a},
      [a](const Tensor& g) {
        return std::vector<Tensor>{
            Tensor(g.shape, (a.value().values > 0.0).select(g.values, 0.0))};
      },
      "relu");
}

Var reshape(Var a, Shape shape) {
  require(shape_numel(shape) == a.value().numel(), "reshape",
          "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out(shape, a.value().values);
  return tape_of(a).record(
      std::move(out), {a},
      [a](const Tensor& g) { return std::vector<Tensor>{Tensor(a.shape(), g.values)}; }, "reshape");
}

Var add_bias(Var a, Var bias) {
  require(a.value().rank() == 2 && bias.value().rank() == 1 && bias.shape()[0] == a.shape()[1],
          "add_bias", shape_str(a.shape()) + " + " + shape_str(bias.shape()));
  Tensor out = a.value();
  out.matrix().rowwise() += bias.value().values.matrix().transpose();
  return tape_of(a).record(
      std::move(out), {a, bias},
      [bias](const Tensor& g) {
        Tensor gb(bias.shape());
        gb.values = g.matrix().colwise().sum().transpose().array();
        return std::vector<Tensor>{g, std::move(gb)};
      },
      "add_bias");
}

namespace {

struct ConvGeometry {
  Index n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

// cols is (C*KH*KW, OH*OW) for one sample.
void im2col(const double* x, const ConvGeometry& g, RowMatrix& cols) {
  cols.setZero(g.c * g.kh * g.kw, g.oh * g.ow);
  for (Index ci = 0; ci < g.c; ++ci)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (ci * g.kh + ki) * g.kw + kj;
        for (Index oi = 0; oi < g.oh; ++oi) {
          const Index ii = oi * g.stride - g.pad + ki;
          if (ii < 0 || ii >= g.h) continue;
          for (Index oj = 0; oj < g.ow; ++oj) {
            const Index jj = oj * g.stride - g.pad + kj;
            if (jj < 0 || jj >= g.w) continue;
            cols(row, oi * g.ow + oj) = x[(ci * g.h + ii) * g.w + jj];
          }
        }
      }
}

void col2im(const RowMatrix& cols, const ConvGeometry& g, double* dx) {
  for (Index ci = 0; ci < g.c; ++ci)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (ci * g.kh + ki) * g.kw + kj;
        for (Index oi = 0; oi < g.oh; ++oi) {
          const Index ii = oi * g.stride - g.pad + ki;
          if (ii < 0 || ii >= g.h) continue;
          for (Index oj = 0; oj < g.ow; ++oj) {
            const Index jj = oj * g.stride - g.pad + kj;
            if (jj < 0 || jj >= g.w) continue;
            dx[(ci * g.h + ii) * g.w + jj] += cols(row, oi * g.ow + oj);
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Conv2dParams p) {
  require(x.value().rank() == 4 && w.value().rank() == 4, "conv2d", "expects NCHW input and OIHW weight");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require(xs[1] == ws[1], "conv2d", "channel mismatch " + shape_str(xs) + " vs " + shape_str(ws));
  require(p.stride >= 1 && p.padding >= 0, "conv2d", "invalid stride/padding");
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, p.stride, p.padding};
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, "conv2d", "kernel larger than padded input");
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const ConstRowMap wm(w.value().values.data(), g.o, g.c * g.kh * g.kw);
  Tensor out({g.n, g.o, g.oh, g.ow});
  RowMatrix cols;
  const Index in_stride = g.c * g.h * g.w;
  const Index out_stride = g.o * g.oh * g.ow;
  for (Index s = 0; s < g.n; ++s) {
    im2col(x.value().values.data() + s * in_stride, g, cols);
    RowMap(out.values.data() + s * out_stride, g.o, g.oh * g.ow).noalias() = wm * cols;
  }
  return tape_of(x).record(
      std::move(out), {x, w},
      [x, w, g, in_stride, out_stride](const Tensor& grad) {
        Tensor gx(x.shape());
        Tensor gw(w.shape());
        const ConstRowMap wm(w.value().values.data(), g.o, g.c * g.kh * g.kw);
        RowMap gwm(gw.values.data(), g.o, g.c * g.kh * g.kw);
        RowMatrix cols;
        RowMatrix dcols;
        for (Index s = 0; s < g.n; ++s) {
          const ConstRowMap go(grad.values.data() + s * out_stride, g.o, g.oh * g.ow);
          if (w.requires_grad()) {
            im2col(x.value().values.data() + s * in_stride, g, cols);
            gwm.noalias() += go * cols.transpose();
          }
          if (x.requires_grad()) {
            dcols.noalias() = wm.transpose() * go;
            col2im(dcols, g, gx.values.data() + s * in_stride);
          }
        }
        return std::vector<Tensor>{std::move(gx), std::move(gw)};
      },
      "conv2d");
}

Var channel_affine(Var x, Var gamma, Var beta) {
  require(x.value().rank() == 4, "channel_affine", "expects NCHW input");
  const Index n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "channel_affine",
          "gamma/beta must have shape [" + std::to_string(c) + "]");
  Tensor out(x.shape());
  for (Index s = 0; s < n; ++s)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (s * c + ch) * hw;
      out.values.segment(off, hw) = x.value().values.segment(off, hw) * gamma.value()[ch] + beta.value()[ch];
    }
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [x, gamma, n, c, hw](const Tensor& g) {
        Tensor gx(x.shape()), gg({c}), gb({c});
        for (Index s = 0; s < n; ++s)
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (s * c + ch) * hw;
            const auto seg = g.values.segment(off, hw);
            gx.values.segment(off, hw) = seg * gamma.value()[ch];
            gg[ch] += (seg * x.value().values.segment(off, hw)).sum();
            gb[ch] += seg.sum();
          }
        return std::vector<Tensor>{std::move(gx), std::move(gg), std::move(gb)};
      },
      "channel_affine");
}

Var global_avg_pool(Var x) {
  require(x.value().rank() == 4, "global_avg_pool", "expects NCHW input");
  const Index n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor out({n, c});
  for (Index i = 0; i < n * c; ++i) out[i] = x.value().values.segment(i * hw, hw).mean();
  return tape_of(x).record(
      std::move(out), {x},
      [x, n, c, hw](const Tensor& g) {
        Tensor gx(x.shape());
        for (Index i = 0; i < n * c; ++i) gx.values.segment(i * hw, hw).setConstant(g[i] / double(hw));
        return std::vector<Tensor>{std::move(gx)};
      },
      "global_avg_pool");
}

Var log_softmax(Var a) {
  require(a.value().rank() == 2, "log_softmax", "expects (rows, classes)");
  Tensor out = a.value();
  RowMap m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
    m.row(r).array() -= lse;
  }
  Tensor saved = out;
  return tape_of(a).record(
      std::move(out), {a},
      [saved](const Tensor& g) {
        Tensor ga(g.shape);
        const ConstRowMap lp = saved.matrix();
        const ConstRowMap gm = g.matrix();
        RowMap out = ga.matrix();
        for (Index r = 0; r < lp.rows(); ++r)
          out.row(r) = gm.row(r) - lp.row(r).array().exp().matrix() * gm.row(r).sum();
        return std::vector<Tensor>{std::move(ga)};
      },
      "log_softmax");
}

Var softmax(Var a) {
  const bool vec = a.value().rank() == 1;
  require(vec || a.value().rank() == 2, "softmax", "expects a vector or (rows, classes)");
  Tensor out = a.value();
  const Index rows = vec ? 1 : out.shape[0];
  const Index cols = vec ? out.shape[0] : out.shape[1];
  RowMap m(out.values.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r).array() = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  Tensor saved = out;
  return tape_of(a).record(
      std::move(out), {a},
      [saved, rows, cols](const Tensor& g) {
        Tensor ga(g.shape);
        const ConstRowMap p(saved.values.data(), rows, cols);
        const ConstRowMap gm(g.values.data(), rows, cols);
        RowMap o(ga.values.data(), rows, cols);
        for (Index r = 0; r < rows; ++r) {
          const double dot = p.row(r).dot(gm.row(r));
          o.row(r) = (p.row(r).array() * (gm.row(r).array() - dot)).matrix();
        }
        return std::vector<Tensor>{std::move(ga)};
      },
      "softmax");
}

Var reduce_sum(Var a) {
  Tensor out = Tensor::scalar(a.value().values.sum());
  return tape_of(a).record(
      std::move(out), {a},
      [a](const Tensor& g) { return std::vector<Tensor>{Tensor::filled(a.shape(), g.item())}; },
      "reduce_sum");
}

Var reduce_mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  require(n > 0, "reduce_mean", "empty tensor");
  Tensor out = Tensor::scalar(a.value().values.sum() / n);
  return tape_of(a).record(
      std::move(out), {a},
      [a, n](const Tensor& g) { return std::vector<Tensor>{Tensor::filled(a.shape(), g.item() / n)}; },
      "reduce_mean");
}

Var stack(const std::vector<Var>& scalars) {
  require(!scalars.empty(), "stack", "no inputs");
  Tensor out({static_cast<Index>(scalars.size())});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i].value().numel() == 1, "stack", "inputs must be scalars");
    out[static_cast<Index>(i)] = scalars[i].item();
  }
  std::vector<Shape> shapes;
  for (const Var& s : scalars) shapes.push_back(s.shape());
  return tape_of(scalars.front()).record(
      std::move(out), scalars,
      [shapes](const Tensor& g) {
        std::vector<Tensor> gs;
        for (std::size_t i = 0; i < shapes.size(); ++i)
          gs.push_back(Tensor::filled(shapes[i], g[static_cast<Index>(i)]));
        return gs;
      },
      "stack");
}

Var normalize_columns(Var z) {
  require(z.value().rank() == 2, "normalize_columns", "expects a matrix");
  const ConstRowMap zm = z.value().matrix();
  Eigen::ArrayXd norms = zm.colwise().norm().transpose().array();
  Tensor out(z.shape());
  RowMap om = out.matrix();
  for (Index j = 0; j < zm.cols(); ++j)
    om.col(j) = norms(j) > 0.0 ? Eigen::VectorXd(zm.col(j) / norms(j)) : Eigen::VectorXd(zm.col(j));
  Tensor normalized = out;
  return tape_of(z).record(
      std::move(out), {z},
      [normalized, norms](const Tensor& g) {
        Tensor gz(g.shape);
        const ConstRowMap u = normalized.matrix();
        const ConstRowMap gm = g.matrix();
        RowMap o = gz.matrix();
        for (Index j = 0; j < u.cols(); ++j) {
          if (norms(j) > 0.0)
            o.col(j) = (gm.col(j) - u.col(j) * u.col(j).dot(gm.col(j))) / norms(j);
          else
            o.col(j) = gm.col(j);
        }
        return std::vector<Tensor>{std::move(gz)};
      },
      "normalize_columns");
}

Var trace_poly(Var x, double shift, const std::vector<double>& coeffs) {
  require(x.value().rank() == 2 && x.shape()[0] == x.shape()[1], "trace_poly", "expects a square matrix");
  const Index n = x.shape()[0];
  const Eigen::MatrixXd d = x.value().matrix() - shift * Eigen::MatrixXd::Identity(n, n);
  // powers[j] = D^j for j < order; Tr(D^j) = sum(D^(j-1) .* D^T).
  const std::size_t order = coeffs.empty() ? 0 : coeffs.size() - 1;
  std::vector<Eigen::MatrixXd> powers;
  powers.reserve(order);
  powers.push_back(Eigen::MatrixXd::Identity(n, n));
  for (std::size_t j = 1; j < order; ++j) powers.push_back(powers.back() * d);
  double value = 0.0;
  for (std::size_t j = 1; j <= order; ++j) {
    if (coeffs[j] == 0.0) continue;
    value += coeffs[j] * (powers[j - 1].array() * d.transpose().array()).sum();
  }
  return tape_of(x).record(
      Tensor::scalar(value), {x},
      [powers = std::move(powers), coeffs, order, n](const Tensor& g) {
        Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, n);
        for (std::size_t j = 1; j <= order; ++j)
          if (coeffs[j] != 0.0) grad += coeffs[j] * double(j) * powers[j - 1].transpose();
        Tensor gx({n, n});
        gx.matrix() = g.item() * grad;
        return std::vector<Tensor>{std::move(gx)};
      },
      "trace_poly");
}

}  // namespace mecq::ad
