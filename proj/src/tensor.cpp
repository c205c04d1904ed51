#include "mecq/tensor.hpp"

#include <sstream>

#include "mecq/errors.hpp"

namespace mecq {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), values(Eigen::ArrayXd::Zero(shape_numel(shape))) {}

Tensor::Tensor(Shape s, Eigen::ArrayXd v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.values = Eigen::ArrayXd::Constant(1, v);
  return t;
}

Tensor Tensor::from(Shape s, std::initializer_list<double> v) {
  Eigen::ArrayXd a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a(i++) = x;
  return Tensor(std::move(s), std::move(a));
}

Tensor Tensor::filled(Shape s, double v) {
  Tensor t(std::move(s));
  t.values.setConstant(v);
  return t;
}

double Tensor::item() const {
  if (values.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
  return values(0);
}

RowMap Tensor::matrix() {
  if (rank() != 2) throw ShapeError("matrix view needs rank 2, got " + shape_str(shape));
  return RowMap(values.data(), shape[0], shape[1]);
}

ConstRowMap Tensor::matrix() const {
  if (rank() != 2) throw ShapeError("matrix view needs rank 2, got " + shape_str(shape));
  return ConstRowMap(values.data(), shape[0], shape[1]);
}

}  // namespace mecq
