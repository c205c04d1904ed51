#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <string>
#include <vector>

namespace mecq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major n-d array of doubles. Rank-0 tensors are scalars.
struct Tensor {
  Shape shape;
  Eigen::ArrayXd values;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, Eigen::ArrayXd v);

  static Tensor scalar(double v);
  static Tensor from(Shape s, std::initializer_list<double> v);
  static Tensor filled(Shape s, double v);

  Index numel() const { return values.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(std::size_t i) const { return shape.at(i); }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool defined() const { return !shape.empty() || values.size() > 0; }

  double item() const;
  double& operator[](Index i) { return values(i); }
  double operator[](Index i) const { return values(i); }

  // Views of a rank-2 tensor as a row-major matrix.
  RowMap matrix();
  ConstRowMap matrix() const;
};

}  // namespace mecq
