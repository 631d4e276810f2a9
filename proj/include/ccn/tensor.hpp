#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ccn/error.hpp"

namespace ccn {

/// Dense row-major matrix of doubles. Vectors are stored as n x 1 columns,
/// scalars as 1 x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  static Tensor column(std::vector<double> v) {
    Tensor t;
    t.rows = v.size();
    t.cols = 1;
    t.data = std::move(v);
    return t;
  }

  static Tensor column(std::initializer_list<double> v) {
    return column(std::vector<double>(v));
  }

  static Tensor matrix(std::size_t r, std::size_t c,
                       std::initializer_list<double> v) {
    if (v.size() != r * c) throw ShapeError("matrix initializer size mismatch");
    Tensor t(r, c);
    t.data.assign(v.begin(), v.end());
    return t;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double item() const {
    if (rows != 1 || cols != 1) {
      throw ShapeError("item() on non-scalar tensor " + shape_str());
    }
    return data[0];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// out += op(a) * op(b), where op transposes when the matching flag is set.
inline void gemm_acc(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b,
                     Tensor& out) {
  const std::size_t m = trans_a ? a.cols : a.rows;
  const std::size_t k = trans_a ? a.rows : a.cols;
  const std::size_t kb = trans_b ? b.cols : b.rows;
  const std::size_t n = trans_b ? b.rows : b.cols;
  if (k != kb || out.rows != m || out.cols != n) {
    throw ShapeError("gemm shape mismatch " + a.shape_str() + " x " + b.shape_str());
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> A(a.data.data(), a.rows, a.cols);
  Eigen::Map<const Mat> B(b.data.data(), b.rows, b.cols);
  Eigen::Map<Mat> C(out.data.data(), m, n);
  if (!trans_a && !trans_b) C.noalias() += A * B;
  else if (trans_a && !trans_b) C.noalias() += A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

}  // namespace ccn
