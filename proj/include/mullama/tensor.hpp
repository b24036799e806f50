// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense containers used across the pipeline. Everything is double
// precision and row-major; the models here are desk-scale so clarity wins
// over BLAS.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace mullama {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// y = W x + b   (W: out x in)
Vector affine(const Matrix& w, std::span<const double> x, std::span<const double> b);
// y = W x
Vector matvec(const Matrix& w, std::span<const double> x);
// y = W^T g
Vector matvec_t(const Matrix& w, std::span<const double> g);
// W += g x^T
void add_outer(Matrix& w, std::span<const double> g, std::span<const double> x);

// Row-batched variants: X is (n x in), returns (n x out) = X W^T.
Matrix matmul_nt(const Matrix& x, const Matrix& w);
// (n x out) G, (n x in) X -> W grad (out x in) += G^T X
void add_matmul_tn(Matrix& acc, const Matrix& g, const Matrix& x);
// (n x out) G times W (out x in) -> (n x in)
Matrix matmul(const Matrix& g, const Matrix& w);

double dot(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> v);

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

}  // namespace mullama
