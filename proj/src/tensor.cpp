// SPDX-License-Identifier: Apache-2.0
#include "mullama/tensor.hpp"

#include "mullama/errors.hpp"

namespace mullama {

Vector affine(const Matrix& w, std::span<const double> x, std::span<const double> b) {
  if (x.size() != w.cols() || b.size() != w.rows()) {
    throw ConfigError("affine: shape mismatch");
  }
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += wr[c] * x[c];
    y[r] = acc + b[r];
  }
  return y;
}

Vector matvec(const Matrix& w, std::span<const double> x) {
  if (x.size() != w.cols()) throw ConfigError("matvec: shape mismatch");
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
  return y;
}

Vector matvec_t(const Matrix& w, std::span<const double> g) {
  if (g.size() != w.rows()) throw ConfigError("matvec_t: shape mismatch");
  Vector y(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    const double gr = g[r];
    for (std::size_t c = 0; c < y.size(); ++c) y[c] += wr[c] * gr;
  }
  return y;
}

void add_outer(Matrix& w, std::span<const double> g, std::span<const double> x) {
  if (g.size() != w.rows() || x.size() != w.cols()) {
    throw ConfigError("add_outer: shape mismatch");
  }
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto wr = w.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) wr[c] += g[r] * x[c];
  }
}

Matrix matmul_nt(const Matrix& x, const Matrix& w) {
  if (x.cols() != w.cols()) throw ConfigError("matmul_nt: shape mismatch");
  Matrix y(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xi = x.row(i);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const auto wr = w.row(r);
      double acc = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) acc += wr[c] * xi[c];
      y(i, r) = acc;
    }
  }
  return y;
}

void add_matmul_tn(Matrix& acc, const Matrix& g, const Matrix& x) {
  if (g.rows() != x.rows() || acc.rows() != g.cols() || acc.cols() != x.cols()) {
    throw ConfigError("add_matmul_tn: shape mismatch");
  }
  for (std::size_t i = 0; i < g.rows(); ++i) add_outer(acc, g.row(i), x.row(i));
}

Matrix matmul(const Matrix& g, const Matrix& w) {
  if (g.cols() != w.rows()) throw ConfigError("matmul: shape mismatch");
  Matrix y(g.rows(), w.cols());
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto yi = y.row(i);
    const auto gi = g.row(i);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const auto wr = w.row(r);
      const double gr = gi[r];
      for (std::size_t c = 0; c < yi.size(); ++c) yi[c] += gr * wr[c];
    }
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace mullama
