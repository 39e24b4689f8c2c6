#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "headrank/errors.hpp"

namespace headrank {

// Dense row-major matrix of doubles. Vectors are 1 x n.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows_, cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }
  static Matrix row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }
  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double v) {
    for (double& x : data_) x = v;
  }
  bool all_finite() const noexcept {
    for (double x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }
  std::string shape() const { return shape_string(rows_, cols_); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace kernels {

// Wider vector units are picked at load time where available. FMA is left out
// on purpose: every entry is still a separate multiply then add in the same
// order, so results do not depend on which clone runs.
#if defined(HEADRANK_KERNEL)
#elif defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define HEADRANK_KERNEL __attribute__((target_clones("avx2", "default")))
#else
#define HEADRANK_KERNEL
#endif

// out += a * b
HEADRANK_KERNEL inline void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.row(i).data();
    const double* ar = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out += a * b^T. Each entry accumulates over the shared index in ascending
// order, the same order as a row-by-column dot product.
HEADRANK_KERNEL inline void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* br = b.row(j).data();
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = br[p];
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.row(i).data();
    double* o = out.row(i).data();
    // Sum into a zeroed row first so the result does not depend on `out`.
    double acc[64];
    for (std::size_t j0 = 0; j0 < n; j0 += 64) {
      const std::size_t w = std::min<std::size_t>(64, n - j0);
      std::fill(acc, acc + w, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ar[p];
        const double* btr = bt.data() + p * n + j0;
        for (std::size_t j = 0; j < w; ++j) acc[j] += av * btr[j];
      }
      for (std::size_t j = 0; j < w; ++j) o[j0 + j] += acc[j];
    }
  }
}

// out += a^T * b
HEADRANK_KERNEL inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < m; ++p) {
    const double* ar = a.row(p).data();
    const double* br = b.row(p).data();
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace kernels
}  // namespace headrank
