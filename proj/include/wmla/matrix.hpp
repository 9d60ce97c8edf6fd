#pragma once

#include <cstdint>
#include <vector>

#include "wmla/errors.hpp"

namespace wmla {

// Dense row-major matrix of doubles. Row vectors (1 x n) double as biases.
// Zero-sized dimensions are legal; they show up as empty preserved/compressed
// blocks in the MLA weight layout.
class Matrix {
public:
  Matrix() = default;
  Matrix(int64_t rows, int64_t cols)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), 0.0) {
    if (rows < 0 || cols < 0) throw ArgumentError("Matrix: negative dimension");
  }

  static Matrix zeros(int64_t rows, int64_t cols) { return Matrix(rows, cols); }
  static Matrix identity(int64_t n) {
    Matrix m(n, n);
    for (int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t size() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }

  double* row(int64_t r) { return data_.data() + r * cols_; }
  const double* row(int64_t r) const { return data_.data() + r * cols_; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void append_rows(const Matrix& extra) {
    if (extra.rows_ == 0) {
      if (extra.cols_ != 0 && cols_ != 0 && extra.cols_ != cols_)
        throw ArgumentError("append_rows: column mismatch");
      return;
    }
    if (rows_ == 0 && cols_ == 0) cols_ = extra.cols_;
    if (extra.cols_ != cols_) throw ArgumentError("append_rows: column mismatch");
    data_.insert(data_.end(), extra.data_.begin(), extra.data_.end());
    rows_ += extra.rows_;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
  int64_t rows_ = 0;
  int64_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace wmla
