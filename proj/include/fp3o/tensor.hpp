#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fp3o {

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;

// Dense row-major matrix of doubles. Rank-2 everywhere; vectors are {1, n}
// or {n, 1}.
struct Tensor {
  std::int64_t n_rows = 0;
  std::int64_t n_cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::int64_t r, std::int64_t c) : n_rows(r), n_cols(c), data(r * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Tensor: negative dims");
  }

  static Tensor zeros(std::int64_t r, std::int64_t c) { return Tensor(r, c); }

  static Tensor of(std::int64_t r, std::int64_t c,
                   std::initializer_list<double> values) {
    Tensor t(r, c);
    if (static_cast<std::int64_t>(values.size()) != r * c)
      throw std::invalid_argument("Tensor::of: size mismatch");
    std::copy(values.begin(), values.end(), t.data.begin());
    return t;
  }

  std::int64_t size() const { return n_rows * n_cols; }
  std::int64_t rows() const { return n_rows; }
  std::int64_t cols() const { return n_cols; }

  double& at(std::int64_t r, std::int64_t c) { return data[r * n_cols + c]; }
  double at(std::int64_t r, std::int64_t c) const { return data[r * n_cols + c]; }

  double& operator[](std::int64_t i) { return data[i]; }
  double operator[](std::int64_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const {
    return n_rows == o.n_rows && n_cols == o.n_cols;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  MatMap map() { return MatMap(data.data(), n_rows, n_cols); }
  ConstMatMap map() const { return ConstMatMap(data.data(), n_rows, n_cols); }

  std::string shape_str() const {
    return "{" + std::to_string(n_rows) + "," + std::to_string(n_cols) + "}";
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* where) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
}

inline double row_log_sum_exp(const Tensor& z, std::int64_t row) {
  double m = z.at(row, 0);
  for (std::int64_t j = 1; j < z.cols(); ++j) m = std::max(m, z.at(row, j));
  double s = 0.0;
  for (std::int64_t j = 0; j < z.cols(); ++j) s += std::exp(z.at(row, j) - m);
  return m + std::log(s);
}

}  // namespace fp3o
