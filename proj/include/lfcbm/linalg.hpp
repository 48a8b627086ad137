#pragma once

#include <Eigen/Dense>

#include "lfcbm/tensor.hpp"

namespace lfcbm {

// Training and solver arithmetic runs in float64; tensors on disk are float32.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix to_matrix(const Tensor& t) {
  Matrix m(t.rows, t.cols);
  for (std::size_t r = 0; r < t.rows; ++r)
    for (std::size_t c = 0; c < t.cols; ++c) m(r, c) = t(r, c);
  return m;
}

inline Tensor to_tensor(const Matrix& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t(r, c) = static_cast<float>(m(r, c));
  return t;
}

// Rounds every entry to the nearest float32 so in-memory values match what
// a save/load cycle would produce.
inline Matrix round_to_float(const Matrix& m) { return m.cast<float>().cast<double>(); }
inline Vector round_to_float(const Vector& v) { return v.cast<float>().cast<double>(); }

}  // namespace lfcbm
