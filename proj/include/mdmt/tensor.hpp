#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "mdmt/errors.hpp"

namespace mdmt {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major tensor of rank 1 or 2. Rank-1 tensors are stored as a
// single row; a scalar is a rank-1 tensor of length 1. `node` is a handle
// into the tape that produced the value (-1 for constants and parameters
// that are not being watched); `tape_id` disambiguates handles across tape
// instances so stale handles from an earlier step are treated as constants.
template <typename S>
struct Tensor {
  MatrixX<S> values;
  int rank = 2;
  int node = -1;
  uint64_t tape_id = 0;

  Tensor() : values(0, 0) {}

  static Tensor vector(Eigen::Index n) {
    Tensor t;
    t.values = MatrixX<S>::Zero(1, n);
    t.rank = 1;
    return t;
  }

  static Tensor vector(std::initializer_list<S> xs) {
    Tensor t = vector(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (S x : xs) t.values(0, i++) = x;
    return t;
  }

  static Tensor scalar(S x) { return vector({x}); }

  static Tensor matrix(Eigen::Index rows, Eigen::Index cols) {
    Tensor t;
    t.values = MatrixX<S>::Zero(rows, cols);
    t.rank = 2;
    return t;
  }

  static Tensor from_matrix(MatrixX<S> m) {
    Tensor t;
    t.values = std::move(m);
    t.rank = 2;
    return t;
  }

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  Eigen::Index size() const { return values.size(); }

  std::vector<Eigen::Index> shape() const {
    if (rank == 1) return {values.cols()};
    return {values.rows(), values.cols()};
  }

  bool same_shape(const Tensor& o) const {
    return rank == o.rank && rows() == o.rows() && cols() == o.cols();
  }

  bool is_scalar_shape() const { return rank == 1 && values.size() == 1; }

  S item() const {
    if (values.size() != 1) {
      throw ShapeError("item() on tensor with " + std::to_string(values.size()) + " elements");
    }
    return values(0, 0);
  }

  bool all_finite() const { return values.allFinite(); }
};

template <typename S>
std::string shape_str(const Tensor<S>& t) {
  std::string s = "(";
  const auto sh = t.shape();
  for (size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(sh[i]);
  }
  return s + ")";
}

}  // namespace mdmt
