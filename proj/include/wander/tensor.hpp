#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace wander {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

std::size_t shape_size(std::span<const std::size_t> shape);

// N-dimensional real tensor, row-major (last index fastest).
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(Shape shape);
  DenseTensor(Shape shape, std::vector<double> data);

  static DenseTensor from_matrix(const Matrix& m);

  const Shape& shape() const { return shape_; }
  std::size_t order() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t mode) const { return shape_.at(mode); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  double& at(std::span<const std::size_t> index);
  double at(std::span<const std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index) {
    return at(std::span<const std::size_t>(index.begin(), index.size()));
  }
  double at(std::initializer_list<std::size_t> index) const {
    return at(std::span<const std::size_t>(index.begin(), index.size()));
  }

  std::size_t flat_index(std::span<const std::size_t> index) const;

  // Order-2 tensors only.
  Matrix to_matrix() const;

  bool operator==(const DenseTensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Per-modality stacks of rank-indexed factor matrices. factor(m, r) is
// out_dim x dims[m]. Reconstructs an (M+1)-order tensor whose last mode is
// the output mode.
class CpFactorSet {
 public:
  CpFactorSet() = default;
  CpFactorSet(std::size_t rank, std::size_t out_dim, Shape dims);
  CpFactorSet(std::size_t rank, std::size_t out_dim, Shape dims,
              std::vector<std::vector<Matrix>> factors);

  // i.i.d. uniform in [lo, hi].
  static CpFactorSet uniform(std::size_t rank, std::size_t out_dim, Shape dims,
                             std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0);

  std::size_t rank() const { return rank_; }
  std::size_t out_dim() const { return out_dim_; }
  std::size_t modalities() const { return dims_.size(); }
  const Shape& dims() const { return dims_; }

  Matrix& factor(std::size_t m, std::size_t r) { return factors_[m][r]; }
  const Matrix& factor(std::size_t m, std::size_t r) const {
    return factors_[m][r];
  }

  // Sum of all factors of modality m over the rank index.
  Matrix rank_sum(std::size_t m) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void scale(double alpha);

 private:
  void validate() const;

  std::size_t rank_ = 0;
  std::size_t out_dim_ = 0;
  Shape dims_;
  std::vector<std::vector<Matrix>> factors_;
};

Matrix uniform_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                      double lo = -1.0, double hi = 1.0);

// entry[i_1..i_M] = prod_m vectors[m][i_m]
DenseTensor outer_product(std::span<const Vector> vectors);

// T[i_1..i_M, k] = sum_r prod_m factor(m, r)(k, i_m)
DenseTensor cp_reconstruct(const CpFactorSet& f);

// Cyclically moves the last mode to the front: (a_1..a_N, k) -> (k, a_1..a_N).
// Turns a reconstructed temporal weight (l_1..l_M, d_t) into W_t layout.
DenseTensor output_mode_first(const DenseTensor& t);

Matrix hadamard(std::span<const Matrix> matrices);

// Contracts the trailing `arity` modes of t against the leading `arity`
// modes of w. Result shape is t.shape[:-arity] ++ w.shape[arity:]; a
// full contraction yields an order-1 tensor of extent 1.
DenseTensor contract_last_modes(const DenseTensor& t, const DenseTensor& w,
                                std::size_t arity);

double max_abs(const Matrix& m);
// max|a - b| / max|b|; zero when both are zero.
double max_relative_error(const Matrix& a, const Matrix& b);

}  // namespace wander
