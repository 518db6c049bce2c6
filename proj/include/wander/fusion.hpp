#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wander/tensor.hpp"

namespace wander {

// Where the rank sums sit relative to the cross-modal Hadamard product.
//   exact:         sum_r  prod_m (...)   -- identical to the explicit path
//   paper_literal: prod_m sum_r (...)    -- sums inside the product
enum class Ordering { exact, paper_literal };

std::string_view to_string(Ordering o);
Ordering parse_ordering(std::string_view s);

// Default ceiling on entries materialized by the explicit fusion paths.
inline constexpr std::uint64_t kDefaultEntryCeiling = 100'000'000;

// M sequences; sequence m is length(m) x dim(m).
class ModalityBatch {
 public:
  ModalityBatch() = default;
  explicit ModalityBatch(std::vector<Matrix> sequences);

  static ModalityBatch zeros(std::span<const std::size_t> lengths,
                             std::span<const std::size_t> dims);

  std::size_t modalities() const { return sequences_.size(); }
  std::size_t length(std::size_t m) const { return sequences_.at(m).rows(); }
  std::size_t dim(std::size_t m) const { return sequences_.at(m).cols(); }
  Shape lengths() const;
  Shape dims() const;

  const Matrix& operator[](std::size_t m) const { return sequences_.at(m); }
  Matrix& operator[](std::size_t m) { return sequences_.at(m); }
  const std::vector<Matrix>& sequences() const { return sequences_; }

 private:
  std::vector<Matrix> sequences_;
};

struct FusionConfig {
  Shape dims;     // d_1..d_M
  Shape lengths;  // l_1..l_M
  std::size_t d_h = 1;
  std::size_t d_t = 1;
  std::size_t rank_h = 8;
  std::size_t rank_t = 8;
  Ordering ordering = Ordering::exact;

  std::size_t modalities() const { return dims.size(); }
  void validate() const;
};

// Explicit path: contracts prod_m h_m with W_h (shape d_1..d_M, d_h), plus b.
Vector vector_fusion_oracle(std::span<const Vector> h, const DenseTensor& w_h, const Vector& b);

Vector vector_fusion_lowrank(std::span<const Vector> h, const CpFactorSet& f_h, const Vector& b,
                             Ordering ordering = Ordering::exact);

// SF-OP. Materializes H_t (l_1..l_M, d_h) tuple by tuple through explicit
// outer products, then contracts with W_t (d_t, l_1..l_M). Bias-free.
Matrix sequence_fusion_oracle(const ModalityBatch& h, const DenseTensor& w_h,
                              const DenseTensor& w_t,
                              std::uint64_t entry_ceiling = kDefaultEntryCeiling);

// SF-VF. Low-rank vector fusion on every token tuple, dense W_t projection.
Matrix sequence_fusion_vf(const ModalityBatch& h, const CpFactorSet& f_h, const DenseTensor& w_t,
                          Ordering ordering = Ordering::exact,
                          std::uint64_t entry_ceiling = kDefaultEntryCeiling);

// SF. Returns the d_t x d_h fused matrix without forming any cross-modal
// tensor. With threads > 1 the r_t range is split into contiguous blocks
// whose partial sums are added in block order.
Matrix sequence_fusion_lowrank(const ModalityBatch& h, const CpFactorSet& f_h,
                               const CpFactorSet& f_t, Ordering ordering = Ordering::exact,
                               int threads = 1);
Matrix sequence_fusion_lowrank(const ModalityBatch& h, const CpFactorSet& f_h,
                               const CpFactorSet& f_t, const Matrix& bias, Ordering ordering,
                               int threads = 1);

// Token projections h_m * (w_{h,m}^r)^T, indexed [m][r]; each l_m x d_h.
std::vector<std::vector<Matrix>> project_tokens(const ModalityBatch& h, const CpFactorSet& f_h);

}  // namespace wander
