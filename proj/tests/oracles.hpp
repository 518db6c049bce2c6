#pragma once

// Brute-force reference computations. These index raw storage directly and
// never call into the library kernels they are used to check.

#include <cstddef>
#include <random>
#include <vector>

#include "wander/fusion.hpp"
#include "wander/tensor.hpp"

namespace wander::oracle {

// Decodes a row-major flat index into a multi-index.
inline std::vector<std::size_t> unflatten(std::size_t flat, const std::vector<std::size_t>& extents) {
  std::vector<std::size_t> idx(extents.size());
  for (std::size_t k = extents.size(); k-- > 0;) {
    idx[k] = flat % extents[k];
    flat /= extents[k];
  }
  return idx;
}

inline std::size_t count(const std::vector<std::size_t>& extents) {
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

// T[i_1..i_M, k] by summing rank-one terms entry by entry.
inline std::vector<double> cp_entries(const CpFactorSet& f) {
  const auto& dims = f.dims();
  const std::size_t slice = count(dims);
  std::vector<double> out(slice * f.out_dim(), 0.0);
  for (std::size_t p = 0; p < slice; ++p) {
    const auto idx = unflatten(p, dims);
    for (std::size_t k = 0; k < f.out_dim(); ++k) {
      double s = 0.0;
      for (std::size_t r = 0; r < f.rank(); ++r) {
        double prod = 1.0;
        for (std::size_t m = 0; m < dims.size(); ++m) prod *= f.factor(m, r)(k, idx[m]);
        s += prod;
      }
      out[p * f.out_dim() + k] = s;
    }
  }
  return out;
}

// out[t, k] = sum_{i tuple} sum_{j tuple} W_t[i, t] W_h[j, k] prod_m h_m[i_m, j_m]
// Both weights in cp_entries layout (output index last).
inline Matrix sequence_fusion(const ModalityBatch& h, const std::vector<double>& w_h,
                              const std::vector<double>& w_t, std::size_t d_h, std::size_t d_t) {
  const std::size_t modes = h.modalities();
  std::vector<std::size_t> lengths, dims;
  for (std::size_t m = 0; m < modes; ++m) {
    lengths.push_back(h[m].rows());
    dims.push_back(h[m].cols());
  }
  const std::size_t n_tok = count(lengths);
  const std::size_t n_feat = count(dims);
  Matrix out = Matrix::Zero(d_t, d_h);
  for (std::size_t ti = 0; ti < n_tok; ++ti) {
    const auto i = unflatten(ti, lengths);
    for (std::size_t fj = 0; fj < n_feat; ++fj) {
      const auto j = unflatten(fj, dims);
      double prod = 1.0;
      for (std::size_t m = 0; m < modes; ++m) prod *= h[m](i[m], j[m]);
      if (prod == 0.0) continue;
      for (std::size_t t = 0; t < d_t; ++t) {
        const double wt = w_t[ti * d_t + t];
        for (std::size_t k = 0; k < d_h; ++k) out(t, k) += wt * w_h[fj * d_h + k] * prod;
      }
    }
  }
  return out;
}

inline ModalityBatch random_batch(const std::vector<std::size_t>& lengths,
                                  const std::vector<std::size_t>& dims, std::mt19937_64& rng) {
  std::vector<Matrix> seqs;
  for (std::size_t m = 0; m < dims.size(); ++m) seqs.push_back(uniform_matrix(lengths[m], dims[m], rng));
  return ModalityBatch(std::move(seqs));
}

}  // namespace wander::oracle
