#include "wander/fusion.hpp"

#include <algorithm>
#include <string>
#include <thread>

#include "wander/errors.hpp"

namespace wander {

namespace {

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw InvalidArgument(std::string(what) + " contains non-finite values");
}

std::uint64_t checked_product(std::span<const std::size_t> extents, std::uint64_t extra = 1) {
  unsigned __int128 n = extra;
  for (auto e : extents) {
    n *= e;
    if (n > UINT64_MAX) return UINT64_MAX;
  }
  return static_cast<std::uint64_t>(n);
}

void check_ceiling(const char* what, std::uint64_t requested, std::uint64_t ceiling) {
  if (requested > ceiling) throw ResourceLimit(what, requested, ceiling);
}

void require_factor_dims(const CpFactorSet& f, const Shape& dims, const char* what) {
  if (f.dims() != dims) {
    throw InvalidArgument(std::string(what) + " factor dims do not match the inputs");
  }
}

// Odometer over the index space of `extents`, last index fastest.
bool next_index(std::vector<std::size_t>& idx, std::span<const std::size_t> extents) {
  for (std::size_t k = idx.size(); k-- > 0;) {
    if (++idx[k] < extents[k]) return true;
    idx[k] = 0;
  }
  return false;
}

void check_w_t(const DenseTensor& w_t, const Shape& lengths) {
  if (w_t.order() != lengths.size() + 1 ||
      !std::equal(lengths.begin(), lengths.end(), w_t.shape().begin() + 1)) {
    throw InvalidArgument("W_t must have shape (d_t, l_1..l_M)");
  }
}

}  // namespace

std::string_view to_string(Ordering o) {
  return o == Ordering::exact ? "exact" : "paper-literal";
}

Ordering parse_ordering(std::string_view s) {
  if (s == "exact") return Ordering::exact;
  if (s == "paper-literal") return Ordering::paper_literal;
  throw InvalidArgument("unknown ordering \"" + std::string(s) + "\"");
}

ModalityBatch::ModalityBatch(std::vector<Matrix> sequences) : sequences_(std::move(sequences)) {
  if (sequences_.empty()) throw InvalidArgument("ModalityBatch needs at least one modality");
  for (const auto& s : sequences_) {
    if (s.rows() == 0 || s.cols() == 0) {
      throw InvalidArgument("modality sequences must be non-empty");
    }
    check_finite(s, "modality sequence");
  }
}

ModalityBatch ModalityBatch::zeros(std::span<const std::size_t> lengths,
                                   std::span<const std::size_t> dims) {
  if (lengths.size() != dims.size()) throw InvalidArgument("lengths/dims count mismatch");
  std::vector<Matrix> seqs;
  for (std::size_t m = 0; m < dims.size(); ++m) seqs.push_back(Matrix::Zero(lengths[m], dims[m]));
  return ModalityBatch(std::move(seqs));
}

Shape ModalityBatch::lengths() const {
  Shape s;
  for (const auto& m : sequences_) s.push_back(m.rows());
  return s;
}

Shape ModalityBatch::dims() const {
  Shape s;
  for (const auto& m : sequences_) s.push_back(m.cols());
  return s;
}

void FusionConfig::validate() const {
  if (dims.empty()) throw InvalidArgument("fusion config needs at least one modality");
  if (dims.size() != lengths.size()) throw InvalidArgument("dims and lengths differ in count");
  for (auto d : dims)
    if (d == 0) throw InvalidArgument("modality dims must be >= 1");
  for (auto l : lengths)
    if (l == 0) throw InvalidArgument("sequence lengths must be >= 1");
  if (d_h == 0 || d_t == 0) throw InvalidArgument("d_h and d_t must be >= 1");
  if (rank_h == 0 || rank_t == 0) throw InvalidArgument("ranks must be >= 1");
}

Vector vector_fusion_oracle(std::span<const Vector> h, const DenseTensor& w_h, const Vector& b) {
  if (h.empty()) throw InvalidArgument("vector fusion needs at least one modality");
  if (w_h.order() != h.size() + 1) throw InvalidArgument("W_h order must be M+1");
  for (std::size_t m = 0; m < h.size(); ++m) {
    if (static_cast<std::size_t>(h[m].size()) != w_h.extent(m)) {
      throw InvalidArgument("modality " + std::to_string(m) + " dim does not match W_h");
    }
  }
  const std::size_t d_h = w_h.extent(h.size());
  if (static_cast<std::size_t>(b.size()) != d_h) throw InvalidArgument("bias length must be d_h");

  const DenseTensor fused = outer_product(h);
  const DenseTensor projected = contract_last_modes(fused, w_h, h.size());
  Vector out(d_h);
  for (std::size_t k = 0; k < d_h; ++k) out[k] = projected[k] + b[k];
  return out;
}

Vector vector_fusion_lowrank(std::span<const Vector> h, const CpFactorSet& f_h, const Vector& b,
                             Ordering ordering) {
  if (h.size() != f_h.modalities()) throw InvalidArgument("modality count mismatch");
  for (std::size_t m = 0; m < h.size(); ++m) {
    if (static_cast<std::size_t>(h[m].size()) != f_h.dims()[m]) {
      throw InvalidArgument("modality " + std::to_string(m) + " dim does not match factors");
    }
  }
  if (static_cast<std::size_t>(b.size()) != f_h.out_dim()) {
    throw InvalidArgument("bias length must be d_h");
  }
  const std::size_t modes = h.size();
  Vector acc = Vector::Zero(f_h.out_dim());

  if (ordering == Ordering::exact) {
    for (std::size_t r = 0; r < f_h.rank(); ++r) {
      Vector term = f_h.factor(0, r) * h[0];
      for (std::size_t m = 1; m < modes; ++m) {
        const Vector p = f_h.factor(m, r) * h[m];
        term.array() *= p.array();
      }
      acc += term;
    }
  } else {
    for (std::size_t m = 0; m < modes; ++m) {
      Vector s = Vector::Zero(f_h.out_dim());
      for (std::size_t r = 0; r < f_h.rank(); ++r) {
        const Vector p = f_h.factor(m, r) * h[m];
        s += p;
      }
      if (m == 0) {
        acc = s;
      } else {
        acc.array() *= s.array();
      }
    }
  }
  return acc + b;
}

Matrix sequence_fusion_oracle(const ModalityBatch& h, const DenseTensor& w_h,
                              const DenseTensor& w_t, std::uint64_t entry_ceiling) {
  const std::size_t modes = h.modalities();
  const Shape lengths = h.lengths();
  const Shape dims = h.dims();
  if (w_h.order() != modes + 1 || !std::equal(dims.begin(), dims.end(), w_h.shape().begin())) {
    throw InvalidArgument("W_h must have shape (d_1..d_M, d_h)");
  }
  check_w_t(w_t, lengths);
  const std::size_t d_h = w_h.extent(modes);

  check_ceiling("SF-OP cross-modal token tensor", checked_product(dims), entry_ceiling);
  check_ceiling("SF-OP fused sequence tensor H_t", checked_product(lengths, d_h), entry_ceiling);

  Shape ht_shape = lengths;
  ht_shape.push_back(d_h);
  DenseTensor h_t(ht_shape);

  std::vector<std::size_t> idx(modes, 0);
  std::vector<Vector> tokens(modes);
  std::size_t tuple = 0;
  do {
    for (std::size_t m = 0; m < modes; ++m) tokens[m] = h[m].row(idx[m]).transpose();
    const DenseTensor fused = outer_product(tokens);
    const DenseTensor v = contract_last_modes(fused, w_h, modes);
    for (std::size_t k = 0; k < d_h; ++k) h_t[tuple * d_h + k] = v[k];
    ++tuple;
  } while (next_index(idx, lengths));

  return contract_last_modes(w_t, h_t, modes).to_matrix();
}

Matrix sequence_fusion_vf(const ModalityBatch& h, const CpFactorSet& f_h, const DenseTensor& w_t,
                          Ordering ordering, std::uint64_t entry_ceiling) {
  const std::size_t modes = h.modalities();
  const Shape lengths = h.lengths();
  require_factor_dims(f_h, h.dims(), "f_h");
  check_w_t(w_t, lengths);
  const std::size_t d_h = f_h.out_dim();
  check_ceiling("SF-VF fused sequence tensor H_t", checked_product(lengths, d_h), entry_ceiling);

  Shape ht_shape = lengths;
  ht_shape.push_back(d_h);
  DenseTensor h_t(ht_shape);

  const Vector zero_bias = Vector::Zero(d_h);
  std::vector<std::size_t> idx(modes, 0);
  std::vector<Vector> tokens(modes);
  std::size_t tuple = 0;
  do {
    for (std::size_t m = 0; m < modes; ++m) tokens[m] = h[m].row(idx[m]).transpose();
    const Vector v = vector_fusion_lowrank(tokens, f_h, zero_bias, ordering);
    for (std::size_t k = 0; k < d_h; ++k) h_t[tuple * d_h + k] = v[k];
    ++tuple;
  } while (next_index(idx, lengths));

  return contract_last_modes(w_t, h_t, modes).to_matrix();
}

std::vector<std::vector<Matrix>> project_tokens(const ModalityBatch& h, const CpFactorSet& f_h) {
  std::vector<std::vector<Matrix>> out(h.modalities());
  for (std::size_t m = 0; m < h.modalities(); ++m) {
    out[m].reserve(f_h.rank());
    for (std::size_t r = 0; r < f_h.rank(); ++r) {
      out[m].push_back(h[m] * f_h.factor(m, r).transpose());
    }
  }
  return out;
}

namespace {

// Partial exact-ordering sum over r_t in [begin, end).
Matrix lowrank_exact_block(const std::vector<std::vector<Matrix>>& proj, const CpFactorSet& f_t,
                           std::size_t rank_h, std::size_t d_h, std::size_t begin,
                           std::size_t end) {
  const std::size_t modes = proj.size();
  Matrix acc = Matrix::Zero(f_t.out_dim(), d_h);
  Matrix term(f_t.out_dim(), d_h);
  Matrix p(f_t.out_dim(), d_h);
  for (std::size_t rt = begin; rt < end; ++rt) {
    for (std::size_t rh = 0; rh < rank_h; ++rh) {
      term.noalias() = f_t.factor(0, rt) * proj[0][rh];
      for (std::size_t m = 1; m < modes; ++m) {
        p.noalias() = f_t.factor(m, rt) * proj[m][rh];
        term.array() *= p.array();
      }
      acc += term;
    }
  }
  return acc;
}

// Partial paper-literal per-modality sums over r_t in [begin, end).
std::vector<Matrix> lowrank_literal_block(const std::vector<std::vector<Matrix>>& proj,
                                          const CpFactorSet& f_t, std::size_t rank_h,
                                          std::size_t d_h, std::size_t begin, std::size_t end) {
  const std::size_t modes = proj.size();
  std::vector<Matrix> sums(modes, Matrix::Zero(f_t.out_dim(), d_h));
  Matrix p(f_t.out_dim(), d_h);
  for (std::size_t m = 0; m < modes; ++m) {
    for (std::size_t rt = begin; rt < end; ++rt) {
      for (std::size_t rh = 0; rh < rank_h; ++rh) {
        p.noalias() = f_t.factor(m, rt) * proj[m][rh];
        sums[m] += p;
      }
    }
  }
  return sums;
}

template <typename Block>
std::vector<Block> run_blocks(std::size_t total, int threads, auto&& fn) {
  const std::size_t workers =
      std::clamp<std::size_t>(threads > 0 ? static_cast<std::size_t>(threads) : 1, 1, total);
  std::vector<Block> parts(workers);
  if (workers == 1) {
    parts[0] = fn(0, total);
    return parts;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = total * w / workers;
    const std::size_t end = total * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] { parts[w] = fn(begin, end); });
  }
  for (auto& t : pool) t.join();
  return parts;
}

}  // namespace

Matrix sequence_fusion_lowrank(const ModalityBatch& h, const CpFactorSet& f_h,
                               const CpFactorSet& f_t, Ordering ordering, int threads) {
  if (f_h.modalities() != h.modalities() || f_t.modalities() != h.modalities()) {
    throw InvalidArgument("modality count mismatch between inputs and factors");
  }
  require_factor_dims(f_h, h.dims(), "f_h");
  require_factor_dims(f_t, h.lengths(), "f_t");

  const auto proj = project_tokens(h, f_h);
  const std::size_t d_h = f_h.out_dim();
  const std::size_t rank_h = f_h.rank();

  if (ordering == Ordering::exact) {
    auto parts = run_blocks<Matrix>(f_t.rank(), threads, [&](std::size_t b, std::size_t e) {
      return lowrank_exact_block(proj, f_t, rank_h, d_h, b, e);
    });
    Matrix out = std::move(parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) out += parts[i];
    return out;
  }

  auto parts = run_blocks<std::vector<Matrix>>(
      f_t.rank(), threads,
      [&](std::size_t b, std::size_t e) { return lowrank_literal_block(proj, f_t, rank_h, d_h, b, e); });
  std::vector<Matrix> sums = std::move(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i)
    for (std::size_t m = 0; m < sums.size(); ++m) sums[m] += parts[i][m];
  return hadamard(sums);
}

Matrix sequence_fusion_lowrank(const ModalityBatch& h, const CpFactorSet& f_h,
                               const CpFactorSet& f_t, const Matrix& bias, Ordering ordering,
                               int threads) {
  if (static_cast<std::size_t>(bias.rows()) != f_t.out_dim() ||
      static_cast<std::size_t>(bias.cols()) != f_h.out_dim()) {
    throw InvalidArgument("fusion bias must be d_t x d_h");
  }
  return sequence_fusion_lowrank(h, f_h, f_t, ordering, threads) + bias;
}

}  // namespace wander
