#include "wander/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "wander/errors.hpp"

namespace wander {

namespace {

std::string shape_str(std::span<const std::size_t> shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw InvalidArgument("tensor order must be >= 1");
  for (auto e : shape) {
    if (e == 0) throw InvalidArgument("tensor extents must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

std::size_t shape_size(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e != 0 && n > std::numeric_limits<std::size_t>::max() / e) {
      throw InvalidArgument("tensor size overflows size_t: " + shape_str(shape));
    }
    n *= e;
  }
  return n;
}

DenseTensor::DenseTensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), 0.0);
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw InvalidArgument("data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }
}

DenseTensor DenseTensor::from_matrix(const Matrix& m) {
  DenseTensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.data_[i * m.cols() + j] = m(i, j);
  return t;
}

std::size_t DenseTensor::flat_index(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw InvalidArgument("index order " + std::to_string(index.size()) +
                          " does not match tensor order " + std::to_string(shape_.size()));
  }
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) throw InvalidArgument("index out of range");
    flat = flat * shape_[i] + index[i];
  }
  return flat;
}

double& DenseTensor::at(std::span<const std::size_t> index) { return data_[flat_index(index)]; }

double DenseTensor::at(std::span<const std::size_t> index) const {
  return data_[flat_index(index)];
}

Matrix DenseTensor::to_matrix() const {
  if (order() != 2) throw InvalidArgument("to_matrix requires an order-2 tensor");
  Matrix m(shape_[0], shape_[1]);
  for (std::size_t i = 0; i < shape_[0]; ++i)
    for (std::size_t j = 0; j < shape_[1]; ++j) m(i, j) = data_[i * shape_[1] + j];
  return m;
}

CpFactorSet::CpFactorSet(std::size_t rank, std::size_t out_dim, Shape dims)
    : rank_(rank), out_dim_(out_dim), dims_(std::move(dims)) {
  factors_.resize(dims_.size());
  for (std::size_t m = 0; m < dims_.size(); ++m) {
    factors_[m].assign(rank_, Matrix::Zero(out_dim_, dims_[m]));
  }
  validate();
}

CpFactorSet::CpFactorSet(std::size_t rank, std::size_t out_dim, Shape dims,
                         std::vector<std::vector<Matrix>> factors)
    : rank_(rank), out_dim_(out_dim), dims_(std::move(dims)), factors_(std::move(factors)) {
  validate();
}

CpFactorSet CpFactorSet::uniform(std::size_t rank, std::size_t out_dim, Shape dims,
                                 std::mt19937_64& rng, double lo, double hi) {
  CpFactorSet f(rank, out_dim, std::move(dims));
  for (std::size_t m = 0; m < f.modalities(); ++m)
    for (std::size_t r = 0; r < rank; ++r)
      f.factors_[m][r] = uniform_matrix(out_dim, f.dims_[m], rng, lo, hi);
  return f;
}

void CpFactorSet::validate() const {
  if (rank_ == 0) throw InvalidArgument("CP rank must be >= 1");
  if (out_dim_ == 0) throw InvalidArgument("CP out_dim must be >= 1");
  if (dims_.empty()) throw InvalidArgument("CP factor set needs at least one modality");
  if (factors_.size() != dims_.size()) {
    throw InvalidArgument("CP factor set has " + std::to_string(factors_.size()) +
                          " modality stacks, expected " + std::to_string(dims_.size()));
  }
  for (std::size_t m = 0; m < dims_.size(); ++m) {
    if (dims_[m] == 0) throw InvalidArgument("CP modality dims must be >= 1");
    if (factors_[m].size() != rank_) {
      throw InvalidArgument("modality " + std::to_string(m) + " has " +
                            std::to_string(factors_[m].size()) + " factors, expected rank " +
                            std::to_string(rank_));
    }
    for (const auto& w : factors_[m]) {
      if (static_cast<std::size_t>(w.rows()) != out_dim_ ||
          static_cast<std::size_t>(w.cols()) != dims_[m]) {
        throw InvalidArgument("modality " + std::to_string(m) + " factor is " +
                              std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                              ", expected " + std::to_string(out_dim_) + "x" +
                              std::to_string(dims_[m]));
      }
      if (!w.allFinite()) throw InvalidArgument("CP factors must be finite");
    }
  }
}

Matrix CpFactorSet::rank_sum(std::size_t m) const {
  Matrix s = Matrix::Zero(out_dim_, dims_.at(m));
  for (const auto& w : factors_[m]) s += w;
  return s;
}

std::size_t CpFactorSet::parameter_count() const {
  std::size_t n = 0;
  for (auto d : dims_) n += rank_ * out_dim_ * d;
  return n;
}

bool CpFactorSet::all_finite() const {
  for (const auto& stack : factors_)
    for (const auto& w : stack)
      if (!w.allFinite()) return false;
  return true;
}

void CpFactorSet::scale(double alpha) {
  for (auto& stack : factors_)
    for (auto& w : stack) w *= alpha;
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo,
                      double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  // Fill row-major so fixtures read naturally.
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

DenseTensor outer_product(std::span<const Vector> vectors) {
  if (vectors.empty()) throw InvalidArgument("outer_product needs at least one vector");
  Shape shape;
  for (const auto& v : vectors) {
    if (v.size() == 0) throw InvalidArgument("outer_product operands must be non-empty");
    shape.push_back(static_cast<std::size_t>(v.size()));
  }
  DenseTensor out(shape);
  auto data = out.data();
  // Grow the product one mode at a time: after processing mode m the first
  // prod(d_1..d_m) entries hold the partial outer product.
  data[0] = 1.0;
  std::size_t filled = 1;
  for (const auto& v : vectors) {
    const auto d = static_cast<std::size_t>(v.size());
    for (std::size_t p = filled; p-- > 0;) {
      const double base = data[p];
      for (std::size_t i = d; i-- > 0;) data[p * d + i] = base * v[i];
    }
    filled *= d;
  }
  return out;
}

DenseTensor cp_reconstruct(const CpFactorSet& f) {
  Shape shape = f.dims();
  shape.push_back(f.out_dim());
  DenseTensor out(shape);
  const std::size_t modes = f.modalities();
  const std::size_t out_dim = f.out_dim();
  const std::size_t slice = shape_size(f.dims());

  std::vector<Vector> rows(modes);
  for (std::size_t k = 0; k < out_dim; ++k) {
    for (std::size_t r = 0; r < f.rank(); ++r) {
      for (std::size_t m = 0; m < modes; ++m) rows[m] = f.factor(m, r).row(k).transpose();
      const DenseTensor term = outer_product(rows);
      for (std::size_t p = 0; p < slice; ++p) out[p * out_dim + k] += term[p];
    }
  }
  return out;
}

DenseTensor output_mode_first(const DenseTensor& t) {
  Shape shape;
  shape.push_back(t.shape().back());
  shape.insert(shape.end(), t.shape().begin(), t.shape().end() - 1);
  DenseTensor out(shape);
  const std::size_t k_dim = t.shape().back();
  const std::size_t slice = t.size() / k_dim;
  for (std::size_t p = 0; p < slice; ++p)
    for (std::size_t k = 0; k < k_dim; ++k) out[k * slice + p] = t[p * k_dim + k];
  return out;
}

Matrix hadamard(std::span<const Matrix> matrices) {
  if (matrices.empty()) throw InvalidArgument("hadamard needs at least one matrix");
  Matrix out = matrices[0];
  for (std::size_t i = 1; i < matrices.size(); ++i) {
    if (matrices[i].rows() != out.rows() || matrices[i].cols() != out.cols()) {
      throw InvalidArgument("hadamard operands must share a shape");
    }
    out.array() *= matrices[i].array();
  }
  return out;
}

DenseTensor contract_last_modes(const DenseTensor& t, const DenseTensor& w, std::size_t arity) {
  if (arity == 0 || arity > t.order() || arity > w.order()) {
    throw InvalidArgument("contraction arity " + std::to_string(arity) +
                          " invalid for orders " + std::to_string(t.order()) + " and " +
                          std::to_string(w.order()));
  }
  const std::size_t t_keep = t.order() - arity;
  for (std::size_t i = 0; i < arity; ++i) {
    if (t.extent(t_keep + i) != w.extent(i)) {
      throw InvalidArgument("contraction mode mismatch: " + shape_str(t.shape()) + " vs " +
                            shape_str(w.shape()));
    }
  }
  Shape out_shape(t.shape().begin(), t.shape().begin() + static_cast<std::ptrdiff_t>(t_keep));
  out_shape.insert(out_shape.end(), w.shape().begin() + static_cast<std::ptrdiff_t>(arity),
                   w.shape().end());
  if (out_shape.empty()) out_shape.push_back(1);

  const std::size_t rows = shape_size(std::span(t.shape()).first(t_keep));
  const std::size_t inner = shape_size(std::span(t.shape()).subspan(t_keep));
  const std::size_t cols = w.size() / inner;

  // Row-major buffers viewed as (rows x inner) * (inner x cols).
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> lhs(t.data().data(), rows, inner);
  Eigen::Map<const RowMat> rhs(w.data().data(), inner, cols);
  DenseTensor out(out_shape);
  Eigen::Map<RowMat> res(out.data().data(), rows, cols);
  res.noalias() = lhs * rhs;
  return out;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

double max_relative_error(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument("max_relative_error operands must share a shape");
  }
  const double diff = max_abs(a - b);
  if (diff == 0.0) return 0.0;
  const double scale = max_abs(b);
  if (scale == 0.0) return std::numeric_limits<double>::infinity();
  return diff / scale;
}

}  // namespace wander
