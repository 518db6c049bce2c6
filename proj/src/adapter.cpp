#include "wander/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "wander/errors.hpp"

namespace wander {

std::string_view to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "gelu"; }

std::string_view to_string(ResidualPolicy p) {
  switch (p) {
    case ResidualPolicy::reference_modality:
      return "reference-modality";
    case ResidualPolicy::mean_of_modalities:
      return "mean-of-modalities";
    case ResidualPolicy::none:
      return "none";
  }
  return "none";
}

Nonlinearity parse_nonlinearity(std::string_view s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "gelu") return Nonlinearity::gelu;
  throw InvalidArgument("unknown nonlinearity \"" + std::string(s) + "\"");
}

ResidualPolicy parse_residual_policy(std::string_view s) {
  if (s == "reference-modality") return ResidualPolicy::reference_modality;
  if (s == "mean-of-modalities") return ResidualPolicy::mean_of_modalities;
  if (s == "none") return ResidualPolicy::none;
  throw InvalidArgument("unknown residual policy \"" + std::string(s) + "\"");
}

// Exact (erf) GELU.
double activate(Nonlinearity n, double x) {
  if (n == Nonlinearity::relu) return x > 0.0 ? x : 0.0;
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

double activate_derivative(Nonlinearity n, double x) {
  if (n == Nonlinearity::relu) return x > 0.0 ? 1.0 : 0.0;
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void WanderConfig::validate() const {
  try {
    fusion.validate();
  } catch (const InvalidArgument& e) {
    throw InvalidConfiguration(e.what());
  }
  if (down_dim == 0) throw InvalidConfiguration("down dim must be >= 1");
  if (n_classes == 0) throw InvalidConfiguration("n_classes must be >= 1");
  if (residual == ResidualPolicy::none) return;
  if (fusion.d_h != down_dim) {
    throw InvalidConfiguration("residual policy " + std::string(to_string(residual)) +
                               " requires d_h == down dim (" + std::to_string(fusion.d_h) +
                               " vs " + std::to_string(down_dim) + ")");
  }
  const auto min_len = *std::min_element(fusion.lengths.begin(), fusion.lengths.end());
  if (fusion.d_t > min_len) {
    throw InvalidConfiguration("residual policy requires d_t <= min sequence length (" +
                               std::to_string(fusion.d_t) + " > " + std::to_string(min_len) + ")");
  }
  if (residual == ResidualPolicy::reference_modality && reference_modality >= modalities()) {
    throw InvalidConfiguration("reference modality index out of range");
  }
}

bool WanderConfig::down_dim_exceeds_inputs() const {
  return std::any_of(fusion.dims.begin(), fusion.dims.end(),
                     [&](std::size_t d) { return down_dim > d; });
}

nlohmann::json to_json(const WanderConfig& cfg) {
  return {
      {"dims", cfg.fusion.dims},
      {"lengths", cfg.fusion.lengths},
      {"d_h", cfg.fusion.d_h},
      {"d_t", cfg.fusion.d_t},
      {"rank_h", cfg.fusion.rank_h},
      {"rank_t", cfg.fusion.rank_t},
      {"ordering", std::string(to_string(cfg.fusion.ordering))},
      {"down_dim", cfg.down_dim},
      {"nonlinearity", std::string(to_string(cfg.nonlinearity))},
      {"residual", std::string(to_string(cfg.residual))},
      {"reference_modality", cfg.reference_modality},
      {"n_classes", cfg.n_classes},
  };
}

WanderConfig wander_config_from_json(const nlohmann::json& j) {
  WanderConfig cfg;
  try {
    cfg.fusion.dims = j.at("dims").get<Shape>();
    cfg.fusion.lengths = j.at("lengths").get<Shape>();
    cfg.fusion.d_h = j.at("d_h").get<std::size_t>();
    cfg.fusion.d_t = j.at("d_t").get<std::size_t>();
    cfg.fusion.rank_h = j.at("rank_h").get<std::size_t>();
    cfg.fusion.rank_t = j.at("rank_t").get<std::size_t>();
    cfg.fusion.ordering = parse_ordering(j.at("ordering").get<std::string>());
    cfg.down_dim = j.at("down_dim").get<std::size_t>();
    cfg.nonlinearity = parse_nonlinearity(j.at("nonlinearity").get<std::string>());
    cfg.residual = parse_residual_policy(j.at("residual").get<std::string>());
    cfg.reference_modality = j.at("reference_modality").get<std::size_t>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfiguration(std::string("bad adapter config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

WanderParams WanderParams::zeros(const WanderConfig& cfg) {
  cfg.validate();
  const std::size_t modes = cfg.modalities();
  const std::size_t d = cfg.down_dim;
  const auto& fc = cfg.fusion;
  WanderParams p;
  for (std::size_t m = 0; m < modes; ++m) {
    p.down.push_back(Matrix::Zero(fc.dims[m], d));
    p.down_bias.push_back(Matrix::Zero(d, 1));
  }
  p.f_h = CpFactorSet(fc.rank_h, fc.d_h, Shape(modes, d));
  p.f_t = CpFactorSet(fc.rank_t, fc.d_t, fc.lengths);
  p.fusion_bias = Matrix::Zero(fc.d_t, fc.d_h);
  p.head = Matrix::Zero(fc.d_t * fc.d_h, cfg.n_classes);
  p.head_bias = Matrix::Zero(cfg.n_classes, 1);
  return p;
}

WanderParams WanderParams::init(const WanderConfig& cfg, std::mt19937_64& rng) {
  WanderParams p = zeros(cfg);
  const std::size_t modes = cfg.modalities();
  const auto& fc = cfg.fusion;
  const double m_root = 1.0 / static_cast<double>(modes);
  for (std::size_t m = 0; m < modes; ++m) {
    const double a = std::sqrt(3.0 / static_cast<double>(fc.dims[m]));
    p.down[m] = uniform_matrix(fc.dims[m], cfg.down_dim, rng, -a, a);
  }
  const double h_scale = std::sqrt(3.0 / static_cast<double>(cfg.down_dim)) *
                         std::pow(1.0 / static_cast<double>(fc.rank_h), m_root);
  for (std::size_t m = 0; m < modes; ++m)
    for (std::size_t r = 0; r < fc.rank_h; ++r)
      p.f_h.factor(m, r) = uniform_matrix(fc.d_h, cfg.down_dim, rng, -h_scale, h_scale);
  const std::size_t zero_modality =
      cfg.residual == ResidualPolicy::reference_modality ? cfg.reference_modality : 0;
  for (std::size_t m = 0; m < modes; ++m) {
    const double t_scale = std::sqrt(3.0 / static_cast<double>(fc.lengths[m])) *
                           std::pow(1.0 / static_cast<double>(fc.rank_t), m_root);
    for (std::size_t r = 0; r < fc.rank_t; ++r) {
      Matrix w = uniform_matrix(fc.d_t, fc.lengths[m], rng, -t_scale, t_scale);
      if (m == zero_modality) w.setZero();
      p.f_t.factor(m, r) = std::move(w);
    }
  }
  const double head_scale = std::sqrt(3.0 / static_cast<double>(fc.d_t * fc.d_h));
  p.head = uniform_matrix(fc.d_t * fc.d_h, cfg.n_classes, rng, -head_scale, head_scale);
  return p;
}

std::vector<ParamBlock> WanderParams::blocks() {
  std::vector<ParamBlock> out;
  for (std::size_t m = 0; m < down.size(); ++m) {
    out.push_back({"down." + std::to_string(m), &down[m]});
    out.push_back({"down_bias." + std::to_string(m), &down_bias[m]});
  }
  for (std::size_t m = 0; m < f_h.modalities(); ++m)
    for (std::size_t r = 0; r < f_h.rank(); ++r)
      out.push_back({"f_h.m" + std::to_string(m) + ".r" + std::to_string(r), &f_h.factor(m, r)});
  for (std::size_t m = 0; m < f_t.modalities(); ++m)
    for (std::size_t r = 0; r < f_t.rank(); ++r)
      out.push_back({"f_t.m" + std::to_string(m) + ".r" + std::to_string(r), &f_t.factor(m, r)});
  out.push_back({"fusion_bias", &fusion_bias});
  out.push_back({"head", &head});
  out.push_back({"head_bias", &head_bias});
  return out;
}

std::vector<ConstParamBlock> WanderParams::blocks() const {
  std::vector<ConstParamBlock> out;
  for (auto& b : const_cast<WanderParams*>(this)->blocks()) out.push_back({b.name, b.value});
  return out;
}

void WanderParams::set_zero() {
  for (auto& b : blocks()) b.value->setZero();
}

void WanderParams::axpy(double alpha, const WanderParams& x) {
  auto mine = blocks();
  const auto theirs = x.blocks();
  if (mine.size() != theirs.size()) throw InvalidArgument("parameter structures differ");
  for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].value += alpha * *theirs[i].value;
}

bool WanderParams::all_finite() const {
  for (const auto& b : blocks())
    if (!b.value->allFinite()) return false;
  return true;
}

double WanderParams::max_abs() const {
  double v = 0.0;
  for (const auto& b : blocks()) v = std::max(v, wander::max_abs(*b.value));
  return v;
}

DownProjected down_project(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg) {
  if (h.modalities() != p.down.size()) throw InvalidArgument("modality count mismatch");
  DownProjected out;
  std::vector<Matrix> z;
  for (std::size_t m = 0; m < h.modalities(); ++m) {
    if (h.dim(m) != static_cast<std::size_t>(p.down[m].rows())) {
      throw InvalidArgument("modality " + std::to_string(m) + " feature dim does not match Down");
    }
    if (h.length(m) != cfg.fusion.lengths[m]) {
      throw InvalidArgument("modality " + std::to_string(m) + " length does not match config");
    }
    Matrix pre = h[m] * p.down[m];
    pre.rowwise() += p.down_bias[m].col(0).transpose();
    z.push_back(pre.unaryExpr([&](double x) { return activate(cfg.nonlinearity, x); }));
    out.pre.push_back(std::move(pre));
  }
  out.z = ModalityBatch(std::move(z));
  return out;
}

Matrix residual_term(const ModalityBatch& z, const WanderConfig& cfg) {
  const std::size_t d_t = cfg.fusion.d_t;
  switch (cfg.residual) {
    case ResidualPolicy::reference_modality:
      return z[cfg.reference_modality].topRows(d_t);
    case ResidualPolicy::mean_of_modalities: {
      Matrix r = Matrix::Zero(d_t, cfg.down_dim);
      for (std::size_t m = 0; m < z.modalities(); ++m) r += z[m].topRows(d_t);
      return r / static_cast<double>(z.modalities());
    }
    case ResidualPolicy::none:
      break;
  }
  return Matrix::Zero(d_t, cfg.fusion.d_h);
}

Matrix wander_forward(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg,
                      int threads) {
  cfg.validate();
  const auto dp = down_project(h, p, cfg);
  Matrix y = sequence_fusion_lowrank(dp.z, p.f_h, p.f_t, p.fusion_bias, cfg.fusion.ordering, threads);
  if (cfg.residual != ResidualPolicy::none) y += residual_term(dp.z, cfg);
  return y;
}

Vector head_forward(const Matrix& fused, const WanderParams& p) {
  if (static_cast<std::size_t>(fused.size()) != static_cast<std::size_t>(p.head.rows())) {
    throw InvalidArgument("fused size does not match head input dim");
  }
  Vector flat(fused.size());
  for (Eigen::Index i = 0; i < fused.rows(); ++i)
    for (Eigen::Index j = 0; j < fused.cols(); ++j) flat[i * fused.cols() + j] = fused(i, j);
  return p.head.transpose() * flat + p.head_bias.col(0);
}

std::uint64_t count_trainable(const WanderParams& p) {
  std::uint64_t n = 0;
  for (const auto& b : p.blocks()) n += static_cast<std::uint64_t>(b.value->size());
  return n;
}

std::uint64_t count_trainable_formula(const WanderConfig& cfg) {
  const auto& fc = cfg.fusion;
  const std::uint64_t modes = cfg.modalities();
  const std::uint64_t d = cfg.down_dim;
  std::uint64_t down = 0, sum_len = 0;
  for (std::size_t m = 0; m < modes; ++m) {
    down += fc.dims[m] * d + d;
    sum_len += fc.lengths[m];
  }
  const std::uint64_t fused = fc.d_t * fc.d_h;
  return down + fc.rank_h * fc.d_h * modes * d + fc.rank_t * fc.d_t * sum_len + fused +
         (fused * cfg.n_classes + cfg.n_classes);
}

dtf1::Container to_checkpoint(const WanderParams& p, const WanderConfig& cfg) {
  dtf1::Container c;
  for (const auto& b : p.blocks()) c.records.push_back({b.name, DenseTensor::from_matrix(*b.value)});
  c.meta = {{"kind", "wander-checkpoint"}, {"config", to_json(cfg)}};
  return c;
}

std::pair<WanderParams, WanderConfig> from_checkpoint(const dtf1::Container& c) {
  if (!c.meta.contains("config")) throw InvalidArgument("checkpoint meta lacks a config");
  const WanderConfig cfg = wander_config_from_json(c.meta["config"]);
  WanderParams p = WanderParams::zeros(cfg);
  auto blocks = p.blocks();
  if (blocks.size() != c.records.size()) {
    throw InvalidArgument("checkpoint has " + std::to_string(c.records.size()) +
                          " records, config implies " + std::to_string(blocks.size()));
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& rec = c.records[i];
    if (rec.name != blocks[i].name) {
      throw InvalidArgument("checkpoint record \"" + rec.name + "\" where \"" + blocks[i].name +
                            "\" was expected");
    }
    const Matrix value = rec.tensor.to_matrix();
    if (value.rows() != blocks[i].value->rows() || value.cols() != blocks[i].value->cols()) {
      throw InvalidArgument("checkpoint record \"" + rec.name + "\" has the wrong shape");
    }
    *blocks[i].value = value;
  }
  return {std::move(p), cfg};
}

}  // namespace wander
