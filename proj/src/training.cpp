#include "wander/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include <Eigen/QR>

#include "wander/errors.hpp"

namespace wander {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
std::string_view to_string(LossKind k) {
  return k == LossKind::cross_entropy ? "cross-entropy" : "mse";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw InvalidArgument("unknown optimizer \"" + std::string(s) + "\"");
}

LossKind parse_loss(std::string_view s) {
  if (s == "cross-entropy") return LossKind::cross_entropy;
  if (s == "mse") return LossKind::mse;
  throw InvalidArgument("unknown loss \"" + std::string(s) + "\"");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw InvalidArgument("epochs must be >= 1");
  if (batch_size == 0) throw InvalidArgument("batch size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("learning rate must be finite and >= 0");
  }
  if (!(lr_gamma > 0.0)) throw InvalidArgument("lr_gamma must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw InvalidArgument("weight decay must be finite and >= 0");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw InvalidArgument("holdout fraction must be in [0, 1)");
  }
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"optimizer", std::string(to_string(c.optimizer))},
          {"loss", std::string(to_string(c.loss))},
          {"seed", c.seed},
          {"lr_step", c.lr_step},
          {"lr_gamma", c.lr_gamma},
          {"weight_decay", c.weight_decay},
          {"holdout_fraction", c.holdout_fraction},
          {"threads", c.threads}};
}

// ---------------------------------------------------------------------------
// Frozen backbone

FrozenBackbone::FrozenBackbone(const Shape& dims, std::uint64_t seed, double gain) : seed_(seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (auto d : dims) {
    Matrix g(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g(i, j) = normal(rng);
    // Random orthogonal map (QR with sign-fixed diagonal), scaled by gain.
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    const Matrix r = qr.matrixQR();
    for (std::size_t j = 0; j < d; ++j)
      if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    weight_.push_back(gain * q);
    bias_.push_back(uniform_matrix(1, d, rng, -0.1 * gain, 0.1 * gain));
  }
}

ModalityBatch FrozenBackbone::apply(const std::vector<Matrix>& raw) const {
  if (raw.size() != weight_.size()) throw InvalidArgument("backbone modality count mismatch");
  std::vector<Matrix> out;
  for (std::size_t m = 0; m < raw.size(); ++m) {
    if (raw[m].cols() != weight_[m].rows()) {
      throw InvalidArgument("backbone input dim mismatch for modality " + std::to_string(m));
    }
    Matrix pre = raw[m] * weight_[m];
    pre.rowwise() += bias_[m].row(0);
    out.push_back(pre.array().tanh().matrix());
  }
  return ModalityBatch(std::move(out));
}

std::string FrozenBackbone::bytes() const {
  std::string out;
  auto append = [&](const Matrix& m) {
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
  };
  for (const auto& w : weight_) append(w);
  for (const auto& b : bias_) append(b);
  out.append(reinterpret_cast<const char*>(&seed_), sizeof(seed_));
  return out;
}

// ---------------------------------------------------------------------------
// Wander forward/backward

namespace {

struct WanderState {
  DownProjected dp;
  std::vector<std::vector<Matrix>> proj;  // [m][r_h], l_m x d_h
  std::vector<Matrix> terms;              // exact: [(r_t R_h + r_h) M + m]; literal: [m]
  Matrix y;
};

WanderState forward_state(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg) {
  WanderState s;
  s.dp = down_project(h, p, cfg);
  s.proj = project_tokens(s.dp.z, p.f_h);
  const std::size_t modes = cfg.modalities();
  const std::size_t rank_h = p.f_h.rank();
  const std::size_t rank_t = p.f_t.rank();
  const std::size_t d_t = p.f_t.out_dim();
  const std::size_t d_h = p.f_h.out_dim();

  Matrix acc = Matrix::Zero(d_t, d_h);
  if (cfg.fusion.ordering == Ordering::exact) {
    s.terms.resize(rank_t * rank_h * modes);
    Matrix term(d_t, d_h);
    for (std::size_t rt = 0; rt < rank_t; ++rt) {
      for (std::size_t rh = 0; rh < rank_h; ++rh) {
        for (std::size_t m = 0; m < modes; ++m) {
          Matrix& pm = s.terms[(rt * rank_h + rh) * modes + m];
          pm.noalias() = p.f_t.factor(m, rt) * s.proj[m][rh];
          if (m == 0) {
            term = pm;
          } else {
            term.array() *= pm.array();
          }
        }
        acc += term;
      }
    }
  } else {
    s.terms.assign(modes, Matrix::Zero(d_t, d_h));
    Matrix pm(d_t, d_h);
    for (std::size_t m = 0; m < modes; ++m)
      for (std::size_t rt = 0; rt < rank_t; ++rt)
        for (std::size_t rh = 0; rh < rank_h; ++rh) {
          pm.noalias() = p.f_t.factor(m, rt) * s.proj[m][rh];
          s.terms[m] += pm;
        }
    acc = hadamard(s.terms);
  }
  s.y = acc + p.fusion_bias;
  if (cfg.residual != ResidualPolicy::none) s.y += residual_term(s.dp.z, cfg);
  return s;
}

// Product of terms[base + m'] over m' != skip.
Matrix product_except(const std::vector<Matrix>& terms, std::size_t base, std::size_t modes,
                      std::size_t skip, const Matrix& seed) {
  Matrix g = seed;
  for (std::size_t m = 0; m < modes; ++m)
    if (m != skip) g.array() *= terms[base + m].array();
  return g;
}

void backward_from_state(const WanderState& s, const ModalityBatch& h, const WanderParams& p,
                         const WanderConfig& cfg, const Matrix& upstream, GradientBundle& g) {
  const std::size_t modes = cfg.modalities();
  const std::size_t rank_h = p.f_h.rank();
  const std::size_t rank_t = p.f_t.rank();

  std::vector<std::vector<Matrix>> dproj(modes);
  for (std::size_t m = 0; m < modes; ++m)
    dproj[m].assign(rank_h, Matrix::Zero(s.proj[m][0].rows(), s.proj[m][0].cols()));

  if (cfg.fusion.ordering == Ordering::exact) {
    for (std::size_t rt = 0; rt < rank_t; ++rt) {
      for (std::size_t rh = 0; rh < rank_h; ++rh) {
        const std::size_t base = (rt * rank_h + rh) * modes;
        for (std::size_t m = 0; m < modes; ++m) {
          const Matrix gm = product_except(s.terms, base, modes, m, upstream);
          g.f_t.factor(m, rt).noalias() += gm * s.proj[m][rh].transpose();
          dproj[m][rh].noalias() += p.f_t.factor(m, rt).transpose() * gm;
        }
      }
    }
  } else {
    for (std::size_t m = 0; m < modes; ++m) {
      const Matrix gm = product_except(s.terms, 0, modes, m, upstream);
      Matrix proj_sum = Matrix::Zero(s.proj[m][0].rows(), s.proj[m][0].cols());
      for (std::size_t rh = 0; rh < rank_h; ++rh) proj_sum += s.proj[m][rh];
      const Matrix t_sum = p.f_t.rank_sum(m);
      const Matrix dwt = gm * proj_sum.transpose();
      const Matrix dp = t_sum.transpose() * gm;
      for (std::size_t rt = 0; rt < rank_t; ++rt) g.f_t.factor(m, rt) += dwt;
      for (std::size_t rh = 0; rh < rank_h; ++rh) dproj[m][rh] += dp;
    }
  }

  std::vector<Matrix> dz(modes);
  for (std::size_t m = 0; m < modes; ++m) {
    const Matrix& z = s.dp.z[m];
    dz[m] = Matrix::Zero(z.rows(), z.cols());
    for (std::size_t rh = 0; rh < rank_h; ++rh) {
      g.f_h.factor(m, rh).noalias() += dproj[m][rh].transpose() * z;
      dz[m].noalias() += dproj[m][rh] * p.f_h.factor(m, rh);
    }
  }

  const std::size_t d_t = cfg.fusion.d_t;
  switch (cfg.residual) {
    case ResidualPolicy::reference_modality:
      dz[cfg.reference_modality].topRows(d_t) += upstream;
      break;
    case ResidualPolicy::mean_of_modalities:
      for (std::size_t m = 0; m < modes; ++m) dz[m].topRows(d_t) += upstream / static_cast<double>(modes);
      break;
    case ResidualPolicy::none:
      break;
  }

  for (std::size_t m = 0; m < modes; ++m) {
    const Matrix dpre = dz[m].cwiseProduct(
        s.dp.pre[m].unaryExpr([&](double x) { return activate_derivative(cfg.nonlinearity, x); }));
    g.down[m].noalias() += h[m].transpose() * dpre;
    g.down_bias[m] += dpre.colwise().sum().transpose();
  }
  g.fusion_bias += upstream;
}

Vector flatten_row_major(const Matrix& m) {
  Vector flat(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) flat[i * m.cols() + j] = m(i, j);
  return flat;
}

Matrix unflatten_row_major(const Vector& flat, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = flat[i * cols + j];
  return m;
}

}  // namespace

GradientBundle backward(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg,
                        const Matrix& upstream) {
  cfg.validate();
  if (upstream.rows() != static_cast<Eigen::Index>(cfg.fusion.d_t) ||
      upstream.cols() != static_cast<Eigen::Index>(cfg.fusion.d_h)) {
    throw InvalidArgument("upstream gradient must be d_t x d_h");
  }
  if (!upstream.allFinite()) throw InvalidArgument("upstream gradient is not finite");
  GradientBundle g = WanderParams::zeros(cfg);
  const WanderState s = forward_state(h, p, cfg);
  backward_from_state(s, h, p, cfg, upstream, g);
  return g;
}

LossGrad loss_and_grad(const Vector& logits, double label, LossKind kind) {
  LossGrad out;
  if (kind == LossKind::mse) {
    if (logits.size() != 1) throw InvalidArgument("mse loss expects a single output");
    const double r = logits[0] - label;
    out.loss = 0.5 * r * r;
    out.dlogits = Vector::Constant(1, r);
    return out;
  }
  const auto cls = static_cast<Eigen::Index>(label);
  if (cls < 0 || cls >= logits.size() || static_cast<double>(cls) != label) {
    throw InvalidArgument("class label out of range");
  }
  const double top = logits.maxCoeff();
  const Vector e = (logits.array() - top).exp().matrix();
  const double z = e.sum();
  out.loss = std::log(z) + top - logits[cls];
  out.dlogits = e / z;
  out.dlogits[cls] -= 1.0;
  return out;
}

bool prediction_correct(const Vector& logits, double label, LossKind kind) {
  if (kind == LossKind::mse) return (logits[0] > 0.0) == (label > 0.0);
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<double>(best) == label;
}

double sample_loss_and_grad(const ModalityBatch& h, double label, const WanderParams& p,
                            const WanderConfig& cfg, LossKind kind, GradientBundle& grad) {
  const WanderState s = forward_state(h, p, cfg);
  const Vector flat = flatten_row_major(s.y);
  const Vector logits = p.head.transpose() * flat + p.head_bias.col(0);
  const LossGrad lg = loss_and_grad(logits, label, kind);
  grad.head.noalias() += flat * lg.dlogits.transpose();
  grad.head_bias.col(0) += lg.dlogits;
  const Matrix upstream = unflatten_row_major(p.head * lg.dlogits, s.y.rows(), s.y.cols());
  backward_from_state(s, h, p, cfg, upstream, grad);
  return lg.loss;
}

double sample_loss(const ModalityBatch& h, double label, const WanderParams& p,
                   const WanderConfig& cfg, LossKind kind) {
  return loss_and_grad(head_forward(wander_forward(h, p, cfg), p), label, kind).loss;
}

GradientBundle finite_difference_grad(const std::function<double(const WanderParams&)>& loss_fn,
                                      const WanderParams& p, double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite-difference step must be > 0");
  return finite_difference_grad<WanderParams>(loss_fn, p, step);
}

double max_gradient_error(const WanderParams& analytic, const WanderParams& numeric) {
  const auto a = analytic.blocks();
  const auto n = numeric.blocks();
  if (a.size() != n.size()) throw InvalidArgument("gradient structures differ");
  double worst = 0.0;
  for (std::size_t b = 0; b < a.size(); ++b) {
    const Matrix& x = *a[b].value;
    const Matrix& y = *n[b].value;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double denom = std::max({std::abs(x.data()[i]), std::abs(y.data()[i]), 1.0});
      worst = std::max(worst, std::abs(x.data()[i] - y.data()[i]) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Vector-fusion baseline

VfParams VfParams::zeros(const WanderConfig& cfg) {
  cfg.validate();
  const std::size_t modes = cfg.modalities();
  const std::size_t d = cfg.down_dim;
  VfParams p;
  for (std::size_t m = 0; m < modes; ++m) {
    p.down.push_back(Matrix::Zero(cfg.fusion.dims[m], d));
    p.down_bias.push_back(Matrix::Zero(d, 1));
  }
  p.f_h = CpFactorSet(cfg.fusion.rank_h, cfg.fusion.d_h, Shape(modes, d));
  p.fusion_bias = Matrix::Zero(cfg.fusion.d_h, 1);
  p.head = Matrix::Zero(cfg.fusion.d_h, cfg.n_classes);
  p.head_bias = Matrix::Zero(cfg.n_classes, 1);
  return p;
}

VfParams VfParams::init(const WanderConfig& cfg, std::mt19937_64& rng) {
  // Mirror WanderParams::init so both models start from comparable scales.
  const WanderParams w = WanderParams::init(cfg, rng);
  VfParams p = zeros(cfg);
  p.down = w.down;
  p.down_bias = w.down_bias;
  p.f_h = w.f_h;
  const double head_scale = std::sqrt(3.0 / static_cast<double>(cfg.fusion.d_h));
  p.head = uniform_matrix(cfg.fusion.d_h, cfg.n_classes, rng, -head_scale, head_scale);
  return p;
}

std::vector<ParamBlock> VfParams::blocks() {
  std::vector<ParamBlock> out;
  for (std::size_t m = 0; m < down.size(); ++m) {
    out.push_back({"down." + std::to_string(m), &down[m]});
    out.push_back({"down_bias." + std::to_string(m), &down_bias[m]});
  }
  for (std::size_t m = 0; m < f_h.modalities(); ++m)
    for (std::size_t r = 0; r < f_h.rank(); ++r)
      out.push_back({"f_h.m" + std::to_string(m) + ".r" + std::to_string(r), &f_h.factor(m, r)});
  out.push_back({"fusion_bias", &fusion_bias});
  out.push_back({"head", &head});
  out.push_back({"head_bias", &head_bias});
  return out;
}

std::vector<ConstParamBlock> VfParams::blocks() const {
  std::vector<ConstParamBlock> out;
  for (auto& b : const_cast<VfParams*>(this)->blocks()) out.push_back({b.name, b.value});
  return out;
}

void VfParams::set_zero() {
  for (auto& b : blocks()) b.value->setZero();
}

bool VfParams::all_finite() const {
  for (const auto& b : blocks())
    if (!b.value->allFinite()) return false;
  return true;
}

namespace {

struct VfState {
  std::vector<Vector> pre;  // d
  std::vector<Vector> z;    // d
  std::vector<Vector> terms;  // exact: [r M + m]; literal: [m]
  Vector y;
};

VfState vf_state(const ModalityBatch& h, const VfParams& p, const WanderConfig& cfg) {
  const std::size_t modes = cfg.modalities();
  if (h.modalities() != modes) throw InvalidArgument("modality count mismatch");
  VfState s;
  for (std::size_t m = 0; m < modes; ++m) {
    if (h.dim(m) != static_cast<std::size_t>(p.down[m].rows())) {
      throw InvalidArgument("modality " + std::to_string(m) + " feature dim does not match Down");
    }
    Vector pre = p.down[m].transpose() * h[m].row(0).transpose() + p.down_bias[m].col(0);
    s.z.push_back(pre.unaryExpr([&](double x) { return activate(cfg.nonlinearity, x); }));
    s.pre.push_back(std::move(pre));
  }
  const std::size_t rank = p.f_h.rank();
  if (cfg.fusion.ordering == Ordering::exact) {
    for (std::size_t r = 0; r < rank; ++r)
      for (std::size_t m = 0; m < modes; ++m) s.terms.push_back(p.f_h.factor(m, r) * s.z[m]);
  } else {
    for (std::size_t m = 0; m < modes; ++m) {
      Vector sum = Vector::Zero(p.f_h.out_dim());
      for (std::size_t r = 0; r < rank; ++r) sum += p.f_h.factor(m, r) * s.z[m];
      s.terms.push_back(std::move(sum));
    }
  }
  s.y = vector_fusion_lowrank(s.z, p.f_h, p.fusion_bias.col(0), cfg.fusion.ordering);
  switch (cfg.residual) {
    case ResidualPolicy::reference_modality:
      s.y += s.z[cfg.reference_modality];
      break;
    case ResidualPolicy::mean_of_modalities: {
      Vector r = Vector::Zero(cfg.down_dim);
      for (const auto& z : s.z) r += z;
      s.y += r / static_cast<double>(modes);
      break;
    }
    case ResidualPolicy::none:
      break;
  }
  return s;
}

}  // namespace

Vector vf_forward(const ModalityBatch& h, const VfParams& p, const WanderConfig& cfg) {
  cfg.validate();
  return vf_state(h, p, cfg).y;
}

double vf_sample_loss_and_grad(const ModalityBatch& h, double label, const VfParams& p,
                               const WanderConfig& cfg, LossKind kind, VfParams& g) {
  const VfState s = vf_state(h, p, cfg);
  const std::size_t modes = cfg.modalities();
  const std::size_t rank = p.f_h.rank();
  const Vector logits = p.head.transpose() * s.y + p.head_bias.col(0);
  const LossGrad lg = loss_and_grad(logits, label, kind);
  g.head.noalias() += s.y * lg.dlogits.transpose();
  g.head_bias.col(0) += lg.dlogits;
  const Vector u = p.head * lg.dlogits;
  g.fusion_bias.col(0) += u;

  std::vector<Vector> dz(modes, Vector::Zero(cfg.down_dim));
  if (cfg.fusion.ordering == Ordering::exact) {
    for (std::size_t r = 0; r < rank; ++r) {
      for (std::size_t m = 0; m < modes; ++m) {
        Vector gm = u;
        for (std::size_t o = 0; o < modes; ++o)
          if (o != m) gm.array() *= s.terms[r * modes + o].array();
        g.f_h.factor(m, r).noalias() += gm * s.z[m].transpose();
        dz[m].noalias() += p.f_h.factor(m, r).transpose() * gm;
      }
    }
  } else {
    for (std::size_t m = 0; m < modes; ++m) {
      Vector gm = u;
      for (std::size_t o = 0; o < modes; ++o)
        if (o != m) gm.array() *= s.terms[o].array();
      const Matrix dw = gm * s.z[m].transpose();
      for (std::size_t r = 0; r < rank; ++r) g.f_h.factor(m, r) += dw;
      dz[m].noalias() += p.f_h.rank_sum(m).transpose() * gm;
    }
  }
  switch (cfg.residual) {
    case ResidualPolicy::reference_modality:
      dz[cfg.reference_modality] += u;
      break;
    case ResidualPolicy::mean_of_modalities:
      for (auto& d : dz) d += u / static_cast<double>(modes);
      break;
    case ResidualPolicy::none:
      break;
  }
  for (std::size_t m = 0; m < modes; ++m) {
    const Vector dpre = dz[m].cwiseProduct(
        s.pre[m].unaryExpr([&](double x) { return activate_derivative(cfg.nonlinearity, x); }));
    g.down[m].noalias() += h[m].row(0).transpose() * dpre.transpose();
    g.down_bias[m].col(0) += dpre;
  }
  return lg.loss;
}

double vf_sample_loss(const ModalityBatch& h, double label, const VfParams& p,
                      const WanderConfig& cfg, LossKind kind) {
  const Vector y = vf_forward(h, p, cfg);
  return loss_and_grad(p.head.transpose() * y + p.head_bias.col(0), label, kind).loss;
}

// ---------------------------------------------------------------------------
// Training loop

nlohmann::json TrainReport::to_json(bool redact_timings) const {
  nlohmann::json loss = nlohmann::json::array(), train_acc = nlohmann::json::array(),
                 held_acc = nlohmann::json::array(), lr = nlohmann::json::array();
  for (const auto& e : epochs) {
    loss.push_back(e.loss);
    train_acc.push_back(e.train_accuracy);
    held_acc.push_back(e.heldout_accuracy);
    lr.push_back(e.learning_rate);
  }
  nlohmann::json j = {
      {"model", model},
      {"epochs",
       {{"loss", loss}, {"train_accuracy", train_acc}, {"heldout_accuracy", held_acc},
        {"learning_rate", lr}}},
      {"final",
       {{"init_heldout_accuracy", init_heldout_accuracy},
        {"train_accuracy", final_train_accuracy},
        {"heldout_accuracy", final_heldout_accuracy}}},
      {"trainable_params", trainable_params},
      {"backbone_unchanged", backbone_unchanged},
      {"params_unchanged", params_unchanged},
      {"train_samples", train_samples},
      {"heldout_samples", heldout_samples},
      {"config", config},
  };
  if (redact_timings) {
    j["wall_time_ms"] = "redacted";
  } else {
    j["wall_time_ms"] = wall_time_ms;
  }
  return j;
}

namespace {

template <typename Params>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double weight_decay, const Params& like)
      : kind_(kind), weight_decay_(weight_decay) {
    if (kind_ == OptimizerKind::adam) {
      first_ = like;
      first_.set_zero();
      second_ = first_;
    }
  }

  void step(Params& p, const Params& g, double lr) {
    auto pb = p.blocks();
    const auto gb = g.blocks();
    if (weight_decay_ > 0.0)
      for (auto& b : pb) *b.value *= 1.0 - lr * weight_decay_;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t b = 0; b < pb.size(); ++b) *pb[b].value -= lr * *gb[b].value;
      return;
    }
    ++t_;
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    auto mb = first_.blocks();
    auto vb = second_.blocks();
    for (std::size_t b = 0; b < pb.size(); ++b) {
      Matrix& m = *mb[b].value;
      Matrix& v = *vb[b].value;
      const Matrix& grad = *gb[b].value;
      m = beta1 * m + (1.0 - beta1) * grad;
      v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
      const Matrix update =
          ((m.array() / c1) / ((v.array() / c2).sqrt() + eps)).matrix();
      *pb[b].value -= lr * update;
    }
  }

 private:
  OptimizerKind kind_;
  double weight_decay_;
  Params first_, second_;
  std::uint64_t t_ = 0;
};

template <typename Params>
bool params_equal(const Params& a, const Params& b) {
  const auto ab = a.blocks();
  const auto bb = b.blocks();
  for (std::size_t i = 0; i < ab.size(); ++i)
    if (*ab[i].value != *bb[i].value) return false;
  return true;
}

struct BatchResult {
  double loss = 0.0;
  std::size_t correct = 0;
};

// Model adaptor: loss_grad adds into g and reports correctness; logits for eval.
struct SfModel {
  const WanderConfig& cfg;
  LossKind kind;
  using Params = WanderParams;
  static constexpr const char* name = "SF";

  Params zeros() const { return WanderParams::zeros(cfg); }
  double loss_grad(const ModalityBatch& h, double label, const Params& p, Params& g,
                   bool& correct) const {
    const WanderState s = forward_state(h, p, cfg);
    const Vector flat = flatten_row_major(s.y);
    const Vector logits = p.head.transpose() * flat + p.head_bias.col(0);
    correct = prediction_correct(logits, label, kind);
    const LossGrad lg = loss_and_grad(logits, label, kind);
    g.head.noalias() += flat * lg.dlogits.transpose();
    g.head_bias.col(0) += lg.dlogits;
    const Matrix upstream = unflatten_row_major(p.head * lg.dlogits, s.y.rows(), s.y.cols());
    backward_from_state(s, h, p, cfg, upstream, g);
    return lg.loss;
  }
  Vector logits(const ModalityBatch& h, const Params& p) const {
    return head_forward(forward_state(h, p, cfg).y, p);
  }
  std::uint64_t count(const Params& p) const { return count_trainable(p); }
};

struct VfModel {
  const WanderConfig& cfg;
  LossKind kind;
  using Params = VfParams;
  static constexpr const char* name = "VF";

  Params zeros() const { return VfParams::zeros(cfg); }
  double loss_grad(const ModalityBatch& h, double label, const Params& p, Params& g,
                   bool& correct) const {
    const Vector y = vf_state(h, p, cfg).y;
    correct = prediction_correct(p.head.transpose() * y + p.head_bias.col(0), label, kind);
    return vf_sample_loss_and_grad(h, label, p, cfg, kind, g);
  }
  Vector logits(const ModalityBatch& h, const Params& p) const {
    return p.head.transpose() * vf_state(h, p, cfg).y + p.head_bias.col(0);
  }
  std::uint64_t count(const Params& p) const {
    std::uint64_t n = 0;
    for (const auto& b : p.blocks()) n += b.value->size();
    return n;
  }
};

template <typename Model>
double accuracy(const Model& model, const typename Model::Params& p,
                const std::vector<ModalityBatch>& features, const std::vector<double>& labels,
                const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  std::size_t correct = 0;
  for (auto i : idx) correct += prediction_correct(model.logits(features[i], p), labels[i], model.kind);
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

template <typename Model>
TrainReport run_training(const Model& model, const data::Dataset& ds, typename Model::Params& p,
                         const WanderConfig& wcfg, const TrainConfig& tcfg,
                         const FrozenBackbone& backbone) {
  using Params = typename Model::Params;
  const auto start = std::chrono::steady_clock::now();
  tcfg.validate();
  wcfg.validate();
  if (ds.size() < 2) throw InvalidArgument("training needs at least two samples");
  if (ds.dims != wcfg.fusion.dims || ds.lengths != wcfg.fusion.lengths) {
    throw InvalidArgument("dataset shapes do not match the adapter config");
  }
  if (tcfg.loss == LossKind::cross_entropy && ds.n_classes != wcfg.n_classes) {
    throw InvalidArgument("dataset class count does not match the head");
  }
  if (tcfg.loss == LossKind::mse && wcfg.n_classes != 1) {
    throw InvalidArgument("mse loss needs a single-output head");
  }

  const std::string backbone_before = backbone.bytes();
  std::vector<ModalityBatch> features;
  features.reserve(ds.size());
  for (const auto& x : ds.inputs) features.push_back(backbone.apply(x));

  std::mt19937_64 rng(tcfg.seed);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_hold = static_cast<std::size_t>(std::llround(tcfg.holdout_fraction * ds.size()));
  if (tcfg.holdout_fraction > 0.0) n_hold = std::clamp<std::size_t>(n_hold, 1, ds.size() - 1);
  std::vector<std::size_t> heldout(order.end() - n_hold, order.end());
  std::vector<std::size_t> train_idx(order.begin(), order.end() - n_hold);

  TrainReport report;
  report.model = Model::name;
  report.train_samples = train_idx.size();
  report.heldout_samples = heldout.size();
  report.trainable_params = model.count(p);
  report.config = {{"train", to_json(tcfg)}, {"adapter", to_json(wcfg)},
                   {"backbone_seed", backbone.seed()}};
  report.init_heldout_accuracy = accuracy(model, p, features, ds.labels, heldout);

  const Params initial = p;
  Optimizer<Params> opt(tcfg.optimizer, tcfg.weight_decay, p);
  const std::size_t workers = static_cast<std::size_t>(tcfg.threads);
  std::vector<Params> grads(workers, model.zeros());
  std::vector<BatchResult> partial(workers);

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr =
        tcfg.learning_rate *
        (tcfg.lr_step ? std::pow(tcfg.lr_gamma, static_cast<double>(epoch / tcfg.lr_step)) : 1.0);
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t begin = 0; begin < train_idx.size(); begin += tcfg.batch_size) {
      const std::size_t end = std::min(begin + tcfg.batch_size, train_idx.size());
      const std::size_t used = std::min(workers, end - begin);
      auto work = [&](std::size_t w) {
        grads[w].set_zero();
        partial[w] = {};
        const std::size_t lo = begin + (end - begin) * w / used;
        const std::size_t hi = begin + (end - begin) * (w + 1) / used;
        for (std::size_t k = lo; k < hi; ++k) {
          const std::size_t i = train_idx[k];
          bool ok = false;
          partial[w].loss += model.loss_grad(features[i], ds.labels[i], p, grads[w], ok);
          partial[w].correct += ok;
        }
      };
      if (used == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < used; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
      }
      Params& total = grads[0];
      for (std::size_t w = 1; w < used; ++w) {
        auto tb = total.blocks();
        const auto wb = grads[w].blocks();
        for (std::size_t b = 0; b < tb.size(); ++b) *tb[b].value += *wb[b].value;
      }
      for (std::size_t w = 0; w < used; ++w) {
        loss_sum += partial[w].loss;
        correct += partial[w].correct;
      }
      const double scale = 1.0 / static_cast<double>(end - begin);
      for (auto& b : total.blocks()) *b.value *= scale;
      opt.step(p, total, lr);
    }

    EpochStats stats;
    stats.loss = loss_sum / static_cast<double>(train_idx.size());
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_idx.size());
    stats.learning_rate = lr;
    if (!std::isfinite(stats.loss) || !p.all_finite()) {
      report.epochs.push_back(stats);
      throw Divergence("training diverged at epoch " + std::to_string(epoch + 1) +
                           " (epoch loss " + std::to_string(stats.loss) + ")",
                       report.to_json(true).dump());
    }
    stats.heldout_accuracy = accuracy(model, p, features, ds.labels, heldout);
    report.epochs.push_back(stats);
  }

  report.final_train_accuracy = accuracy(model, p, features, ds.labels, train_idx);
  report.final_heldout_accuracy = report.epochs.back().heldout_accuracy;
  report.params_unchanged = params_equal(initial, p);
  report.backbone_unchanged = backbone.bytes() == backbone_before;
  if (!report.backbone_unchanged) throw std::logic_error("frozen backbone was modified");
  report.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

TrainResult train(const data::Dataset& ds, WanderParams p, const WanderConfig& wcfg,
                  const TrainConfig& tcfg, const FrozenBackbone& backbone) {
  SfModel model{wcfg, tcfg.loss};
  TrainReport report = run_training(model, ds, p, wcfg, tcfg, backbone);
  return {std::move(report), std::move(p)};
}

TrainResult train(const data::Dataset& ds, const WanderConfig& wcfg, const TrainConfig& tcfg,
                  const FrozenBackbone& backbone) {
  std::mt19937_64 rng(tcfg.seed ^ 0x5f3759dfULL);
  return train(ds, WanderParams::init(wcfg, rng), wcfg, tcfg, backbone);
}

VfTrainResult train_vf_baseline(const data::Dataset& ds, VfParams p, const WanderConfig& wcfg,
                                const TrainConfig& tcfg, const FrozenBackbone& backbone) {
  VfModel model{wcfg, tcfg.loss};
  TrainReport report = run_training(model, ds, p, wcfg, tcfg, backbone);
  return {std::move(report), std::move(p)};
}

VfTrainResult train_vf_baseline(const data::Dataset& ds, const WanderConfig& wcfg,
                                const TrainConfig& tcfg, const FrozenBackbone& backbone) {
  std::mt19937_64 rng(tcfg.seed ^ 0x5f3759dfULL);
  return train_vf_baseline(ds, VfParams::init(wcfg, rng), wcfg, tcfg, backbone);
}

std::vector<RankSweepEntry> rank_sweep(const data::Dataset& ds, const WanderConfig& wcfg,
                                       const TrainConfig& tcfg, const FrozenBackbone& backbone,
                                       const std::vector<std::size_t>& ranks) {
  std::vector<RankSweepEntry> out;
  for (auto rank : ranks) {
    WanderConfig cfg = wcfg;
    cfg.fusion.rank_h = rank;
    cfg.fusion.rank_t = rank;
    RankSweepEntry e;
    e.rank = rank;
    std::uint64_t sum_len = 0;
    for (auto l : cfg.fusion.lengths) sum_len += l;
    e.fusion_params = rank * cfg.fusion.d_h * cfg.modalities() * cfg.down_dim +
                      rank * cfg.fusion.d_t * sum_len;
    auto result = train(ds, cfg, tcfg, backbone);
    e.trainable_params = result.report.trainable_params;
    e.report = std::move(result.report);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace wander
