#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/adapter.hpp"
#include "wander/data.hpp"

namespace wander {

enum class OptimizerKind { sgd, adam };
enum class LossKind { cross_entropy, mse };

std::string_view to_string(OptimizerKind k);
std::string_view to_string(LossKind k);
OptimizerKind parse_optimizer(std::string_view s);
LossKind parse_loss(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  OptimizerKind optimizer = OptimizerKind::adam;
  LossKind loss = LossKind::cross_entropy;
  std::uint64_t seed = 0;
  // Step decay: lr *= lr_gamma every lr_step epochs; lr_step == 0 disables.
  std::size_t lr_step = 20;
  double lr_gamma = 0.5;
  // Decoupled L2 shrinkage applied every step (lr * weight_decay * p).
  double weight_decay = 0.0;
  double holdout_fraction = 0.2;
  int threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

// Fixed random per-modality affine map followed by tanh. Never trained.
class FrozenBackbone {
 public:
  FrozenBackbone() = default;
  FrozenBackbone(const Shape& dims, std::uint64_t seed, double gain = 0.5);

  ModalityBatch apply(const std::vector<Matrix>& raw) const;
  // Byte image of every parameter, for bit-identity checks.
  std::string bytes() const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::vector<Matrix> weight_;  // d_m x d_m
  std::vector<Matrix> bias_;    // 1 x d_m
  std::uint64_t seed_ = 0;
};

// Gradient of wander_forward w.r.t. every adapter parameter for the given
// upstream d_t x d_h gradient. Head entries of the bundle are zero.
GradientBundle backward(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg,
                        const Matrix& upstream);

struct LossGrad {
  double loss = 0.0;
  Vector dlogits;
};
// Cross-entropy takes the class index as label; MSE uses 0.5 (logit - label)^2.
LossGrad loss_and_grad(const Vector& logits, double label, LossKind kind);
bool prediction_correct(const Vector& logits, double label, LossKind kind);

// Full sample loss through head and adapter. Gradients are added to grad.
double sample_loss_and_grad(const ModalityBatch& h, double label, const WanderParams& p,
                            const WanderConfig& cfg, LossKind kind, GradientBundle& grad);
double sample_loss(const ModalityBatch& h, double label, const WanderParams& p,
                   const WanderConfig& cfg, LossKind kind);

// Central differences over every scalar of every block.
template <typename Params>
Params finite_difference_grad(const std::function<double(const Params&)>& loss_fn, const Params& p,
                              double step) {
  Params probe = p;
  Params grad = p;
  grad.set_zero();
  auto probe_blocks = probe.blocks();
  auto grad_blocks = grad.blocks();
  for (std::size_t b = 0; b < probe_blocks.size(); ++b) {
    Matrix& value = *probe_blocks[b].value;
    Matrix& g = *grad_blocks[b].value;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + step;
      const double up = loss_fn(probe);
      value.data()[i] = saved - step;
      const double down = loss_fn(probe);
      value.data()[i] = saved;
      g.data()[i] = (up - down) / (2.0 * step);
    }
  }
  return grad;
}
GradientBundle finite_difference_grad(const std::function<double(const WanderParams&)>& loss_fn,
                                      const WanderParams& p, double step);

// Largest |a - b| / max(|a|, |b|, 1) over all entries.
double max_gradient_error(const WanderParams& analytic, const WanderParams& numeric);

// Vector-fusion baseline: fuses only the first token of each down-projected
// sequence with vector_fusion_lowrank, then a linear head.
struct VfParams {
  std::vector<Matrix> down;       // d_m x d
  std::vector<Matrix> down_bias;  // d x 1
  CpFactorSet f_h;                // out d_h, dims (d, .., d)
  Matrix fusion_bias;             // d_h x 1
  Matrix head;                    // d_h x n_classes
  Matrix head_bias;               // n_classes x 1

  static VfParams zeros(const WanderConfig& cfg);
  static VfParams init(const WanderConfig& cfg, std::mt19937_64& rng);
  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;
  void set_zero();
  bool all_finite() const;
};

Vector vf_forward(const ModalityBatch& h, const VfParams& p, const WanderConfig& cfg);
double vf_sample_loss_and_grad(const ModalityBatch& h, double label, const VfParams& p,
                               const WanderConfig& cfg, LossKind kind, VfParams& grad);
double vf_sample_loss(const ModalityBatch& h, double label, const VfParams& p,
                      const WanderConfig& cfg, LossKind kind);

struct EpochStats {
  double loss = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainReport {
  std::string model;  // "SF" or "VF"
  std::vector<EpochStats> epochs;
  double init_heldout_accuracy = 0.0;
  double final_train_accuracy = 0.0;
  double final_heldout_accuracy = 0.0;
  std::uint64_t trainable_params = 0;
  bool backbone_unchanged = false;
  bool params_unchanged = false;
  std::size_t train_samples = 0;
  std::size_t heldout_samples = 0;
  double wall_time_ms = 0.0;
  nlohmann::json config;

  nlohmann::json to_json(bool redact_timings = false) const;
};

struct TrainResult {
  TrainReport report;
  WanderParams params;
};

struct VfTrainResult {
  TrainReport report;
  VfParams params;
};

// Trains the adapter and head on backbone features; the backbone is only
// read. Throws Divergence on a non-finite epoch loss.
TrainResult train(const data::Dataset& ds, WanderParams p, const WanderConfig& wcfg,
                  const TrainConfig& tcfg, const FrozenBackbone& backbone);
// Same, starting from WanderParams::init seeded with tcfg.seed.
TrainResult train(const data::Dataset& ds, const WanderConfig& wcfg, const TrainConfig& tcfg,
                  const FrozenBackbone& backbone);

VfTrainResult train_vf_baseline(const data::Dataset& ds, const WanderConfig& wcfg,
                                const TrainConfig& tcfg, const FrozenBackbone& backbone);
VfTrainResult train_vf_baseline(const data::Dataset& ds, VfParams p, const WanderConfig& wcfg,
                                const TrainConfig& tcfg, const FrozenBackbone& backbone);

struct RankSweepEntry {
  std::size_t rank = 0;
  std::uint64_t fusion_params = 0;  // R_h d_h M d + R_t d_t sum(l_m)
  std::uint64_t trainable_params = 0;
  TrainReport report;
};

// Trains one adapter per rank with R_h = R_t = rank.
std::vector<RankSweepEntry> rank_sweep(const data::Dataset& ds, const WanderConfig& wcfg,
                                       const TrainConfig& tcfg, const FrozenBackbone& backbone,
                                       const std::vector<std::size_t>& ranks);

}  // namespace wander
