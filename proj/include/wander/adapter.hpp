#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/dtf1.hpp"
#include "wander/fusion.hpp"
#include "wander/tensor.hpp"

namespace wander {

enum class Nonlinearity { relu, gelu };
enum class ResidualPolicy { reference_modality, mean_of_modalities, none };

std::string_view to_string(Nonlinearity n);
std::string_view to_string(ResidualPolicy p);
Nonlinearity parse_nonlinearity(std::string_view s);
ResidualPolicy parse_residual_policy(std::string_view s);

double activate(Nonlinearity n, double x);
double activate_derivative(Nonlinearity n, double x);

struct WanderConfig {
  FusionConfig fusion;  // dims are the backbone feature dims d_m
  std::size_t down_dim = 8;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  ResidualPolicy residual = ResidualPolicy::reference_modality;
  std::size_t reference_modality = 0;
  std::size_t n_classes = 2;

  std::size_t modalities() const { return fusion.modalities(); }
  // Throws InvalidConfiguration for residual/shape conflicts.
  void validate() const;
  // True when some d_m is smaller than the down dim.
  bool down_dim_exceeds_inputs() const;
};

nlohmann::json to_json(const WanderConfig& cfg);
WanderConfig wander_config_from_json(const nlohmann::json& j);

// A named, contiguous block of trainable scalars inside WanderParams.
struct ParamBlock {
  std::string name;
  Matrix* value;
};
struct ConstParamBlock {
  std::string name;
  const Matrix* value;
};

// Trainable state of one adapter block plus its task head. Vectors are
// stored as single-column matrices so every field is a Matrix block.
struct WanderParams {
  std::vector<Matrix> down;       // d_m x d
  std::vector<Matrix> down_bias;  // d x 1
  CpFactorSet f_h;                // out d_h, dims (d, .., d)
  CpFactorSet f_t;                // out d_t, dims l_m
  Matrix fusion_bias;             // d_t x d_h
  Matrix head;                    // (d_t * d_h) x n_classes
  Matrix head_bias;               // n_classes x 1

  static WanderParams zeros(const WanderConfig& cfg);
  // Fan-in scaled uniform down projections, f_h entries scaled so the
  // rank-summed product keeps unit-order variance, f_t random except for
  // the reference modality which starts at zero (the fusion branch is then
  // exactly zero at init while every factor still receives gradient).
  static WanderParams init(const WanderConfig& cfg, std::mt19937_64& rng);

  std::vector<ParamBlock> blocks();
  std::vector<ConstParamBlock> blocks() const;

  // Elementwise helpers over all blocks, used by optimizers and checks.
  void set_zero();
  void axpy(double alpha, const WanderParams& x);
  bool all_finite() const;
  double max_abs() const;
};

using GradientBundle = WanderParams;

// Sequences after Down and the nonlinearity, with the pre-activations kept
// for backward.
struct DownProjected {
  std::vector<Matrix> pre;  // l_m x d
  ModalityBatch z;
};

DownProjected down_project(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg);

Matrix residual_term(const ModalityBatch& z, const WanderConfig& cfg);

// Wander(h) = residual(z) + SF(z) + fusion_bias with z = act(h Down + b).
Matrix wander_forward(const ModalityBatch& h, const WanderParams& p, const WanderConfig& cfg,
                      int threads = 1);

// Row-major flatten of the fused matrix followed by the affine head.
Vector head_forward(const Matrix& fused, const WanderParams& p);

std::uint64_t count_trainable(const WanderParams& p);
// Closed form for configs built by WanderParams::zeros/init.
std::uint64_t count_trainable_formula(const WanderConfig& cfg);

// Checkpoint container: records named after ParamBlock names, config in meta.
dtf1::Container to_checkpoint(const WanderParams& p, const WanderConfig& cfg);
std::pair<WanderParams, WanderConfig> from_checkpoint(const dtf1::Container& c);

}  // namespace wander
