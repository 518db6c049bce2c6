#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/adapter.hpp"
#include "wander/data.hpp"
#include "wander/fusion.hpp"
#include "wander/training.hpp"

namespace wander::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Bad flags, unreadable or malformed config, invalid parameter combination.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Format { json, csv, human };

// Everything one invocation needs. Defaults depend on the command; see
// RunConfig::defaults.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  int threads = 1;
  Format format = Format::json;
  std::string out;
  bool redact_timings = false;

  // fusion / adapter
  Shape dims;
  Shape lengths;
  std::size_t d_h = 8;
  std::size_t d_t = 4;
  std::size_t rank_h = 8;
  std::size_t rank_t = 8;
  Ordering ordering = Ordering::exact;
  std::size_t down_dim = 8;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  ResidualPolicy residual = ResidualPolicy::reference_modality;
  std::size_t reference_modality = 0;

  // training
  TrainConfig train;
  bool compare_vf = false;
  std::vector<std::size_t> rank_sweep;
  std::optional<std::uint64_t> backbone_seed;  // default: derived from seed
  std::string checkpoint;                      // write trained params here

  // data
  std::size_t n_samples = 2000;
  data::Task task = data::Task::multiplicative_interaction;
  data::LabelType label_type = data::LabelType::binary;
  std::size_t n_classes = 2;
  double noise_std = 0.0;
  std::string dataset;       // load instead of generating
  std::string save_dataset;  // write the generated dataset

  // bench / count-params
  std::vector<std::string> methods{"SF-OP", "SF-VF", "SF"};
  std::string sweep_param = "rank";
  std::optional<std::vector<std::size_t>> sweep;
  bool params_only = false;
  bool include_biases = false;
  std::size_t repetitions = 7;
  std::size_t warmups = 2;
  std::uint64_t entry_ceiling = kDefaultEntryCeiling;

  // verify
  std::size_t verify_configs = 100;
  std::size_t grad_configs = 20;
  double fd_step = 1e-5;

  static RunConfig defaults(const std::string& command);
  // Builds from a flat object; unknown keys and type mismatches throw UsageError.
  static RunConfig from_json(const nlohmann::json& j);
  // Echo used in reports. Output path excluded.
  nlohmann::json to_json() const;

  FusionConfig fusion() const;
  WanderConfig wander() const;
  data::SynthSpec synth() const;
  void validate() const;
};

// Seeded random-config equivalence sweep: SF vs SF-OP and SF-VF vs SF.
struct EquivalenceSummary {
  std::size_t configs = 0;
  double max_sf_vs_oracle = 0.0;
  double max_vf_vs_sf = 0.0;
  FusionConfig worst_sf;
  FusionConfig worst_vf;
};
EquivalenceSummary equivalence_sweep(std::uint64_t seed, std::size_t n, Ordering ordering,
                                     int threads = 1);

// Analytic sample gradients vs central differences over random adapter configs.
struct GradientSummary {
  std::size_t configs = 0;
  double max_error = 0.0;
  nlohmann::json worst;
};
GradientSummary gradient_sweep(std::uint64_t seed, std::size_t n, double step, Ordering ordering);

nlohmann::json to_json(const FusionConfig& c);

// Entry point shared by the executable, tests and bindings. args excludes
// the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wander::cli
