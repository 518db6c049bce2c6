#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/tensor.hpp"

namespace wander::data {

enum class Task { multiplicative_interaction, first_token_only, separable_unimodal };
enum class LabelType { binary, k_class, scalar };

std::string_view to_string(Task t);
std::string_view to_string(LabelType t);
Task parse_task(std::string_view s);
LabelType parse_label_type(std::string_view s);

struct SynthSpec {
  Shape lengths{6, 6, 6};
  Shape dims{16, 16, 16};
  std::size_t n_samples = 2000;
  Task task = Task::multiplicative_interaction;
  LabelType label_type = LabelType::binary;
  std::size_t n_classes = 2;  // k-class only
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  std::size_t modalities() const { return dims.size(); }
  void validate() const;
};

nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

// Hidden directions behind the labels. u[m] is unit-norm in R^{d_m}, v[m]
// unit-norm in R^{l_m}; the separable task uses a single unit-norm weight
// over the flattened first modality.
struct HiddenStructure {
  std::vector<Vector> u;
  std::vector<Vector> v;
  Matrix separable_weight;
};

struct Dataset {
  Shape lengths;
  Shape dims;
  LabelType label_type = LabelType::binary;
  std::size_t n_classes = 2;
  std::vector<std::vector<Matrix>> inputs;  // [sample][modality], l_m x d_m
  std::vector<double> labels;
  std::vector<double> scores;  // latent scores before labeling; empty after load
  nlohmann::json meta = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
  std::size_t modalities() const { return dims.size(); }
};

HiddenStructure draw_hidden(const SynthSpec& spec, std::mt19937_64& rng);
double score(const HiddenStructure& hidden, Task task, const std::vector<Matrix>& sample);

// Labels from latent scores: binary is a median split, k-class splits by
// rank into k equal-count bins, scalar passes the score through.
std::vector<double> label_scores(const std::vector<double>& scores, LabelType type,
                                 std::size_t n_classes);

Dataset generate(const SynthSpec& spec);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);
std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::string_view bytes);

}  // namespace wander::data
