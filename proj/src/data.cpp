#include "wander/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "wander/dtf1.hpp"
#include "wander/errors.hpp"

namespace wander::data {

namespace {

Vector unit_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector v(n);
  do {
    for (auto& x : v) x = normal(rng);
  } while (v.norm() == 0.0);
  return v / v.norm();
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

}  // namespace

std::string_view to_string(Task t) {
  switch (t) {
    case Task::multiplicative_interaction:
      return "multiplicative-interaction";
    case Task::first_token_only:
      return "first-token-only";
    case Task::separable_unimodal:
      return "separable-unimodal";
  }
  return "";
}

std::string_view to_string(LabelType t) {
  switch (t) {
    case LabelType::binary:
      return "binary";
    case LabelType::k_class:
      return "k-class";
    case LabelType::scalar:
      return "scalar";
  }
  return "";
}

Task parse_task(std::string_view s) {
  if (s == "multiplicative-interaction") return Task::multiplicative_interaction;
  if (s == "first-token-only") return Task::first_token_only;
  if (s == "separable-unimodal") return Task::separable_unimodal;
  throw InvalidArgument("unknown task \"" + std::string(s) + "\"");
}

LabelType parse_label_type(std::string_view s) {
  if (s == "binary") return LabelType::binary;
  if (s == "k-class") return LabelType::k_class;
  if (s == "scalar") return LabelType::scalar;
  throw InvalidArgument("unknown label type \"" + std::string(s) + "\"");
}

void SynthSpec::validate() const {
  if (dims.empty() || dims.size() != lengths.size()) {
    throw InvalidArgument("synthetic spec needs matching, non-empty dims and lengths");
  }
  for (auto d : dims)
    if (d == 0) throw InvalidArgument("dims must be >= 1");
  for (auto l : lengths)
    if (l == 0) throw InvalidArgument("lengths must be >= 1");
  if (n_samples < 2) throw InvalidArgument("n_samples must be >= 2");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw InvalidArgument("noise_std must be finite and >= 0");
  }
  if (label_type == LabelType::k_class && (n_classes < 2 || n_classes > n_samples)) {
    throw InvalidArgument("k-class labels need 2 <= n_classes <= n_samples");
  }
}

nlohmann::json to_json(const SynthSpec& s) {
  return {{"lengths", s.lengths},
          {"dims", s.dims},
          {"n_samples", s.n_samples},
          {"task", std::string(to_string(s.task))},
          {"label_type", std::string(to_string(s.label_type))},
          {"n_classes", s.n_classes},
          {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.lengths = j.at("lengths").get<Shape>();
    s.dims = j.at("dims").get<Shape>();
    s.n_samples = j.at("n_samples").get<std::size_t>();
    s.task = parse_task(j.at("task").get<std::string>());
    s.label_type = parse_label_type(j.at("label_type").get<std::string>());
    s.n_classes = j.at("n_classes").get<std::size_t>();
    s.noise_std = j.at("noise_std").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

HiddenStructure draw_hidden(const SynthSpec& spec, std::mt19937_64& rng) {
  HiddenStructure h;
  for (std::size_t m = 0; m < spec.modalities(); ++m) {
    h.u.push_back(unit_vector(spec.dims[m], rng));
    h.v.push_back(unit_vector(spec.lengths[m], rng));
  }
  const Vector w = unit_vector(spec.lengths[0] * spec.dims[0], rng);
  h.separable_weight = Matrix(spec.lengths[0], spec.dims[0]);
  for (std::size_t i = 0; i < spec.lengths[0]; ++i)
    for (std::size_t j = 0; j < spec.dims[0]; ++j)
      h.separable_weight(i, j) = w[i * spec.dims[0] + j];
  return h;
}

double score(const HiddenStructure& hidden, Task task, const std::vector<Matrix>& sample) {
  switch (task) {
    case Task::multiplicative_interaction: {
      double s = 1.0;
      for (std::size_t m = 0; m < sample.size(); ++m) {
        s *= hidden.v[m].dot(sample[m] * hidden.u[m]);
      }
      return s;
    }
    case Task::first_token_only: {
      double s = 1.0;
      for (std::size_t m = 0; m < sample.size(); ++m) s *= sample[m].row(0).dot(hidden.u[m]);
      return s;
    }
    case Task::separable_unimodal:
      return (sample[0].array() * hidden.separable_weight.array()).sum();
  }
  return 0.0;
}

std::vector<double> label_scores(const std::vector<double>& scores, LabelType type,
                                 std::size_t n_classes) {
  const std::size_t n = scores.size();
  if (type == LabelType::scalar) return scores;
  std::vector<double> labels(n, 0.0);
  if (type == LabelType::binary) {
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (std::size_t i = 0; i < n; ++i) labels[i] = scores[i] > median ? 1.0 : 0.0;
    return labels;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  for (std::size_t rank = 0; rank < n; ++rank) {
    labels[order[rank]] = static_cast<double>(rank * n_classes / n);
  }
  return labels;
}

Dataset generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const HiddenStructure hidden = draw_hidden(spec, rng);
  std::normal_distribution<double> normal;

  Dataset ds;
  ds.lengths = spec.lengths;
  ds.dims = spec.dims;
  ds.label_type = spec.label_type;
  ds.n_classes = spec.label_type == LabelType::binary   ? 2
                 : spec.label_type == LabelType::scalar ? 1
                                                        : spec.n_classes;
  ds.meta = {{"spec", to_json(spec)}};
  ds.inputs.reserve(spec.n_samples);
  ds.scores.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    std::vector<Matrix> sample;
    for (std::size_t m = 0; m < spec.modalities(); ++m) {
      sample.push_back(normal_matrix(spec.lengths[m], spec.dims[m], rng));
    }
    double s = score(hidden, spec.task, sample);
    if (spec.noise_std > 0.0) s += spec.noise_std * normal(rng);
    ds.scores.push_back(s);
    ds.inputs.push_back(std::move(sample));
  }
  ds.labels = label_scores(ds.scores, spec.label_type, ds.n_classes);
  return ds;
}

std::string encode_dataset(const Dataset& ds) {
  if (ds.size() == 0) throw InvalidArgument("refusing to save an empty dataset");
  if (ds.inputs.size() != ds.labels.size()) {
    throw InvalidArgument("dataset has mismatched input and label counts");
  }
  dtf1::Container c;
  c.records.reserve(ds.size() * ds.modalities() + 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t m = 0; m < ds.modalities(); ++m) {
      c.records.push_back({"x." + std::to_string(i) + ".m" + std::to_string(m),
                           DenseTensor::from_matrix(ds.inputs[i][m])});
    }
  }
  c.records.push_back({"y", DenseTensor({ds.size()}, ds.labels)});
  c.meta = ds.meta;
  c.meta["kind"] = "wander-dataset";
  c.meta["lengths"] = ds.lengths;
  c.meta["dims"] = ds.dims;
  c.meta["label_type"] = std::string(to_string(ds.label_type));
  c.meta["n_classes"] = ds.n_classes;
  return dtf1::encode_container(c);
}

Dataset decode_dataset(std::string_view bytes) {
  dtf1::Container c = dtf1::decode_container(bytes);
  Dataset ds;
  try {
    ds.lengths = c.meta.at("lengths").get<Shape>();
    ds.dims = c.meta.at("dims").get<Shape>();
    ds.label_type = parse_label_type(c.meta.at("label_type").get<std::string>());
    ds.n_classes = c.meta.at("n_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest is incomplete: ") + e.what(), 0);
  }
  ds.meta = c.meta;
  for (const char* key : {"kind", "lengths", "dims", "label_type", "n_classes"}) ds.meta.erase(key);

  const std::size_t modes = ds.dims.size();
  if (modes == 0 || c.records.empty() || (c.records.size() - 1) % modes != 0) {
    throw FormatError("dataset record count does not match its modality count", 0);
  }
  const std::size_t n = (c.records.size() - 1) / modes;
  const auto& y = c.records.back();
  if (y.name != "y" || y.tensor.shape() != Shape{n}) {
    throw FormatError("dataset label record \"y\" missing or mis-shaped", 0);
  }
  ds.labels.assign(y.tensor.data().begin(), y.tensor.data().end());
  ds.inputs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < modes; ++m) {
      const auto& rec = c.records[i * modes + m];
      const std::string expected = "x." + std::to_string(i) + ".m" + std::to_string(m);
      if (rec.name != expected || rec.tensor.shape() != Shape{ds.lengths[m], ds.dims[m]}) {
        throw FormatError("dataset record \"" + rec.name + "\" where \"" + expected +
                              "\" with shape (" + std::to_string(ds.lengths[m]) + "," +
                              std::to_string(ds.dims[m]) + ") was expected",
                          0);
      }
      ds.inputs[i].push_back(rec.tensor.to_matrix());
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  dtf1::write_bytes(path, encode_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(dtf1::read_bytes(path));
}

}  // namespace wander::data
