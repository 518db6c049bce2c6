#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wander/fusion.hpp"

namespace wander::bench {

// Counts reach ~3.5e11 at d=768 and overflow 64 bits for larger
// configs, so all accounting is 128-bit.
using Count = unsigned __int128;

std::string to_string(Count c);
// Number when it fits in 64 bits, decimal string otherwise.
nlohmann::json count_json(Count c);

enum class Method { sf_op, sf_vf, sf };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);
inline constexpr Method kAllMethods[] = {Method::sf_op, Method::sf_vf, Method::sf};

// Fusion weights only. include_biases adds the d_t x d_h output bias.
Count count_params(Method method, const FusionConfig& cfg, bool include_biases = false);

// Floating-point operations (a multiply-add counts 2) of one forward pass
// as the kernels are written:
//   SF-OP  prod(l) * (outer + 2 prod(d) d_h) + 2 d_t prod(l) d_h,
//          outer = sum_{k=2..M} prod(d_1..d_k)
//   SF-VF  prod(l) * (R_h (2 d_h sum(d) + (M-1) d_h) + (R_h-1) d_h) + 2 d_t prod(l) d_h
//   SF     R_h sum_m 2 l_m d_m d_h + R_t R_h sum_m 2 d_t l_m d_h + combine
//          combine(exact)   = R_t R_h (M-1) d_t d_h + (R_t R_h - 1) d_t d_h
//          combine(literal) = M (R_t R_h - 1) d_t d_h + (M-1) d_t d_h
Count estimate_flops(Method method, const FusionConfig& cfg);

// Upper bound on bytes held by weights plus intermediate buffers while one
// forward pass runs (inputs excluded).
Count peak_bytes(Method method, const FusionConfig& cfg);

struct MeasureOptions {
  std::size_t repetitions = 7;
  std::size_t warmups = 2;
  int threads = 1;  // SF kernel only
  std::uint64_t seed = 0;
  std::uint64_t entry_ceiling = kDefaultEntryCeiling;
};

struct CostReport {
  Method method = Method::sf;
  FusionConfig config;
  Count param_count = 0;
  Count flops = 0;
  Count peak_alloc_bytes = 0;
  std::optional<double> wall_time_ms;  // median; empty when not timed
  std::vector<double> samples_ms;
  std::size_t repetitions = 0;
  std::size_t warmups = 0;
  int threads = 1;
  std::string status = "ok";  // ok | params-only | resource-limit
  std::string message;

  nlohmann::json to_json(bool redact_timings = false) const;
  static std::string csv_header();
  std::string to_csv_row(bool redact_timings = false) const;
};

// Counts only; no kernels run.
CostReport analyze(Method method, const FusionConfig& cfg);

// Times the forward pass after warmups and reports the median. A config
// over the entry ceiling yields status "resource-limit" instead of throwing.
CostReport measure(Method method, const FusionConfig& cfg, const MeasureOptions& opts = {});

double median(std::vector<double> xs);

}  // namespace wander::bench
