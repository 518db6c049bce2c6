#include "wander/bench.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "wander/errors.hpp"

namespace wander::bench {

namespace {

Count product(const Shape& xs) {
  Count n = 1;
  for (auto x : xs) n *= x;
  return n;
}

Count sum(const Shape& xs) {
  Count n = 0;
  for (auto x : xs) n += x;
  return n;
}

std::string join(const Shape& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(xs[i]);
  }
  return out;
}

void require_fits(const char* what, Count entries, std::uint64_t ceiling) {
  if (entries > ceiling) {
    throw ResourceLimit(what, entries > UINT64_MAX ? UINT64_MAX : static_cast<std::uint64_t>(entries),
                        ceiling);
  }
}

}  // namespace

std::string to_string(Count c) {
  if (c == 0) return "0";
  std::string out;
  while (c > 0) {
    out.push_back(static_cast<char>('0' + static_cast<int>(c % 10)));
    c /= 10;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

nlohmann::json count_json(Count c) {
  if (c <= UINT64_MAX) return static_cast<std::uint64_t>(c);
  return to_string(c);
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::sf_op:
      return "SF-OP";
    case Method::sf_vf:
      return "SF-VF";
    case Method::sf:
      return "SF";
  }
  return "SF";
}

Method parse_method(std::string_view s) {
  if (s == "SF-OP" || s == "sf-op") return Method::sf_op;
  if (s == "SF-VF" || s == "sf-vf") return Method::sf_vf;
  if (s == "SF" || s == "sf") return Method::sf;
  throw InvalidArgument("unknown method \"" + std::string(s) + "\"");
}

Count count_params(Method method, const FusionConfig& cfg, bool include_biases) {
  cfg.validate();
  const Count d_h = cfg.d_h, d_t = cfg.d_t;
  Count n = 0;
  switch (method) {
    case Method::sf_op:
      n = d_h * product(cfg.dims) + d_t * product(cfg.lengths);
      break;
    case Method::sf_vf:
      n = cfg.rank_h * d_h * sum(cfg.dims) + d_t * product(cfg.lengths);
      break;
    case Method::sf:
      n = cfg.rank_h * d_h * sum(cfg.dims) + cfg.rank_t * d_t * sum(cfg.lengths);
      break;
  }
  if (include_biases) n += d_t * d_h;
  return n;
}

Count estimate_flops(Method method, const FusionConfig& cfg) {
  cfg.validate();
  const Count modes = cfg.modalities();
  const Count d_h = cfg.d_h, d_t = cfg.d_t, r_h = cfg.rank_h, r_t = cfg.rank_t;
  const Count tuples = product(cfg.lengths);
  const Count temporal = 2 * d_t * tuples * d_h;
  switch (method) {
    case Method::sf_op: {
      Count outer = 0, partial = cfg.dims[0];
      for (std::size_t k = 1; k < cfg.dims.size(); ++k) {
        partial *= cfg.dims[k];
        outer += partial;
      }
      return tuples * (outer + 2 * product(cfg.dims) * d_h) + temporal;
    }
    case Method::sf_vf:
      return tuples * (r_h * (2 * d_h * sum(cfg.dims) + (modes - 1) * d_h) + (r_h - 1) * d_h) +
             temporal;
    case Method::sf: {
      Count proj = 0, mix = 0;
      for (std::size_t m = 0; m < cfg.dims.size(); ++m) {
        proj += 2 * Count(cfg.lengths[m]) * cfg.dims[m] * d_h;
        mix += 2 * d_t * cfg.lengths[m] * d_h;
      }
      const Count pairs = r_t * r_h;
      const Count combine = cfg.ordering == Ordering::exact
                                ? pairs * (modes - 1) * d_t * d_h + (pairs - 1) * d_t * d_h
                                : modes * (pairs - 1) * d_t * d_h + (modes - 1) * d_t * d_h;
      return r_h * proj + pairs * mix + combine;
    }
  }
  return 0;
}

Count peak_bytes(Method method, const FusionConfig& cfg) {
  cfg.validate();
  const Count d_h = cfg.d_h, d_t = cfg.d_t;
  const Count out = d_t * d_h;
  const Count h_t = product(cfg.lengths) * d_h;  // fused sequence tensor
  Count entries = 0;
  switch (method) {
    case Method::sf_op:
      // dense W_h, W_t; H_t; one outer product, its projection, the tokens
      entries = count_params(method, cfg) + h_t + product(cfg.dims) + d_h + sum(cfg.dims) + out;
      break;
    case Method::sf_vf:
      // factors, dense W_t; H_t; per-tuple tokens plus term/projection/acc
      entries = count_params(method, cfg) + h_t + sum(cfg.dims) + 3 * d_h + out;
      break;
    case Method::sf:
      // factors; cached token projections; acc/term/product per block
      entries = count_params(method, cfg) + Count(cfg.rank_h) * sum(cfg.lengths) * d_h + 3 * out + out;
      break;
  }
  return entries * sizeof(double);
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw InvalidArgument("median of an empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

nlohmann::json CostReport::to_json(bool redact_timings) const {
  nlohmann::json j = {
      {"method", std::string(bench::to_string(method))},
      {"config",
       {{"dims", config.dims},
        {"lengths", config.lengths},
        {"d_h", config.d_h},
        {"d_t", config.d_t},
        {"rank_h", config.rank_h},
        {"rank_t", config.rank_t},
        {"ordering", std::string(wander::to_string(config.ordering))}}},
      {"param_count", count_json(param_count)},
      {"flops_forward", count_json(flops)},
      {"peak_alloc_bytes", count_json(peak_alloc_bytes)},
      {"repetitions", repetitions},
      {"warmups", warmups},
      {"threads", threads},
      {"status", status},
  };
  if (!message.empty()) j["message"] = message;
  if (redact_timings && wall_time_ms) {
    j["wall_time_ms"] = "redacted";
    j["samples_ms"] = "redacted";
  } else {
    j["wall_time_ms"] = wall_time_ms ? nlohmann::json(*wall_time_ms) : nlohmann::json(nullptr);
    j["samples_ms"] = samples_ms;
  }
  return j;
}

std::string CostReport::csv_header() {
  return "method,M,dims,lengths,d_h,d_t,R_h,R_t,params,flops,ms,bytes";
}

std::string CostReport::to_csv_row(bool redact_timings) const {
  std::ostringstream os;
  os << bench::to_string(method) << ',' << config.modalities() << ',' << join(config.dims, ';')
     << ',' << join(config.lengths, ';') << ',' << config.d_h << ',' << config.d_t << ','
     << config.rank_h << ',' << config.rank_t << ',' << to_string(param_count) << ','
     << to_string(flops) << ',';
  if (wall_time_ms) {
    if (redact_timings) {
      os << "redacted";
    } else {
      os << *wall_time_ms;
    }
  }
  os << ',' << to_string(peak_alloc_bytes);
  return os.str();
}

CostReport analyze(Method method, const FusionConfig& cfg) {
  CostReport r;
  r.method = method;
  r.config = cfg;
  r.param_count = count_params(method, cfg);
  r.flops = estimate_flops(method, cfg);
  r.peak_alloc_bytes = peak_bytes(method, cfg);
  r.status = "params-only";
  return r;
}

CostReport measure(Method method, const FusionConfig& cfg, const MeasureOptions& opts) {
  if (opts.repetitions == 0) throw InvalidArgument("measure needs at least one repetition");
  if (opts.threads < 1) throw InvalidArgument("threads must be >= 1");
  CostReport r = analyze(method, cfg);
  r.status = "ok";
  r.repetitions = opts.repetitions;
  r.warmups = opts.warmups;
  r.threads = method == Method::sf ? opts.threads : 1;

  try {
    if (method != Method::sf) {
      require_fits("dense W_t", Count(cfg.d_t) * product(cfg.lengths), opts.entry_ceiling);
      require_fits("fused sequence tensor H_t", Count(cfg.d_h) * product(cfg.lengths),
                   opts.entry_ceiling);
    }
    if (method == Method::sf_op) {
      require_fits("dense W_h", Count(cfg.d_h) * product(cfg.dims), opts.entry_ceiling);
    }

    std::mt19937_64 rng(opts.seed);
    std::vector<Matrix> seqs;
    for (std::size_t m = 0; m < cfg.modalities(); ++m) {
      seqs.push_back(uniform_matrix(cfg.lengths[m], cfg.dims[m], rng));
    }
    const ModalityBatch h(std::move(seqs));
    const auto f_h = CpFactorSet::uniform(cfg.rank_h, cfg.d_h, cfg.dims, rng);
    const auto f_t = CpFactorSet::uniform(cfg.rank_t, cfg.d_t, cfg.lengths, rng);
    DenseTensor w_h, w_t;
    if (method != Method::sf) w_t = output_mode_first(cp_reconstruct(f_t));
    if (method == Method::sf_op) w_h = cp_reconstruct(f_h);

    auto run = [&] {
      switch (method) {
        case Method::sf_op:
          return sequence_fusion_oracle(h, w_h, w_t, opts.entry_ceiling);
        case Method::sf_vf:
          return sequence_fusion_vf(h, f_h, w_t, cfg.ordering, opts.entry_ceiling);
        case Method::sf:
          break;
      }
      return sequence_fusion_lowrank(h, f_h, f_t, cfg.ordering, opts.threads);
    };

    volatile double sink = 0.0;
    for (std::size_t i = 0; i < opts.warmups; ++i) sink = sink + run()(0, 0);
    for (std::size_t i = 0; i < opts.repetitions; ++i) {
      const auto start = std::chrono::steady_clock::now();
      const Matrix y = run();
      const auto stop = std::chrono::steady_clock::now();
      sink = sink + y(0, 0);
      r.samples_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    r.wall_time_ms = median(r.samples_ms);
  } catch (const ResourceLimit& e) {
    r.status = "resource-limit";
    r.message = e.what();
    r.samples_ms.clear();
    r.wall_time_ms.reset();
  }
  return r;
}

}  // namespace wander::bench
