#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <random>
#include <sstream>

#include "wander/bench.hpp"
#include "wander/cli.hpp"
#include "wander/errors.hpp"
#include "wander/fusion.hpp"

namespace py = pybind11;
using namespace wander;

namespace {

using Factors = std::vector<std::vector<Matrix>>;  // [modality][rank], out_dim x dim

CpFactorSet to_factor_set(const Factors& f) {
  if (f.empty() || f[0].empty()) throw InvalidArgument("factors need at least one modality and rank");
  Shape dims;
  for (const auto& stack : f) dims.push_back(static_cast<std::size_t>(stack.at(0).cols()));
  return CpFactorSet(f[0].size(), static_cast<std::size_t>(f[0][0].rows()), dims, f);
}

Factors from_factor_set(const CpFactorSet& s) {
  Factors f(s.modalities());
  for (std::size_t m = 0; m < s.modalities(); ++m)
    for (std::size_t r = 0; r < s.rank(); ++r) f[m].push_back(s.factor(m, r));
  return f;
}

FusionConfig fusion_config(const Shape& dims, const Shape& lengths, std::size_t d_h, std::size_t d_t,
                           std::size_t rank_h, std::size_t rank_t) {
  FusionConfig c;
  c.dims = dims;
  c.lengths = lengths;
  c.d_h = d_h;
  c.d_t = d_t;
  c.rank_h = rank_h;
  c.rank_t = rank_t;
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-rank multimodal sequence fusion kernels and CLI entry point.";

  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<InvalidConfiguration>(m, "InvalidConfiguration", PyExc_ValueError);
  py::register_exception<ResourceLimit>(m, "ResourceLimit", PyExc_MemoryError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command line with args; returns (exit_code, stdout, stderr).");

  m.def(
      "count_params",
      [](const std::string& method, const Shape& dims, const Shape& lengths, std::size_t d_h, std::size_t d_t,
         std::size_t rank_h, std::size_t rank_t, bool include_biases) {
        const auto c = fusion_config(dims, lengths, d_h, d_t, rank_h, rank_t);
        const auto n = bench::count_params(bench::parse_method(method), c, include_biases);
        return py::int_(py::str(bench::to_string(n)));
      },
      py::arg("method"), py::arg("dims"), py::arg("lengths"), py::arg("d_h"), py::arg("d_t"),
      py::arg("rank_h") = 8, py::arg("rank_t") = 8, py::arg("include_biases") = false);

  m.def(
      "random_factors",
      [](std::size_t rank, std::size_t out_dim, const Shape& dims, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return from_factor_set(CpFactorSet::uniform(rank, out_dim, dims, rng));
      },
      py::arg("rank"), py::arg("out_dim"), py::arg("dims"), py::arg("seed") = 0,
      "Uniform factors as a [modality][rank] list of out_dim x dim arrays.");

  m.def(
      "sequence_fusion",
      [](const std::vector<Matrix>& sequences, const Factors& f_h, const Factors& f_t, const std::string& ordering,
         int threads) {
        return sequence_fusion_lowrank(ModalityBatch(sequences), to_factor_set(f_h), to_factor_set(f_t),
                                       parse_ordering(ordering), threads);
      },
      py::arg("sequences"), py::arg("f_h"), py::arg("f_t"), py::arg("ordering") = "exact", py::arg("threads") = 1,
      "Low-rank fusion of M sequences (l_m x d_m) into a d_t x d_h matrix.");

  m.def(
      "sequence_fusion_oracle",
      [](const std::vector<Matrix>& sequences, const Factors& f_h, const Factors& f_t) {
        const auto w_h = cp_reconstruct(to_factor_set(f_h));
        const auto w_t = output_mode_first(cp_reconstruct(to_factor_set(f_t)));
        return sequence_fusion_oracle(ModalityBatch(sequences), w_h, w_t);
      },
      py::arg("sequences"), py::arg("f_h"), py::arg("f_t"),
      "Explicit outer-product fusion on the reconstructed dense weights.");
}
