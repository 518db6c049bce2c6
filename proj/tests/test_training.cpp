#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "wander/errors.hpp"
#include "wander/training.hpp"

using namespace wander;

namespace {

WanderConfig make_config(const Shape& lengths, const Shape& dims, std::size_t d, std::size_t d_t,
                         std::size_t rank, ResidualPolicy residual = ResidualPolicy::reference_modality) {
  WanderConfig cfg;
  cfg.fusion.lengths = lengths;
  cfg.fusion.dims = dims;
  cfg.fusion.d_h = d;
  cfg.fusion.d_t = d_t;
  cfg.fusion.rank_h = rank;
  cfg.fusion.rank_t = rank;
  cfg.down_dim = d;
  cfg.residual = residual;
  return cfg;
}

template <typename Params>
void randomize(Params& p, std::mt19937_64& rng) {
  for (auto& b : p.blocks()) *b.value = uniform_matrix(b.value->rows(), b.value->cols(), rng);
}

double max_abs_all(const WanderParams& p) {
  double m = 0.0;
  for (const auto& b : p.blocks()) m = std::max(m, b.value->cwiseAbs().maxCoeff());
  return m;
}

data::Dataset make_dataset(const Shape& lengths, const Shape& dims, data::Task task, std::size_t n,
                           std::uint64_t seed) {
  data::SynthSpec spec;
  spec.lengths = lengths;
  spec.dims = dims;
  spec.task = task;
  spec.n_samples = n;
  spec.seed = seed;
  return data::generate(spec);
}

}  // namespace

TEST_CASE("loss_and_grad") {
  SUBCASE("cross-entropy on equal logits") {
    const auto lg = loss_and_grad(Vector::Zero(2), 1.0, LossKind::cross_entropy);
    CHECK(lg.loss == doctest::Approx(std::log(2.0)));
    CHECK(lg.dlogits[0] == doctest::Approx(0.5));
    CHECK(lg.dlogits[1] == doctest::Approx(-0.5));
  }
  SUBCASE("cross-entropy is stable for large logits") {
    Vector z(3);
    z << 1000.0, 0.0, -1000.0;
    const auto lg = loss_and_grad(z, 0.0, LossKind::cross_entropy);
    CHECK(lg.loss == doctest::Approx(0.0));
    CHECK(std::isfinite(loss_and_grad(z, 2.0, LossKind::cross_entropy).loss));
  }
  SUBCASE("mse") {
    const auto lg = loss_and_grad(Vector::Constant(1, 3.0), 1.0, LossKind::mse);
    CHECK(lg.loss == 2.0);
    CHECK(lg.dlogits[0] == 2.0);
  }
  SUBCASE("bad labels") {
    CHECK_THROWS_AS(loss_and_grad(Vector::Zero(2), 2.0, LossKind::cross_entropy), InvalidArgument);
    CHECK_THROWS_AS(loss_and_grad(Vector::Zero(2), 0.5, LossKind::cross_entropy), InvalidArgument);
    CHECK_THROWS_AS(loss_and_grad(Vector::Zero(2), 0.0, LossKind::mse), InvalidArgument);
  }
  Vector z(3);
  z << 0.1, 2.0, -1.0;
  CHECK(prediction_correct(z, 1.0, LossKind::cross_entropy));
  CHECK_FALSE(prediction_correct(z, 0.0, LossKind::cross_entropy));
}

TEST_CASE("finite_difference_grad") {
  std::mt19937_64 rng(1);
  const auto cfg = make_config({2, 3}, {3, 2}, 2, 2, 2);
  WanderParams p = WanderParams::zeros(cfg);
  randomize(p, rng);
  SUBCASE("half squared norm gives the parameters back") {
    auto half_sq = [](const WanderParams& q) {
      double s = 0.0;
      for (const auto& b : q.blocks()) s += 0.5 * b.value->squaredNorm();
      return s;
    };
    const auto g = finite_difference_grad(half_sq, p, 1e-5);
    CHECK(max_gradient_error(g, p) < 1e-8);
  }
  SUBCASE("constant loss") {
    const auto g = finite_difference_grad([](const WanderParams&) { return 3.0; }, p, 1e-5);
    CHECK(max_abs_all(g) == 0.0);
  }
  SUBCASE("step must be positive") {
    CHECK_THROWS_AS(finite_difference_grad([](const WanderParams&) { return 0.0; }, p, 0.0),
                    InvalidArgument);
  }
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(2);
  SUBCASE("zero upstream") {
    const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
    WanderParams p = WanderParams::zeros(cfg);
    randomize(p, rng);
    const auto h = oracle::random_batch({3, 3}, {4, 4}, rng);
    CHECK(max_abs_all(backward(h, p, cfg, Matrix::Zero(2, 3))) == 0.0);
  }
  SUBCASE("non-finite upstream") {
    const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
    const WanderParams p = WanderParams::zeros(cfg);
    const auto h = oracle::random_batch({3, 3}, {4, 4}, rng);
    Matrix u = Matrix::Zero(2, 3);
    u(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(backward(h, p, cfg, u), InvalidArgument);
    CHECK_THROWS_AS(backward(h, p, cfg, Matrix::Zero(3, 3)), InvalidArgument);
  }
  SUBCASE("single-term bilinear case") {
    // M=1, l=1: y[t,k] = w_t[t] (z . w_h[k]); dw_t[t] = sum_k U[t,k] (z . w_h[k]),
    // dw_h[k] = sum_t U[t,k] w_t[t] z.
    auto cfg = make_config({1}, {3}, 2, 3, 1, ResidualPolicy::none);
    cfg.fusion.d_h = 4;
    WanderParams p = WanderParams::zeros(cfg);
    randomize(p, rng);
    const auto h = oracle::random_batch({1}, {3}, rng);
    const Matrix u = uniform_matrix(3, 4, rng);
    const auto g = backward(h, p, cfg, u);
    const Vector z = down_project(h, p, cfg).z[0].row(0).transpose();
    const Matrix wh = p.f_h.factor(0, 0);  // 4 x 2
    const Vector wt = p.f_t.factor(0, 0).col(0);
    for (int t = 0; t < 3; ++t) {
      double expected = 0.0;
      for (int k = 0; k < 4; ++k) expected += u(t, k) * wh.row(k).dot(z);
      CHECK(g.f_t.factor(0, 0)(t, 0) == doctest::Approx(expected).epsilon(1e-12));
    }
    for (int k = 0; k < 4; ++k)
      for (int j = 0; j < 2; ++j) {
        double expected = 0.0;
        for (int t = 0; t < 3; ++t) expected += u(t, k) * wt[t] * z[j];
        CHECK(g.f_h.factor(0, 0)(k, j) == doctest::Approx(expected).epsilon(1e-12));
      }
    CHECK(g.fusion_bias == u);
  }
}

TEST_CASE("backward matches finite differences of a linear probe") {
  std::mt19937_64 rng(3);
  const auto cfg = make_config({3, 3, 3}, {4, 4, 4}, 3, 2, 2);
  WanderParams p = WanderParams::zeros(cfg);
  randomize(p, rng);
  const auto h = oracle::random_batch({3, 3, 3}, {4, 4, 4}, rng);
  const Matrix u = uniform_matrix(2, 3, rng);
  const auto analytic = backward(h, p, cfg, u);
  const auto numeric = finite_difference_grad(
      [&](const WanderParams& q) { return (wander_forward(h, q, cfg).array() * u.array()).sum(); }, p,
      1e-5);
  CHECK(max_gradient_error(analytic, numeric) < 1e-5);
}

TEST_CASE("sample gradients match finite differences over random configs") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> small(1, 3);
  const std::size_t ranks[] = {1, 2, 4};
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t modes = 2 + trial % 2;
    Shape lengths, dims;
    for (std::size_t m = 0; m < modes; ++m) {
      lengths.push_back(small(rng) + 1);
      dims.push_back(small(rng) + 1);
    }
    const std::size_t d = small(rng);
    auto cfg = make_config(lengths, dims, d, 1, ranks[trial % 3],
                           static_cast<ResidualPolicy>(trial % 3));
    cfg.fusion.rank_t = ranks[(trial + 1) % 3];
    cfg.nonlinearity = trial % 2 ? Nonlinearity::gelu : Nonlinearity::relu;
    cfg.fusion.ordering = trial % 4 == 3 ? Ordering::paper_literal : Ordering::exact;
    cfg.n_classes = 3;
    WanderParams p = WanderParams::zeros(cfg);
    randomize(p, rng);
    const auto h = oracle::random_batch(lengths, dims, rng);
    const double label = static_cast<double>(trial % 3);
    GradientBundle g = WanderParams::zeros(cfg);
    sample_loss_and_grad(h, label, p, cfg, LossKind::cross_entropy, g);
    const auto fd = finite_difference_grad(
        [&](const WanderParams& q) { return sample_loss(h, label, q, cfg, LossKind::cross_entropy); },
        p, 1e-5);
    const double err = max_gradient_error(g, fd);
    worst = std::max(worst, err);
    CHECK(err < 1e-5);
  }
  MESSAGE("worst relative gradient error " << worst);
}

TEST_CASE("paper-literal gradients differ from exact ones") {
  std::mt19937_64 rng(5);
  auto cfg = make_config({2, 3}, {3, 2}, 2, 2, 2);
  WanderParams p = WanderParams::zeros(cfg);
  randomize(p, rng);
  const auto h = oracle::random_batch({2, 3}, {3, 2}, rng);
  const Matrix u = uniform_matrix(2, 2, rng);
  const auto exact = backward(h, p, cfg, u);
  cfg.fusion.ordering = Ordering::paper_literal;
  const auto literal = backward(h, p, cfg, u);
  CHECK(max_gradient_error(exact, literal) > 1e-3);
}

TEST_CASE("vector-fusion baseline") {
  std::mt19937_64 rng(6);
  auto cfg = make_config({3, 4}, {4, 3}, 3, 2, 2);
  VfParams p = VfParams::zeros(cfg);
  randomize(p, rng);
  const auto h = oracle::random_batch({3, 4}, {4, 3}, rng);

  SUBCASE("forward uses only the first tokens") {
    std::vector<Matrix> seqs{h[0], h[1]};
    seqs[0].bottomRows(2).setRandom();
    seqs[1].bottomRows(3).setRandom();
    CHECK(vf_forward(ModalityBatch(seqs), p, cfg) == vf_forward(h, p, cfg));
  }
  SUBCASE("forward matches the explicit tensor") {
    std::vector<Vector> z;
    for (std::size_t m = 0; m < 2; ++m) {
      Vector pre = p.down[m].transpose() * h[m].row(0).transpose() + p.down_bias[m].col(0);
      z.push_back(pre.cwiseMax(0.0));
    }
    const auto w = cp_reconstruct(p.f_h);
    const Vector expected = vector_fusion_oracle(z, w, p.fusion_bias.col(0)) + z[0];
    CHECK(max_relative_error(vf_forward(h, p, cfg), expected) < 1e-12);
  }
  SUBCASE("gradients match finite differences") {
    for (auto ordering : {Ordering::exact, Ordering::paper_literal}) {
      cfg.fusion.ordering = ordering;
      cfg.nonlinearity = Nonlinearity::gelu;
      VfParams g = VfParams::zeros(cfg);
      vf_sample_loss_and_grad(h, 1.0, p, cfg, LossKind::cross_entropy, g);
      const auto fd = finite_difference_grad<VfParams>(
          [&](const VfParams& q) { return vf_sample_loss(h, 1.0, q, cfg, LossKind::cross_entropy); },
          p, 1e-5);
      const auto a = g.blocks();
      const auto b = fd.blocks();
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max(1.0, a[i].value->cwiseAbs().maxCoeff());
        CHECK((*a[i].value - *b[i].value).cwiseAbs().maxCoeff() / scale < 1e-5);
      }
    }
  }
}

TEST_CASE("frozen backbone") {
  const FrozenBackbone bb({3, 4}, 9);
  const FrozenBackbone same({3, 4}, 9);
  const FrozenBackbone other({3, 4}, 10);
  CHECK(bb.bytes() == same.bytes());
  CHECK(bb.bytes() != other.bytes());
  std::mt19937_64 rng(1);
  const auto x = oracle::random_batch({2, 5}, {3, 4}, rng);
  const auto out = bb.apply({x[0], x[1]});
  CHECK(out.dims() == Shape{3, 4});
  CHECK(out.lengths() == Shape{2, 5});
  CHECK(out[1].cwiseAbs().maxCoeff() < 1.0);
  CHECK_THROWS_AS(bb.apply({x[0]}), InvalidArgument);
}

TEST_CASE("training with zero learning rate leaves everything unchanged") {
  const auto ds = make_dataset({3, 3}, {4, 4}, data::Task::multiplicative_interaction, 60, 1);
  const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.0;
  const FrozenBackbone bb(ds.dims, 2);
  std::mt19937_64 rng(3);
  const WanderParams init = WanderParams::init(cfg, rng);
  const auto result = train(ds, init, cfg, tc, bb);
  CHECK(result.report.params_unchanged);
  CHECK(result.report.backbone_unchanged);
  CHECK(result.report.final_heldout_accuracy == result.report.init_heldout_accuracy);
  const auto a = init.blocks();
  const auto b = result.params.blocks();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].value == *b[i].value);

  const auto vf = train_vf_baseline(ds, cfg, tc, bb);
  CHECK(vf.report.params_unchanged);
  CHECK(vf.report.final_heldout_accuracy == vf.report.init_heldout_accuracy);
}

TEST_CASE("separable unimodal task is fitted") {
  const auto ds = make_dataset({3}, {4}, data::Task::separable_unimodal, 400, 3);
  auto cfg = make_config({3}, {4}, 8, 3, 3, ResidualPolicy::none);
  TrainConfig tc;
  tc.epochs = 50;
  tc.seed = 4;
  const FrozenBackbone bb(ds.dims, 5);
  const auto result = train(ds, cfg, tc, bb);
  const auto& epochs = result.report.epochs;
  REQUIRE(epochs.size() == 50);
  MESSAGE("train accuracy " << result.report.final_train_accuracy);
  CHECK(result.report.final_train_accuracy >= 0.99);
  CHECK(epochs.back().loss < epochs.front().loss);
  CHECK(result.report.backbone_unchanged);
  CHECK_FALSE(result.report.params_unchanged);
}

TEST_CASE("training is deterministic") {
  const auto ds = make_dataset({3, 3}, {4, 4}, data::Task::multiplicative_interaction, 120, 6);
  const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
  TrainConfig tc;
  tc.epochs = 4;
  tc.seed = 7;
  const FrozenBackbone bb(ds.dims, 8);
  const auto a = train(ds, cfg, tc, bb).report.to_json(true).dump();
  const auto b = train(ds, cfg, tc, bb).report.to_json(true).dump();
  CHECK(a == b);
  tc.seed = 8;
  CHECK(train(ds, cfg, tc, bb).report.to_json(true).dump() != a);

  SUBCASE("threaded batches are reproducible") {
    tc.threads = 3;
    const auto t1 = train(ds, cfg, tc, bb).report.to_json(true);
    const auto t2 = train(ds, cfg, tc, bb).report.to_json(true);
    CHECK(t1 == t2);
  }
}

TEST_CASE("divergence aborts with a report") {
  const auto ds = make_dataset({3, 3}, {4, 4}, data::Task::multiplicative_interaction, 40, 9);
  const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
  TrainConfig tc;
  tc.epochs = 5;
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 1e200;
  const FrozenBackbone bb(ds.dims, 1);
  try {
    train(ds, cfg, tc, bb);
    FAIL("expected divergence");
  } catch (const Divergence& e) {
    const auto report = nlohmann::json::parse(e.report());
    CHECK(report.at("model") == "SF");
    CHECK(report.at("epochs").at("loss").size() >= 1);
  }
}

TEST_CASE("train rejects mismatched inputs") {
  const auto ds = make_dataset({3, 3}, {4, 4}, data::Task::multiplicative_interaction, 40, 9);
  const FrozenBackbone bb(ds.dims, 1);
  TrainConfig tc;
  CHECK_THROWS_AS(train(ds, make_config({3, 2}, {4, 4}, 3, 2, 2), tc, bb), InvalidArgument);
  tc.batch_size = 0;
  CHECK_THROWS_AS(train(ds, make_config({3, 3}, {4, 4}, 3, 2, 2), tc, bb), InvalidArgument);
}

TEST_CASE("sequence fusion beats first-token fusion on cross-token interactions") {
  const auto ds = make_dataset({6, 6}, {8, 8}, data::Task::multiplicative_interaction, 2000, 1);
  const auto cfg = make_config({6, 6}, {8, 8}, 8, 2, 2);
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 1;
  const FrozenBackbone bb(ds.dims, 101);
  const auto sf = train(ds, cfg, tc, bb).report;
  const auto vf = train_vf_baseline(ds, cfg, tc, bb).report;
  MESSAGE("SF " << sf.final_heldout_accuracy << " VF " << vf.final_heldout_accuracy);
  CHECK(sf.final_heldout_accuracy >= 0.85);
  CHECK(vf.final_heldout_accuracy <= 0.60);
}

TEST_CASE("first-token task: vector fusion keeps up") {
  const auto ds = make_dataset({6, 6}, {8, 8}, data::Task::first_token_only, 2000, 1);
  const auto cfg = make_config({6, 6}, {8, 8}, 8, 2, 2);
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 1;
  const FrozenBackbone bb(ds.dims, 101);
  const auto sf = train(ds, cfg, tc, bb).report;
  const auto vf = train_vf_baseline(ds, cfg, tc, bb).report;
  MESSAGE("SF " << sf.final_heldout_accuracy << " VF " << vf.final_heldout_accuracy);
  CHECK(std::abs(sf.final_heldout_accuracy - vf.final_heldout_accuracy) <= 0.02);
}

TEST_CASE("rank sweep reports linear fusion parameter counts") {
  const auto ds = make_dataset({3, 3}, {4, 4}, data::Task::multiplicative_interaction, 60, 2);
  const auto cfg = make_config({3, 3}, {4, 4}, 3, 2, 2);
  TrainConfig tc;
  tc.epochs = 2;
  const FrozenBackbone bb(ds.dims, 3);
  const auto sweep = rank_sweep(ds, cfg, tc, bb, {1, 2, 4});
  REQUIRE(sweep.size() == 3);
  const auto per_rank = sweep[0].fusion_params;
  CHECK(per_rank == 3 * 2 * 3 + 2 * 6);
  CHECK(sweep[1].fusion_params == 2 * per_rank);
  CHECK(sweep[2].fusion_params == 4 * per_rank);
  CHECK(sweep[2].trainable_params - sweep[1].trainable_params ==
        2 * (sweep[1].trainable_params - sweep[0].trainable_params));
}

TEST_CASE("report json") {
  TrainReport r;
  r.model = "SF";
  r.epochs.push_back({0.5, 0.6, 0.7, 0.01});
  r.wall_time_ms = 12.5;
  const auto j = r.to_json();
  CHECK(j.at("epochs").at("loss")[0] == 0.5);
  CHECK(j.at("wall_time_ms") == 12.5);
  CHECK(r.to_json(true).at("wall_time_ms") == "redacted");
}
