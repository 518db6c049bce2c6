#include <doctest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "wander/dtf1.hpp"
#include "wander/errors.hpp"
#include "wander/tensor.hpp"

using namespace wander;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(v.size());
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

}  // namespace

TEST_CASE("outer_product of singletons is the scalar one") {
  std::vector<Vector> vs{vec({1}), vec({1}), vec({1})};
  const auto t = outer_product(vs);
  CHECK(t.shape() == Shape{1, 1, 1});
  CHECK(t[0] == 1.0);
}

TEST_CASE("outer_product of basis vectors") {
  std::vector<Vector> vs{vec({1, 0}), vec({0, 1})};
  const auto t = outer_product(vs);
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.at({0, 1}) == 1.0);
  CHECK(t.at({0, 0}) == 0.0);
  CHECK(t.at({1, 0}) == 0.0);
  CHECK(t.at({1, 1}) == 0.0);
}

TEST_CASE("outer_product hand-computed 2x3") {
  std::vector<Vector> vs{vec({1, 2}), vec({3, 4, 5})};
  const auto t = outer_product(vs);
  const std::vector<double> expected{3, 4, 5, 6, 8, 10};
  CHECK(std::vector<double>(t.data().begin(), t.data().end()) == expected);
}

TEST_CASE("outer_product rejects empty input") {
  std::vector<Vector> none;
  CHECK_THROWS_AS(outer_product(none), InvalidArgument);
  std::vector<Vector> with_empty{vec({1}), Vector()};
  CHECK_THROWS_AS(outer_product(with_empty), InvalidArgument);
}

TEST_CASE("outer_product matches per-index products exhaustively up to 64 entries") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> order_dist(1, 4), ext_dist(1, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> extents;
    const std::size_t order = order_dist(rng);
    for (std::size_t i = 0; i < order; ++i) extents.push_back(ext_dist(rng));
    if (oracle::count(extents) > 64) continue;
    std::vector<Vector> vs;
    for (auto e : extents) vs.push_back(uniform_matrix(e, 1, rng).col(0));
    const auto t = outer_product(vs);
    REQUIRE(t.shape() == extents);
    for (std::size_t p = 0; p < t.size(); ++p) {
      const auto idx = oracle::unflatten(p, extents);
      double prod = 1.0;
      for (std::size_t m = 0; m < idx.size(); ++m) prod *= vs[m][idx[m]];
      CHECK(t[p] == doctest::Approx(prod).epsilon(1e-15));
    }
  }
}

TEST_CASE("cp_reconstruct single-mode identity") {
  std::vector<std::vector<Matrix>> factors{{Matrix::Identity(2, 2)}};
  const CpFactorSet f(1, 2, {2}, factors);
  const auto t = cp_reconstruct(f);
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.to_matrix() == Matrix::Identity(2, 2));
}

TEST_CASE("cp_reconstruct rank one equals outer product of factor rows") {
  Matrix a(1, 2), b(1, 2);
  a << 1, 2;
  b << 3, 4;
  const CpFactorSet f(1, 1, {2, 2}, {{a}, {b}});
  const auto t = cp_reconstruct(f);
  CHECK(t.shape() == Shape{2, 2, 1});
  std::vector<Vector> rows{vec({1, 2}), vec({3, 4})};
  const auto op = outer_product(rows);
  for (std::size_t p = 0; p < op.size(); ++p) CHECK(t[p] == op[p]);
}

TEST_CASE("cp_reconstruct matches brute-force triple loop") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const auto f = CpFactorSet::uniform(2, 3, {2, 4}, rng);
    const auto t = cp_reconstruct(f);
    CHECK(t.shape() == Shape{2, 4, 3});
    // sum of two rank-one reconstructions, entry by entry
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t k = 0; k < 3; ++k) {
          const double expected = f.factor(0, 0)(k, i) * f.factor(1, 0)(k, j) +
                                  f.factor(0, 1)(k, i) * f.factor(1, 1)(k, j);
          CHECK(t.at({i, j, k}) == doctest::Approx(expected).epsilon(1e-14));
        }
  }
}

TEST_CASE("cp_reconstruct is linear in one modality's factor stack") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto f = CpFactorSet::uniform(3, 2, {3, 2, 2}, rng);
    const auto base = cp_reconstruct(f);
    const double alpha = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
    for (std::size_t r = 0; r < f.rank(); ++r) f.factor(0, r) *= alpha;
    const auto scaled = cp_reconstruct(f);
    for (std::size_t p = 0; p < base.size(); ++p) {
      CHECK(std::abs(scaled[p] - alpha * base[p]) <= 1e-12 * std::max(1.0, std::abs(base[p])));
    }
  }
}

TEST_CASE("CpFactorSet rejects inconsistent stacks") {
  CHECK_THROWS_AS(CpFactorSet(0, 1, {1}), InvalidArgument);
  CHECK_THROWS_AS(CpFactorSet(1, 1, {1}, {{Matrix::Zero(2, 1)}}), InvalidArgument);
  CHECK_THROWS_AS(CpFactorSet(2, 1, {1}, {{Matrix::Zero(1, 1)}}), InvalidArgument);
  Matrix bad = Matrix::Zero(1, 1);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(CpFactorSet(1, 1, {1}, {{bad}}), InvalidArgument);
}

TEST_CASE("hadamard") {
  Matrix a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  SUBCASE("ones is the identity") {
    std::vector<Matrix> ms{Matrix::Ones(2, 2), a};
    CHECK(hadamard(ms) == a);
  }
  SUBCASE("hand-computed") {
    std::vector<Matrix> ms{a, b};
    Matrix expected(2, 2);
    expected << 5, 12, 21, 32;
    CHECK(hadamard(ms) == expected);
  }
  SUBCASE("single element") {
    std::vector<Matrix> ms{a};
    CHECK(hadamard(ms) == a);
  }
  SUBCASE("shape mismatch") {
    std::vector<Matrix> ms{a, Matrix::Ones(2, 3)};
    CHECK_THROWS_AS(hadamard(ms), InvalidArgument);
  }
}

TEST_CASE("hadamard is commutative and associative under reordering") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Matrix> ms;
    for (int i = 0; i < 4; ++i) ms.push_back(uniform_matrix(3, 2, rng));
    const Matrix base = hadamard(ms);
    std::vector<Matrix> shuffled = ms;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<Matrix> grouped{hadamard(std::span(shuffled).first(2)),
                                hadamard(std::span(shuffled).subspan(2))};
    CHECK(max_abs(hadamard(shuffled) - base) <= 1e-12);
    CHECK(max_abs(hadamard(grouped) - base) <= 1e-12);
  }
}

TEST_CASE("contract_last_modes matrix-vector case") {
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  const DenseTensor t = DenseTensor::from_matrix(a);
  const DenseTensor w({3, 1}, {1, -1, 2});
  const auto out = contract_last_modes(t, w, 1);
  CHECK(out.shape() == Shape{2, 1});
  CHECK(out[0] == 5.0);
  CHECK(out[1] == 11.0);
}

TEST_CASE("contract_last_modes against identity returns input") {
  std::mt19937_64 rng(8);
  const DenseTensor t = DenseTensor::from_matrix(uniform_matrix(3, 4, rng));
  const DenseTensor eye = DenseTensor::from_matrix(Matrix::Identity(4, 4));
  CHECK(contract_last_modes(t, eye, 1) == t);
}

TEST_CASE("contract_last_modes two-mode contraction matches nested loops") {
  std::mt19937_64 rng(13);
  DenseTensor t({2, 2, 2}), w({2, 2, 3});
  for (auto& v : t.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (auto& v : w.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto out = contract_last_modes(t, w, 2);
  CHECK(out.shape() == Shape{2, 3});
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) s += t.at({a, i, j}) * w.at({i, j, c});
      CHECK(out.at({a, c}) == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("contract_last_modes rejects mismatched modes") {
  const DenseTensor t({2, 3}), w({2, 3});
  CHECK_THROWS_AS(contract_last_modes(t, w, 1), InvalidArgument);
  CHECK_THROWS_AS(contract_last_modes(t, w, 3), InvalidArgument);
  CHECK_THROWS_AS(contract_last_modes(t, w, 0), InvalidArgument);
}

TEST_CASE("DenseTensor invariants") {
  CHECK_THROWS_AS(DenseTensor(Shape{}), InvalidArgument);
  CHECK_THROWS_AS(DenseTensor(Shape{2, 0}), InvalidArgument);
  CHECK_THROWS_AS(DenseTensor({2, 2}, {1, 2, 3}), InvalidArgument);
  DenseTensor ok({1, 1, 1});
  CHECK(ok.size() == 1);
}

TEST_CASE("DTF1 encoding is bit-exact little-endian") {
  const DenseTensor t({1, 2}, {1.0, -2.0});
  const std::string bytes = dtf1::encode(t);
  // magic, u32 order, 2 x u64 extents, 2 x f64
  REQUIRE(bytes.size() == 4 + 4 + 16 + 16);
  CHECK(bytes.substr(0, 4) == "DTF1");
  CHECK(bytes[4] == 2);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);
  CHECK(bytes[16] == 2);
  // 1.0 = 0x3FF0000000000000, little-endian
  CHECK(static_cast<unsigned char>(bytes[24 + 7]) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[24 + 6]) == 0xF0);
  CHECK(static_cast<unsigned char>(bytes[32 + 7]) == 0xC0);
  CHECK(dtf1::decode(bytes) == t);
}

TEST_CASE("DTF1 round trip preserves arbitrary tensors") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const std::size_t order = 1 + rng() % 4;
    for (std::size_t i = 0; i < order; ++i) shape.push_back(1 + rng() % 3);
    DenseTensor t(shape);
    for (auto& v : t.data()) v = std::normal_distribution<double>()(rng);
    CHECK(dtf1::decode(dtf1::encode(t)) == t);
  }
}

TEST_CASE("DTF1 decode reports malformed input with offsets") {
  const std::string good = dtf1::encode(DenseTensor({2}, {1.0, 2.0}));
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    try {
      dtf1::decode(bad);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("truncated payload") {
    for (std::size_t cut = 0; cut < good.size(); ++cut) {
      CHECK_THROWS_AS(dtf1::decode(std::string_view(good).substr(0, cut)), FormatError);
    }
  }
  SUBCASE("zero extent") {
    std::string bad = good;
    bad[8] = 0;
    CHECK_THROWS_AS(dtf1::decode(bad), FormatError);
  }
  SUBCASE("trailing bytes") { CHECK_THROWS_AS(dtf1::decode(good + "x"), FormatError); }
}

TEST_CASE("DTF1 container round trip and validation") {
  dtf1::Container c;
  c.records.push_back({"a", DenseTensor({2, 2}, {1, 2, 3, 4})});
  c.records.push_back({"b", DenseTensor({3}, {5, 6, 7})});
  c.meta = {{"kind", "test"}};
  const std::string bytes = dtf1::encode_container(c);
  const auto back = dtf1::decode_container(bytes);
  CHECK(back.records.size() == 2);
  CHECK(back.get("a") == c.get("a"));
  CHECK(back.get("b") == c.get("b"));
  CHECK(back.meta["kind"] == "test");
  CHECK(dtf1::encode_container(back) == bytes);
  for (std::size_t cut = 0; cut + 1 < bytes.size(); cut += 7) {
    CHECK_THROWS_AS(dtf1::decode_container(std::string_view(bytes).substr(0, cut)), FormatError);
  }
}

TEST_CASE("output_mode_first moves the trailing mode to the front") {
  DenseTensor t({2, 3, 4});
  for (std::size_t p = 0; p < t.size(); ++p) t[p] = static_cast<double>(p);
  const auto u = output_mode_first(t);
  CHECK(u.shape() == Shape{4, 2, 3});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(u.at({k, i, j}) == t.at({i, j, k}));
}
