#include "doctest.h"
#include "gradcheck.hpp"

#include "emotoken/emotion_anchor.hpp"

#include "json.hpp"

#include <set>

using namespace emotoken;

namespace {

/// Every (i, j) with |i - r| <= x, |j - c| <= y inside the grid, row-major.
std::vector<std::pair<int, int>> brute_region(int r, int c, int x, int y, int h, int w) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (std::abs(i - r) <= x && std::abs(j - c) <= y) out.emplace_back(i, j);
  return out;
}

AnchorConfig toy_anchor() {
  AnchorConfig c;
  c.vocab = 5;
  c.width = 8;
  c.heads = 2;
  c.component_dim = 3;
  c.ext_row = 1;
  c.ext_col = 1;
  c.ffn_mult = 2;
  c.seed = 17;
  return c;
}

Landmarks constant_landmarks(double x, double y) {
  Landmarks lm(kLandmarkCount, 2);
  lm.col(0).setConstant(x);
  lm.col(1).setConstant(y);
  return lm;
}

}  // namespace

TEST_SUITE("anchor") {

TEST_CASE("centre (8,8) with x = y = 5 selects 121 positions") {
  const auto r = region_at(8, 8, 5, 5, 16, 16);
  CHECK(r.positions.size() == 121);
  CHECK(r.positions == brute_region(8, 8, 5, 5, 16, 16));
  CHECK(r.unclamped_size() == 121);
  for (std::size_t p = 0; p < r.cells.size(); ++p) CHECK(r.cells[p] == static_cast<int>(p));
  const auto flat = r.flat();
  CHECK(flat.front() == 3 * 16 + 3);
  CHECK(flat.back() == 13 * 16 + 13);
  CHECK(r.contains(3, 13));
  CHECK_FALSE(r.contains(2, 8));
}

TEST_CASE("clamped regions match brute force") {
  Rng rng(41);
  std::uniform_int_distribution<int> centre(-3, 18), ext(0, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = centre(rng), c = centre(rng), x = ext(rng), y = ext(rng);
    const auto reg = region_at(r, c, x, y, 16, 16);
    CHECK(reg.positions == brute_region(r, c, x, y, 16, 16));
    for (std::size_t p = 0; p < reg.positions.size(); ++p) {
      const auto [i, j] = reg.positions[p];
      CHECK(reg.cells[p] == (i - (r - x)) * (2 * y + 1) + (j - (c - y)));
    }
  }
}

TEST_CASE("region centre rounds the landmark centroid half up, rows from y") {
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(2.49) == 2);
  CHECK(round_half_up(-0.5) == 0);
  CHECK(round_half_up(-0.51) == -1);

  // x = 10 px, y = 5 px, n = 2: row 2.5 -> 3, col 5
  const auto r = facial_region(constant_landmarks(10.0, 5.0), 2, 1, 2, 16, 16);
  CHECK(r.center_row == 3);
  CHECK(r.center_col == 5);
  CHECK(r.centroid_row == doctest::Approx(2.5));
  CHECK(r.centroid_col == doctest::Approx(5.0));
  CHECK(r.positions == brute_region(3, 5, 1, 2, 16, 16));

  CHECK_THROWS_AS(facial_region(Landmarks(0, 2), 2, 1, 1, 16, 16), DataError);
  CHECK_THROWS_AS(facial_region(Landmarks::Zero(68, 3), 2, 1, 1, 16, 16), DimensionError);
  CHECK_THROWS_AS(region_at(4, 4, -1, 1, 16, 16), ConfigError);
}

TEST_CASE("region debug JSON lists the clamped positions") {
  const auto r = region_at(0, 15, 1, 1, 16, 16);
  const auto j = nlohmann::json::parse(region_json(r));
  CHECK(j["center"] == nlohmann::json({0, 15}));
  CHECK(j["extents"] == nlohmann::json({1, 1}));
  CHECK(j["grid"] == nlohmann::json({16, 16}));
  CHECK(j["unclamped_size"] == 9);
  REQUIRE(j["positions"].size() == 4);
  CHECK(j["positions"][0] == nlohmann::json({0, 14}));
  CHECK(j["positions"][3] == nlohmann::json({1, 15}));
}

TEST_CASE("compute_ea gradients match finite differences") {
  AnchorModule<double> m(toy_anchor());
  Rng rng(42);
  const Mat<double> e_e = nn::normal<double>(1, 8, 1.0, rng);
  const Mat<double> e_f = nn::normal<double>(4, 8, 1.0, rng);
  const Mat<double> w = nn::normal<double>(9, 8, 1.0, rng);
  CHECK(testing::input_gradcheck({e_e, e_f}, [&](auto& t, const auto& v) {
    return ag::sum(ag::mul(m.compute_ea(t, v[0], v[1]).ea, t.constant(w)));
  }) < 1e-6);
  CHECK(testing::param_gradcheck(m.parameters(), [&](auto& t) {
    auto in = m.embed_condition_inputs(t, t.constant(e_e.leftCols(3)), t.constant(e_f.topRows(1).leftCols(3)),
                                       {0, 2, 4, 2});
    return ag::sum(ag::mul(m.compute_ea(t, in.e_e, in.e_f).ea, t.constant(w)));
  }) < 1e-6);
}

TEST_CASE("anchor attention weights are row-stochastic over the facial set") {
  AnchorModule<double> m(toy_anchor());
  Rng rng(43);
  ag::Tape<double> t(false);
  const auto out = m.compute_ea(t, t.constant(nn::normal<double>(1, 8, 1.0, rng)),
                                t.constant(nn::normal<double>(6, 8, 1.0, rng)));
  CHECK(out.ea.rows() == 9);
  CHECK(out.ea.cols() == 8);
  REQUIRE(out.weights.size() == 2);
  for (const auto& w : out.weights) {
    CHECK(w.rows() == 9);
    CHECK(w.cols() == 6);
    CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(w.minCoeff() >= 0.0);
  }
  CHECK_THROWS_AS(m.compute_ea(t, t.constant(Mat<double>::Zero(1, 8)), t.constant(Mat<double>::Zero(0, 8))),
                  DimensionError);
  CHECK_THROWS_AS(m.compute_ea(t, t.constant(Mat<double>::Zero(2, 8)), t.constant(Mat<double>::Zero(3, 8))),
                  DimensionError);
}

TEST_CASE("condition sequence: EA rows inside the region, token embeddings outside") {
  AnchorModule<double> m(toy_anchor());
  Rng rng(44);
  TokenGrid s(4, 5);
  std::uniform_int_distribution<int> tok(0, 4);
  for (auto& k : s.indices) k = tok(rng);
  const auto region = region_at(0, 4, 1, 1, 4, 5);  // clamped corner: 4 of 9 cells
  const Mat<double> ea = nn::normal<double>(9, 8, 1.0, rng);
  const Mat<double>& table = m.token_table().value;

  const auto c = build_condition(s, ea, region, table);
  REQUIRE(c.embeddings.rows() == 20);
  const auto flat = region.flat();
  for (int r = 0; r < 20; ++r) {
    const auto it = std::find(flat.begin(), flat.end(), r);
    if (it == flat.end()) {
      CHECK(c.embeddings.row(r) == table.row(s.indices[static_cast<std::size_t>(r)]));
    } else {
      const int cell = region.cells[static_cast<std::size_t>(it - flat.begin())];
      CHECK(c.embeddings.row(r) == ea.row(cell));
    }
  }
  // top-right corner (0,4) is cell (1,1) of the 3x3 block
  CHECK(c.embeddings.row(4) == ea.row(4));

  ag::Tape<double> t(false);
  const auto v = m.build_condition(t, s, t.constant(ea), region);
  CHECK((v.value() - c.embeddings).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(build_condition(s, Mat<double>(ea.topRows(8)), region, table), DimensionError);
  CHECK_THROWS_AS(build_condition(TokenGrid(4, 4), ea, region, table), DimensionError);
  TokenGrid bad = s;
  bad.indices[0] = 5;
  CHECK_THROWS_AS(build_condition(bad, ea, region, table), RangeError);
  CHECK_THROWS_AS(m.build_condition(t, bad, t.constant(ea), region), RangeError);
}

TEST_CASE("gradient through the condition reaches EA only at region cells") {
  AnchorModule<double> m(toy_anchor());
  TokenGrid s(3, 3, 1);
  const auto region = region_at(0, 0, 1, 1, 3, 3);
  Rng rng(45);
  const Mat<double> ea = nn::normal<double>(9, 8, 1.0, rng);
  ag::Tape<double> t;
  auto e = t.variable(ea);
  t.backward(ag::sum(m.build_condition(t, s, e, region)));
  const Mat<double> g = t.gradient(e);
  for (int cell = 0; cell < 9; ++cell) {
    const bool used = std::find(region.cells.begin(), region.cells.end(), cell) != region.cells.end();
    CHECK(g.row(cell).cwiseAbs().sum() == doctest::Approx(used ? 8.0 : 0.0));
  }
}

TEST_CASE("anchor checkpoint round trip and mismatch") {
  AnchorModule<float> a(AnchorConfig{});
  Checkpoint ck;
  a.save(ck);
  AnchorConfig other;
  other.seed = 99;
  AnchorModule<float> b(other);
  b.load(ck);
  CHECK(nn::fingerprint(a.parameters()) == nn::fingerprint(b.parameters()));
  AnchorConfig wider;
  wider.ext_row = 3;
  AnchorModule<float> c(wider);
  CHECK_THROWS_AS(c.load(ck), DataError);
}

TEST_CASE("anchor config validation") {
  AnchorConfig c;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AnchorConfig{};
  c.ext_col = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE
