#include "doctest.h"
#include "gradcheck.hpp"

#include "emotoken/core/checkpoint.hpp"

#include <filesystem>

using namespace emotoken;
using testing::input_gradcheck;

namespace {

Mat<double> randn(Index r, Index c, Rng& rng, double s = 1.0) { return nn::normal<double>(r, c, s, rng); }

constexpr double kTol = 1e-4;

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("elementwise and matrix ops match finite differences") {
  Rng rng(11);
  const auto a = randn(3, 4, rng), b = randn(4, 5, rng), c = randn(3, 5, rng), row = randn(1, 5, rng);
  CHECK(input_gradcheck({a, b, c, row}, [](auto&, const auto& v) {
    auto y = ag::add_row(ag::matmul(v[0], v[1]), v[3]);
    return ag::sum(ag::mul(ag::tanh(y), v[2]));
  }) < kTol);
  CHECK(input_gradcheck({a, c}, [](auto&, const auto& v) {
    return ag::mean(ag::square(ag::gelu(ag::matmul_nt(v[0], v[0]))));
  }) < kTol);
  CHECK(input_gradcheck({c}, [](auto&, const auto& v) {
    return ag::sum(ag::mul(ag::sigmoid(v[0]), ag::leaky_relu(ag::scale(v[0], 2.0))));
  }) < kTol);
}

TEST_CASE("softmax, cross-entropy and layer norm gradients") {
  Rng rng(12);
  const auto x = randn(4, 6, rng), w = randn(4, 6, rng);
  CHECK(input_gradcheck({x, w}, [](auto&, const auto& v) { return ag::sum(ag::mul(ag::softmax_rows(v[0]), v[1])); }) < kTol);
  CHECK(input_gradcheck({x}, [](auto&, const auto& v) { return ag::cross_entropy(v[0], {0, 5, 2, 2}); }) < kTol);
  const auto g = randn(1, 6, rng), bta = randn(1, 6, rng);
  CHECK(input_gradcheck({x, g, bta, w}, [](auto&, const auto& v) {
    return ag::sum(ag::mul(ag::layer_norm(v[0], v[1], v[2]), v[3]));
  }) < kTol);
}

TEST_CASE("structural ops route gradients") {
  Rng rng(13);
  const auto a = randn(3, 4, rng), b = randn(2, 4, rng), r = randn(1, 4, rng);
  CHECK(input_gradcheck({a, b, r}, [](auto&, const auto& v) {
    auto cat = ag::concat_rows<double>({v[0], v[1], ag::tile_rows(v[2], 2)});
    auto g = ag::gather_rows(cat, {6, 0, 0, 3, 5});
    auto s = ag::concat_cols<double>({ag::slice_cols(g, 1, 2), ag::slice_rows(g, 0, 5)});
    return ag::sum(ag::square(ag::mean_rows(ag::reshape(s, 3, 10))));
  }) < kTol);
}

TEST_CASE("attention gradients, masked and unmasked") {
  Rng rng(14);
  const auto q = randn(5, 8, rng), k = randn(7, 8, rng), v = randn(7, 8, rng), w = randn(5, 8, rng);
  CHECK(input_gradcheck({q, k, v, w}, [](auto&, const auto& x) { return ag::sum(ag::mul(ag::attention(x[0], x[1], x[2], 2), x[3])); }) < kTol);
  Mat<double> mask = Mat<double>::Zero(5, 7);
  mask(0, 3) = mask(2, 0) = mask(4, 6) = -std::numeric_limits<double>::infinity();
  CHECK(input_gradcheck({q, k, v, w}, [&](auto&, const auto& x) {
    return ag::sum(ag::mul(ag::attention(x[0], x[1], x[2], 4, mask), x[3]));
  }) < kTol);
}

TEST_CASE("attention weights are row-stochastic and honour the mask") {
  Rng rng(15);
  ag::Tape<double> t(false);
  Mat<double> mask = Mat<double>::Zero(3, 4);
  mask(1, 2) = -std::numeric_limits<double>::infinity();
  std::vector<Mat<double>> w;
  ag::attention(t.constant(randn(3, 6, rng)), t.constant(randn(4, 6, rng)), t.constant(randn(4, 6, rng)), 3, mask, &w);
  REQUIRE(w.size() == 3);
  for (const auto& p : w) {
    for (Index r = 0; r < 3; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p(1, 2) == 0.0);
  }
}

TEST_CASE("conv2d and upsampling gradients") {
  Rng rng(16);
  const int B = 2, H = 4, W = 4, cin = 3, cout = 2;
  const auto x = randn(B * H * W, cin, rng), w = randn(9 * cin, cout, rng), b = randn(1, cout, rng);
  const auto wt = randn(B * 2 * 2, cout, rng), wt2 = randn(B * 8 * 8, cin, rng);
  ag::ConvGeometry g{B, H, W, 3, 2, 1};
  CHECK(input_gradcheck({x, w, b, wt}, [&](auto&, const auto& v) { return ag::sum(ag::mul(ag::conv2d(v[0], v[1], v[2], g), v[3])); }) < kTol);
  CHECK(input_gradcheck({x, wt2}, [&](auto&, const auto& v) { return ag::sum(ag::mul(ag::upsample2x(v[0], B, H, W), v[1])); }) < kTol);
}

TEST_CASE("straight-through passes gradient to the input, stop_gradient blocks it") {
  ag::Tape<double> t;
  auto in = t.variable(Mat<double>::Constant(2, 2, 0.3));
  auto q = t.constant(Mat<double>::Constant(2, 2, 1.0));
  auto out = ag::sum(ag::add(ag::straight_through(in, q), ag::stop_gradient(in)));
  CHECK(out.scalar() == doctest::Approx(4 + 1.2));
  t.backward(out);
  CHECK(t.gradient(in).isApprox(Mat<double>::Ones(2, 2)));
}

TEST_CASE("frozen parameters receive no gradient and Adam leaves them alone") {
  Rng rng(17);
  nn::Linear<double> a("a", 3, 2, rng), b("b", 2, 1, rng);
  nn::ParamList<double> ps;
  a.collect(ps);
  b.collect(ps);
  nn::set_frozen<double>({&a.weight, &a.bias}, true);
  const auto before = nn::fingerprint<double>({&a.weight, &a.bias});
  nn::Adam<double> opt;
  for (int i = 0; i < 3; ++i) {
    ag::Tape<double> t;
    auto y = ag::sum(b(t, a(t, t.constant(randn(4, 3, rng)))));
    t.backward(y);
    CHECK(a.weight.grad.isZero());
    opt.step(ps);
  }
  CHECK(nn::fingerprint<double>({&a.weight, &a.bias}) == before);
}

TEST_CASE("Adam minimises a quadratic and clips the global norm") {
  Parameter<double> p("p", Mat<double>::Constant(1, 3, 5.0));
  nn::AdamConfig cfg;
  cfg.lr = 0.1;
  nn::Adam<double> opt(cfg);
  for (int i = 0; i < 500; ++i) {
    ag::Tape<double> t;
    auto l = ag::sum(ag::square(t.param(p)));
    t.backward(l);
    opt.step({&p});
  }
  CHECK(p.value.norm() < 1e-2);
  Parameter<double> bad("bad", Mat<double>::Zero(1, 1));
  bad.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt.step({&bad}), NumericError);
}

TEST_CASE("checkpoint container round-trips parameters and metadata") {
  Rng rng(18);
  nn::Linear<float> f("layer", 4, 3, rng);
  nn::Linear<double> d("dbl", 2, 2, rng);
  Checkpoint ck;
  ck.meta["k"] = "v";
  ck.meta["n"] = "42";
  nn::ParamList<float> fp;
  f.collect(fp);
  nn::ParamList<double> dp;
  d.collect(dp);
  ck.store(fp);
  ck.store(dp);
  const auto path = (std::filesystem::temp_directory_path() / "emotoken_ck_test.ckpt").string();
  ck.save(path);
  const Checkpoint back = Checkpoint::load(path);
  CHECK(back.get("k") == "v");
  CHECK(back.get_int("n") == 42);
  nn::Linear<float> f2("layer", 4, 3, rng);
  nn::Linear<double> d2("dbl", 2, 2, rng);
  nn::ParamList<float> fp2;
  f2.collect(fp2);
  nn::ParamList<double> dp2;
  d2.collect(dp2);
  back.restore(fp2);
  back.restore(dp2);
  CHECK(f2.weight.value == f.weight.value);
  CHECK(d2.weight.value == d.weight.value);
  nn::Linear<float> wrong("layer", 5, 3, rng);
  nn::ParamList<float> wp;
  wrong.collect(wp);
  CHECK_THROWS_AS(back.restore(wp), DataError);
  CHECK_THROWS_AS(Checkpoint::load(path + ".missing"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("mix_seed is deterministic and separates children") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(1, 3));
  CHECK(mix_seed(1, 2) != mix_seed(2, 2));
}

}
