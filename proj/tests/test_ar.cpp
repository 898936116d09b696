#include "doctest.h"
#include "gradcheck.hpp"

#include "emotoken/ar_model.hpp"

#include <cmath>
#include <map>

using namespace emotoken;

namespace {

ArConfig toy_ar(bool zero_head = false) {
  ArConfig c;
  c.vocab = 6;
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.grid_h = 2;
  c.grid_w = 3;
  c.context = 12;
  c.ffn_mult = 2;
  c.zero_head = zero_head;
  c.seed = 23;
  return c;
}

TokenGrid random_grid(int h, int w, int K, Rng& rng) {
  TokenGrid g(h, w);
  std::uniform_int_distribution<int> d(0, K - 1);
  for (auto& k : g.indices) k = d(rng);
  return g;
}

Mat<double> teacher_forced(const ArModel<double>& m, const Mat<double>& cond, const std::vector<int>& targets) {
  ag::Tape<double> t(false);
  return m.forward(t, t.constant(cond), targets).value();
}

}  // namespace

TEST_SUITE("ar") {

TEST_CASE("logits at position i ignore targets at i and later") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(51);
  const int L = cfg.sequence_length();
  for (int draw = 0; draw < 50; ++draw) {
    const Mat<double> cond = nn::normal<double>(L, cfg.width, 1.0, rng);
    const auto a = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
    const int i = std::uniform_int_distribution<int>(0, L - 1)(rng);
    auto b = a;
    for (int j = i; j < L; ++j) b.indices[static_cast<std::size_t>(j)] = (a.indices[static_cast<std::size_t>(j)] + 1 + draw % (cfg.vocab - 1)) % cfg.vocab;
    const Mat<double> la = teacher_forced(m, cond, a.indices), lb = teacher_forced(m, cond, b.indices);
    CHECK((la.topRows(i + 1) - lb.topRows(i + 1)).cwiseAbs().maxCoeff() == 0.0);
    if (i + 1 < L) CHECK((la.bottomRows(L - i - 1) - lb.bottomRows(L - i - 1)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("zero-initialised head gives the uniform NLL ln K") {
  for (int K : {6, 64}) {
    ArConfig cfg = toy_ar(true);
    cfg.vocab = K;
    ArModel<double> m(cfg);
    Rng rng(52);
    ag::Tape<double> t(false);
    const auto cond = t.constant(nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng));
    const double v = nll(t, m, cond, random_grid(cfg.grid_h, cfg.grid_w, K, rng)).scalar();
    CHECK(std::abs(v - std::log(static_cast<double>(K))) < 1e-5);
  }
}

TEST_CASE("cached step-by-step logits equal teacher forcing") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(53);
  const Mat<double> cond = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  const Mat<double> tf = teacher_forced(m, cond, g.indices);
  const Mat<double> sw = m.stepwise_logits(cond, g.indices);
  CHECK((tf - sw).cwiseAbs().maxCoeff() < 1e-10);
  const std::vector<int> prefix(g.indices.begin(), g.indices.begin() + 4);
  CHECK((m.next_logits(cond, prefix) - tf.row(4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("nll equals the mean negative log-softmax of the target") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(54);
  const Mat<double> cond = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  const Mat<double> logits = teacher_forced(m, cond, g.indices);
  double expect = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    expect += lse - logits(r, g.indices[static_cast<std::size_t>(r)]);
  }
  expect /= static_cast<double>(logits.rows());
  ag::Tape<double> t(false);
  CHECK(nll(t, m, t.constant(cond), g).scalar() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(nll_value(m, cond, g) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(nll(t, m, t.constant(cond), TokenGrid(3, 3)), DimensionError);
}

TEST_CASE("total loss is auto + lambda * conti") {
  ag::Tape<double> t;
  const auto a = t.constant(Mat<double>::Constant(1, 1, 2.0));
  const auto c = t.constant(Mat<double>::Constant(1, 1, 3.0));
  CHECK(total_loss(a, c, 0.5).scalar() == doctest::Approx(3.5));
  CHECK(total_loss(a, c, 0.0).scalar() == doctest::Approx(2.0));
  CHECK_THROWS_AS(total_loss(a, c, -0.1), ConfigError);
}

TEST_CASE("continuity loss: zero without a previous frame, equals nll on a static condition") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(55);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  ag::Tape<double> t(false);
  const auto cond = t.constant(nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng));
  CHECK(continuity_loss<double>(t, m, nullptr, g).scalar() == 0.0);
  CHECK(continuity_loss(t, m, &cond, g).scalar() == doctest::Approx(nll(t, m, cond, g).scalar()).epsilon(1e-12));
}

TEST_CASE("total loss gradients match finite differences") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(56);
  const Mat<double> cur = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const Mat<double> prev = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  CHECK(testing::param_gradcheck(m.parameters(), [&](auto& t) {
    const auto p = t.constant(prev);
    return total_loss(nll(t, m, t.constant(cur), g), continuity_loss(t, m, &p, g), 0.5);
  }) < 1e-6);
  CHECK(testing::input_gradcheck({cur, prev}, [&](auto& t, const auto& v) {
    return total_loss(nll(t, m, v[0], g), continuity_loss(t, m, &v[1], g), 0.5);
  }) < 1e-6);
}

TEST_CASE("the condition changes the prediction") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(57);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  Mat<double> cond = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const Mat<double> before = teacher_forced(m, cond, g.indices);
  cond.row(cfg.sequence_length() - 1) += nn::normal<double>(1, cfg.width, 1.0, rng);
  const Mat<double> after = teacher_forced(m, cond, g.indices);
  CHECK((before - after).row(0).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("sampling: greedy follows argmax, seeds are reproducible") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(58);
  const Mat<double> cond = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);

  SamplingConfig greedy;
  const auto g = m.sample(cond, greedy);
  const Mat<double> logits = teacher_forced(m, cond, g.indices);
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best;
    logits.row(r).maxCoeff(&best);
    CHECK(g.indices[static_cast<std::size_t>(r)] == best);
  }

  SamplingConfig s{1.3, 4, 99};
  CHECK(m.sample(cond, s) == m.sample(cond, s));
  bool differs = false;
  for (std::uint64_t seed = 0; seed < 8 && !differs; ++seed) differs = m.sample(cond, {1.3, 4, seed}) != m.sample(cond, s);
  CHECK(differs);

  CHECK_THROWS_AS(m.sample(cond, {0.0, 1, 0}), ConfigError);
  CHECK_THROWS_AS(m.sample(cond, {1.0, 7, 0}), ConfigError);
}

TEST_CASE("sample_index: lowest index on ties, top-k support, temperature") {
  Mat<double> logits(1, 5);
  logits << 1.0, 3.0, 3.0, 0.5, 2.0;
  Rng rng(59);
  CHECK(sample_index(logits, {1.0, 1, 0}, rng) == 1);

  std::map<int, int> counts;
  for (int i = 0; i < 4000; ++i) ++counts[sample_index(logits, {1.0, 3, 0}, rng)];
  CHECK(counts.size() == 3);
  CHECK(counts.count(0) == 0);
  CHECK(counts.count(3) == 0);
  // within the kept set {1, 2, 4}: p = e^3 / (2 e^3 + e^2)
  const double p1 = std::exp(3.0) / (2 * std::exp(3.0) + std::exp(2.0));
  CHECK(std::abs(counts[1] / 4000.0 - p1) < 0.03);

  const auto hot = distribution(logits, 1.0), cold = distribution(logits, 0.1);
  CHECK(cold[1] > hot[1]);
  CHECK(cold[1] == doctest::Approx(0.5).epsilon(1e-3));
  double total = 0;
  for (double p : hot) total += p;
  CHECK(total == doctest::Approx(1.0));

  Mat<double> bad = logits;
  bad(0, 2) = std::nan("");
  CHECK_THROWS_AS(sample_index(bad, {1.0, 2, 0}, rng), NumericError);
}

TEST_CASE("context and length limits") {
  const ArConfig cfg = toy_ar();
  ArModel<double> m(cfg);
  Rng rng(60);
  const Mat<double> cond = nn::normal<double>(cfg.sequence_length(), cfg.width, 1.0, rng);
  const auto g = random_grid(cfg.grid_h, cfg.grid_w, cfg.vocab, rng);
  CHECK_THROWS_AS(m.next_logits(cond, g.indices), ContextOverflow);
  CHECK_THROWS_AS(m.next_logits(Mat<double>::Zero(cfg.sequence_length() + 1, cfg.width), {}), ContextOverflow);
  CHECK_THROWS_AS(m.next_logits(Mat<double>::Zero(cfg.sequence_length(), cfg.width + 1), {}), DimensionError);
  std::vector<int> bad = {0, 9};
  CHECK_THROWS_AS(m.next_logits(cond, bad), RangeError);

  ArConfig small = cfg;
  small.context = 2 * cfg.sequence_length() - 1;
  CHECK_THROWS_AS(ArModel<double>{small}, ConfigError);
}

TEST_CASE("AR checkpoint round trip") {
  ArModel<float> a(ArConfig{});
  Checkpoint ck;
  a.save(ck);
  ArConfig other;
  other.seed = 77;
  ArModel<float> b(other);
  b.load(ck);
  CHECK(nn::fingerprint(a.parameters()) == nn::fingerprint(b.parameters()));
  ArConfig deeper;
  deeper.layers = 5;
  ArModel<float> c(deeper);
  CHECK_THROWS_AS(c.load(ck), DataError);
}

}  // TEST_SUITE
