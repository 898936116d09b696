#include "emotoken/ar_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace emotoken {

void ArConfig::validate() const {
  if (vocab < 2) throw ConfigError("ar: vocabulary must have at least 2 entries");
  if (layers < 1) throw ConfigError("ar: need at least one layer");
  if (heads < 1 || width % heads != 0) throw ConfigError("ar: width must be divisible by heads");
  if (grid_h < 1 || grid_w < 1) throw ConfigError("ar: empty grid");
  if (context < 2 * sequence_length()) throw ConfigError("ar: context must hold the condition and the target grid");
  if (ffn_mult < 1) throw ConfigError("ar: ffn multiplier must be positive");
}

void SamplingConfig::validate(int vocab) const {
  if (!(temperature > 0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  if (top_k < 1 || top_k > vocab) throw ConfigError("top_k must lie in [1, K]");
}

namespace {

template <typename S>
Mat<S> gelu_value(const Mat<S>& x) {
  const S c = S(0.7978845608028654), k = S(0.044715);
  const auto a = x.array();
  return (S(0.5) * a * (S(1) + (c * (a + k * a.cube())).tanh())).matrix();
}

}  // namespace

template <typename S>
ArModel<S>::ArModel(const ArConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int d = cfg_.width;
  tok_ = nn::Embedding<S>("ar.tokens", cfg_.vocab + 1, d, rng);
  pos_ = Parameter<S>("ar.pos", nn::normal<S>(cfg_.sequence_length(), d, S(0.3), rng));
  seg_ = Parameter<S>("ar.segment", nn::normal<S>(2, d, S(0.02), rng));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "ar.block" + std::to_string(l);
    Block b;
    b.ln1 = nn::LayerNorm<S>(p + ".ln1", d);
    b.ln2 = nn::LayerNorm<S>(p + ".ln2", d);
    b.wq = nn::Linear<S>(p + ".wq", d, d, rng);
    b.wk = nn::Linear<S>(p + ".wk", d, d, rng);
    b.wv = nn::Linear<S>(p + ".wv", d, d, rng);
    b.proj = nn::Linear<S>(p + ".proj", d, d, rng);
    b.fc1 = nn::Linear<S>(p + ".fc1", d, cfg_.ffn_mult * d, rng);
    b.fc2 = nn::Linear<S>(p + ".fc2", cfg_.ffn_mult * d, d, rng);
    // residual branches start small
    b.proj.weight.value *= S(1) / std::sqrt(S(2 * cfg_.layers));
    b.fc2.weight.value *= S(1) / std::sqrt(S(2 * cfg_.layers));
    blocks_.push_back(std::move(b));
  }
  ln_f_ = nn::LayerNorm<S>("ar.ln_f", d);
  head_ = nn::Linear<S>("ar.head", d, cfg_.vocab, rng);
  if (cfg_.zero_head) {
    head_.weight.value.setZero();
    head_.bias.value.setZero();
  }
}

template <typename S>
void ArModel<S>::check_lengths(Index prefix_rows, std::size_t inputs) const {
  if (prefix_rows > cfg_.sequence_length()) throw ContextOverflow("ar: condition longer than the token grid");
  if (static_cast<Index>(inputs) > cfg_.sequence_length())
    throw ContextOverflow("ar: prefix already covers the whole grid");
  if (prefix_rows + static_cast<Index>(inputs) > cfg_.context) throw ContextOverflow("ar: sequence exceeds the context");
}

template <typename S>
std::vector<int> ArModel<S>::shifted_inputs(const std::vector<int>& targets, std::size_t count) const {
  std::vector<int> in(count);
  if (count) in[0] = cfg_.vocab;  // BOS
  for (std::size_t i = 1; i < count; ++i) {
    const int k = targets[i - 1];
    if (k < 0 || k >= cfg_.vocab) throw RangeError("ar: token index " + std::to_string(k) + " out of vocabulary");
    in[i] = k;
  }
  return in;
}

template <typename S>
Mat<S> ArModel<S>::mask(Index prefix, Index targets) const {
  const S ninf = -std::numeric_limits<S>::infinity();
  const Index n = prefix + targets;
  Mat<S> m = Mat<S>::Zero(n, n);
  if (targets > 0) m.topRightCorner(prefix, targets).setConstant(ninf);
  for (Index i = 0; i < targets; ++i)
    if (i + 1 < targets) m.block(prefix + i, prefix + i + 1, 1, targets - i - 1).setConstant(ninf);
  return m;
}

template <typename S>
ag::Var<S> ArModel<S>::forward(ag::Tape<S>& t, ag::Var<S> condition, const std::vector<int>& targets) const {
  const Index P = condition.rows();
  const std::size_t L = targets.size();
  if (condition.cols() != cfg_.width) throw DimensionError("ar: condition width differs from model width");
  if (L == 0) throw DimensionError("ar: no target positions");
  check_lengths(P, L);
  const auto in = shifted_inputs(targets, L);
  auto pos = t.param(pos_);
  auto seg = t.param(seg_);
  auto prefix = ag::add(ag::add(condition, ag::slice_rows(pos, 0, P)), ag::tile_rows(ag::slice_rows(seg, 0, 1), P));
  auto target = ag::add(ag::add(tok_(t, in), ag::slice_rows(pos, 0, static_cast<Index>(L))),
                        ag::tile_rows(ag::slice_rows(seg, 1, 1), static_cast<Index>(L)));
  auto x = ag::concat_rows<S>({prefix, target});
  const Mat<S> m = mask(P, static_cast<Index>(L));
  for (const auto& b : blocks_) {
    auto h = b.ln1(t, x);
    auto a = ag::attention(b.wq(t, h), b.wk(t, h), b.wv(t, h), cfg_.heads, m);
    x = ag::add(x, b.proj(t, a));
    h = b.ln2(t, x);
    x = ag::add(x, b.fc2(t, ag::gelu(b.fc1(t, h))));
  }
  auto out = ag::slice_rows(x, P, static_cast<Index>(L));
  return head_(t, ln_f_(t, out));
}

// Key/value cache for incremental decoding.
template <typename S>
class ArModel<S>::Cache {
 public:
  Cache(const ArModel& m, Index capacity) : m_(m) {
    for (std::size_t l = 0; l < m.blocks_.size(); ++l) {
      k_.emplace_back(capacity, m.cfg_.width);
      v_.emplace_back(capacity, m.cfg_.width);
    }
  }

  /// Runs rows x through every block; rows attend to the cache plus
  /// themselves (bidirectionally when `causal` is false).
  Mat<S> run(Mat<S> x, bool causal) {
    const Index n = x.rows();
    const int heads = m_.cfg_.heads;
    const Index dh = m_.cfg_.width / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    for (std::size_t l = 0; l < m_.blocks_.size(); ++l) {
      const Block& b = m_.blocks_[l];
      Mat<S> h = b.ln1.apply(x);
      Mat<S> q = b.wq.apply(h);
      k_[l].middleRows(used_, n) = b.wk.apply(h);
      v_[l].middleRows(used_, n) = b.wv.apply(h);
      Mat<S> a(n, m_.cfg_.width);
      for (Index r = 0; r < n; ++r) {
        const Index keys = causal ? used_ + r + 1 : used_ + n;
        for (int hd = 0; hd < heads; ++hd) {
          RowVec<S> sc = (k_[l].topRows(keys).middleCols(hd * dh, dh) * q.row(r).segment(hd * dh, dh).transpose())
                             .transpose() * scale;
          sc = (sc.array() - sc.maxCoeff()).exp();
          sc /= sc.sum();
          a.row(r).segment(hd * dh, dh) = sc * v_[l].topRows(keys).middleCols(hd * dh, dh);
        }
      }
      x += b.proj.apply(a);
      x += b.fc2.apply(gelu_value<S>(b.fc1.apply(b.ln2.apply(x))));
    }
    used_ += n;
    return x;
  }

  Mat<S> logits(const Mat<S>& x) const { return m_.head_.apply(m_.ln_f_.apply(x)); }

 private:
  const ArModel& m_;
  std::vector<Mat<S>> k_, v_;
  Index used_ = 0;
};

template <typename S>
Mat<S> ArModel<S>::stepwise_logits(const Mat<S>& condition, const std::vector<int>& targets) const {
  const Index P = condition.rows();
  const std::size_t L = targets.size();
  if (condition.cols() != cfg_.width) throw DimensionError("ar: condition width differs from model width");
  check_lengths(P, L);
  const auto in = shifted_inputs(targets, L);
  Cache cache(*this, P + static_cast<Index>(L));
  Mat<S> prefix = condition + pos_.value.topRows(P);
  prefix.rowwise() += seg_.value.row(0);
  cache.run(std::move(prefix), false);
  Mat<S> out(static_cast<Index>(L), cfg_.vocab);
  for (std::size_t i = 0; i < L; ++i) {
    Mat<S> x = tok_.table.value.row(in[i]) + pos_.value.row(static_cast<Index>(i)) + seg_.value.row(1);
    out.row(static_cast<Index>(i)) = cache.logits(cache.run(std::move(x), true));
  }
  return out;
}

template <typename S>
Mat<S> ArModel<S>::next_logits(const Mat<S>& condition, const std::vector<int>& prefix) const {
  if (static_cast<Index>(prefix.size()) >= cfg_.sequence_length())
    throw ContextOverflow("ar: prefix length must be below h*w");
  std::vector<int> targets = prefix;
  targets.push_back(0);  // placeholder; only earlier entries are fed back
  ag::Tape<S> t(false);
  Mat<S> all = forward(t, t.constant(condition), targets).value();
  return all.bottomRows(1);
}

template <typename S>
TokenGrid ArModel<S>::sample(const Mat<S>& condition, const SamplingConfig& sampling) const {
  sampling.validate(cfg_.vocab);
  const Index P = condition.rows();
  const int L = cfg_.sequence_length();
  if (condition.cols() != cfg_.width) throw DimensionError("ar: condition width differs from model width");
  check_lengths(P, static_cast<std::size_t>(L));
  Rng rng(sampling.seed);
  Cache cache(*this, P + L);
  Mat<S> prefix = condition + pos_.value.topRows(P);
  prefix.rowwise() += seg_.value.row(0);
  cache.run(std::move(prefix), false);
  TokenGrid out(cfg_.grid_h, cfg_.grid_w);
  int prev = cfg_.vocab;
  for (int i = 0; i < L; ++i) {
    Mat<S> x = tok_.table.value.row(prev) + pos_.value.row(i) + seg_.value.row(1);
    const Mat<S> logits = cache.logits(cache.run(std::move(x), true));
    prev = sample_index(logits, sampling, rng);
    out.indices[static_cast<std::size_t>(i)] = prev;
  }
  return out;
}

template <typename S>
nn::ParamList<S> ArModel<S>::parameters() {
  nn::ParamList<S> out;
  tok_.collect(out);
  out.push_back(&pos_);
  out.push_back(&seg_);
  for (auto& b : blocks_) {
    b.ln1.collect(out);
    b.ln2.collect(out);
    for (auto* l : {&b.wq, &b.wk, &b.wv, &b.proj, &b.fc1, &b.fc2}) l->collect(out);
  }
  ln_f_.collect(out);
  head_.collect(out);
  return out;
}

template <typename S>
void ArModel<S>::save(Checkpoint& ck) {
  ck.meta["ar.vocab"] = std::to_string(cfg_.vocab);
  ck.meta["ar.layers"] = std::to_string(cfg_.layers);
  ck.meta["ar.heads"] = std::to_string(cfg_.heads);
  ck.meta["ar.width"] = std::to_string(cfg_.width);
  ck.meta["ar.context"] = std::to_string(cfg_.context);
  ck.meta["ar.grid_h"] = std::to_string(cfg_.grid_h);
  ck.meta["ar.grid_w"] = std::to_string(cfg_.grid_w);
  ck.meta["ar.ffn_mult"] = std::to_string(cfg_.ffn_mult);
  ck.store(parameters());
}

template <typename S>
void ArModel<S>::load(const Checkpoint& ck) {
  if (ck.get_int("ar.vocab") != cfg_.vocab || ck.get_int("ar.width") != cfg_.width ||
      ck.get_int("ar.layers") != cfg_.layers || ck.get_int("ar.grid_h") != cfg_.grid_h ||
      ck.get_int("ar.grid_w") != cfg_.grid_w)
    throw DataError("ar checkpoint incompatible with configuration");
  ck.restore(parameters());
}

template <typename S>
ag::Var<S> nll(ag::Tape<S>& t, const ArModel<S>& model, ag::Var<S> condition, const TokenGrid& target) {
  if (static_cast<int>(target.size()) != model.config().sequence_length())
    throw DimensionError("nll: target length differs from h*w");
  return ag::cross_entropy(model.forward(t, condition, target.indices), target.indices);
}

template <typename S>
ag::Var<S> continuity_loss(ag::Tape<S>& t, const ArModel<S>& model, const ag::Var<S>* prev_condition,
                           const TokenGrid& target) {
  if (!prev_condition) return t.constant(Mat<S>::Zero(1, 1));
  return nll(t, model, *prev_condition, target);
}

template <typename S>
S nll_value(const ArModel<S>& model, const Mat<S>& condition, const TokenGrid& target) {
  ag::Tape<S> t(false);
  return nll(t, model, t.constant(condition), target).scalar();
}

template <typename S>
std::vector<double> distribution(const Mat<S>& logits, double temperature) {
  if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < logits.cols(); ++k) mx = std::max(mx, static_cast<double>(logits(0, k)) / temperature);
  double z = 0;
  for (Index k = 0; k < logits.cols(); ++k) z += p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits(0, k)) / temperature - mx);
  for (auto& v : p) v /= z;
  return p;
}

template <typename S>
int sample_index(const Mat<S>& logits, const SamplingConfig& sampling, Rng& rng) {
  const int K = static_cast<int>(logits.cols());
  if (!logits.allFinite()) throw NumericError("sampling: non-finite logits");
  if (sampling.top_k == 1) {
    Index best;
    logits.row(0).maxCoeff(&best);  // first maximum
    return static_cast<int>(best);
  }
  std::vector<int> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  const int k = std::min(sampling.top_k, K);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits(0, a) > logits(0, b); });
  Mat<S> kept(1, k);
  for (int i = 0; i < k; ++i) kept(0, i) = logits(0, order[static_cast<std::size_t>(i)]);
  const auto p = distribution(kept, sampling.temperature);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0;
  for (int i = 0; i < k; ++i) {
    acc += p[static_cast<std::size_t>(i)];
    if (u < acc) return order[static_cast<std::size_t>(i)];
  }
  return order[static_cast<std::size_t>(k - 1)];
}

#define EMOTOKEN_INSTANTIATE_AR(S)                                                                          \
  template class ArModel<S>;                                                                                \
  template ag::Var<S> nll<S>(ag::Tape<S>&, const ArModel<S>&, ag::Var<S>, const TokenGrid&);                \
  template ag::Var<S> continuity_loss<S>(ag::Tape<S>&, const ArModel<S>&, const ag::Var<S>*, const TokenGrid&); \
  template S nll_value<S>(const ArModel<S>&, const Mat<S>&, const TokenGrid&);                              \
  template std::vector<double> distribution<S>(const Mat<S>&, double);                                      \
  template int sample_index<S>(const Mat<S>&, const SamplingConfig&, Rng&);

EMOTOKEN_INSTANTIATE_AR(float)
EMOTOKEN_INSTANTIATE_AR(double)

}  // namespace emotoken
