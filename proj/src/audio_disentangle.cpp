#include "emotoken/audio_disentangle.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace emotoken {

void AudioConfig::validate() const {
  if (component_dim < 1 || hidden < 1) throw ConfigError("audio: dimensions must be positive");
  if (emotions < 2) throw ConfigError("audio: need at least 2 emotion classes");
}

void AudioBatch::validate() const {
  if (clips.empty()) throw PairingError("audio batch: no clips");
  if (cross.empty()) throw PairingError("audio batch: no cross-reconstruction pairs");
  if (same_content.empty()) throw PairingError("audio batch: no same-content pairs");
  const int n = static_cast<int>(clips.size());
  auto check = [n](int i) {
    if (i < 0 || i >= n) throw PairingError("audio batch: pair index out of range");
  };
  auto labels = [this](int i) {
    const auto* c = clips[static_cast<std::size_t>(i)];
    if (!c->content_id || !c->emotion_id) throw PairingError("audio batch: paired clip lacks labels");
    return std::pair{*c->content_id, *c->emotion_id};
  };
  for (const auto& x : cross) {
    check(x.content_from), check(x.emotion_from), check(x.target);
    const auto [cm, cp] = labels(x.content_from);
    const auto [em, ep] = labels(x.emotion_from);
    const auto [tm, tp] = labels(x.target);
    (void)cp, (void)em;
    if (tm != cm || tp != ep) throw PairingError("audio batch: cross target labels do not match its sources");
    if (clips[static_cast<std::size_t>(x.target)]->frames() != clips[static_cast<std::size_t>(x.content_from)]->frames())
      throw PairingError("audio batch: cross target length differs from content source");
  }
  for (const auto& [a, b] : same_content) {
    check(a), check(b);
    const auto [am, ap] = labels(a);
    const auto [bm, bp] = labels(b);
    if (am != bm || ap == bp) throw PairingError("audio batch: content pair must share content and differ in emotion");
  }
}

template <typename S>
AudioModel<S>::AudioModel(const AudioConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int h = cfg_.hidden, d = cfg_.component_dim;
  auto make = [&](const std::string& name, int in, int out) {
    return Mlp{nn::Linear<S>(name + ".a", in, h, rng), nn::Linear<S>(name + ".b", h, h, rng),
               nn::Linear<S>(name + ".c", h, out, rng)};
  };
  emo_ = make("audio.emotion", kAudioFeatures, d);
  con_ = make("audio.content", kAudioFeatures, d);
  dec_ = make("audio.decoder", 2 * d, kAudioFeatures);
  head_ = nn::Linear<S>("audio.head", d, cfg_.emotions, rng);
}

template <typename S>
ag::Var<S> AudioModel<S>::mlp(ag::Tape<S>& t, const Mlp& m, ag::Var<S> x) const {
  auto h = ag::relu(m.a(t, x));
  h = ag::relu(m.b(t, h));
  return m.c(t, h);
}

template <typename S>
void AudioModel<S>::collect(Mlp& m, nn::ParamList<S>& out) {
  m.a.collect(out);
  m.b.collect(out);
  m.c.collect(out);
}

template <typename S>
ag::Var<S> AudioModel<S>::emotion(ag::Tape<S>& t, ag::Var<S> features) const {
  if (features.cols() != kAudioFeatures) throw DimensionError("audio: expected 336 features per frame");
  return ag::mean_rows(mlp(t, emo_, features));
}

template <typename S>
ag::Var<S> AudioModel<S>::content(ag::Tape<S>& t, ag::Var<S> features) const {
  if (features.cols() != kAudioFeatures) throw DimensionError("audio: expected 336 features per frame");
  return mlp(t, con_, features);
}

template <typename S>
ag::Var<S> AudioModel<S>::decode(ag::Tape<S>& t, ag::Var<S> content, ag::Var<S> emotion) const {
  if (content.cols() != cfg_.component_dim || emotion.cols() != cfg_.component_dim || emotion.rows() != 1)
    throw DimensionError("audio decode: component dimensions do not match d_a");
  return mlp(t, dec_, ag::concat_cols<S>({content, ag::tile_rows(emotion, content.rows())}));
}

template <typename S>
ag::Var<S> AudioModel<S>::classify(ag::Tape<S>& t, ag::Var<S> emotion) const {
  return head_(t, emotion);
}

template <typename S>
nn::ParamList<S> AudioModel<S>::encoder_parameters() {
  nn::ParamList<S> out;
  collect(emo_, out);
  collect(con_, out);
  return out;
}

template <typename S>
nn::ParamList<S> AudioModel<S>::parameters() {
  nn::ParamList<S> out = encoder_parameters();
  collect(dec_, out);
  head_.collect(out);
  return out;
}

template <typename S>
void AudioModel<S>::freeze() {
  nn::set_frozen(parameters(), true);
  frozen_ = true;
}

template <typename S>
void AudioModel<S>::save(Checkpoint& ck) {
  ck.meta["audio.d_a"] = std::to_string(cfg_.component_dim);
  ck.meta["audio.hidden"] = std::to_string(cfg_.hidden);
  ck.meta["audio.emotions"] = std::to_string(cfg_.emotions);
  ck.meta["audio.seed"] = std::to_string(cfg_.seed);
  ck.meta["audio.frozen"] = frozen_ ? "1" : "0";
  ck.store(parameters());
}

template <typename S>
void AudioModel<S>::load(const Checkpoint& ck) {
  if (ck.get_int("audio.d_a") != cfg_.component_dim || ck.get_int("audio.hidden") != cfg_.hidden ||
      ck.get_int("audio.emotions") != cfg_.emotions)
    throw DataError("audio checkpoint incompatible with configuration");
  ck.restore(parameters());
  if (ck.meta.count("audio.frozen") && ck.get("audio.frozen") == "1") freeze();
}

template <typename S>
EmotionComponent<S> encode_emotion(const AudioModel<S>& model, const AudioFeatureClip& clip) {
  clip.validate();
  ag::Tape<S> t(false);
  return {model.emotion(t, t.constant(clip.features.template cast<S>())).value()};
}

template <typename S>
ContentComponent<S> encode_content(const AudioModel<S>& model, const AudioFeatureClip& clip) {
  clip.validate();
  ag::Tape<S> t(false);
  return {model.content(t, t.constant(clip.features.template cast<S>())).value()};
}

template <typename S>
AudioFeatureClip decode_audio(const AudioModel<S>& model, const ContentComponent<S>& content,
                              const EmotionComponent<S>& emotion) {
  ag::Tape<S> t(false);
  Mat<S> e = emotion.vector;
  AudioFeatureClip out;
  out.features = model.decode(t, t.constant(content.frames), t.constant(e)).value().template cast<float>();
  return out;
}

template <typename S>
AudioLossTerms<S> audio_loss(ag::Tape<S>& t, const AudioModel<S>& model, const AudioBatch& batch) {
  batch.validate();
  const std::size_t n = batch.clips.size();
  std::vector<ag::Var<S>> feats, emo, con;
  std::vector<int> labels;
  for (const auto* c : batch.clips) {
    auto f = t.constant(c->features.template cast<S>());
    feats.push_back(f);
    emo.push_back(model.emotion(t, f));
    con.push_back(model.content(t, f));
  }
  std::vector<ag::Var<S>> self_terms, cla_rows;
  for (std::size_t i = 0; i < n; ++i) {
    self_terms.push_back(ag::mean(ag::square(ag::sub(model.decode(t, con[i], emo[i]), feats[i]))));
    if (batch.clips[i]->emotion_id) {
      cla_rows.push_back(model.classify(t, emo[i]));
      labels.push_back(*batch.clips[i]->emotion_id);
    }
  }
  auto average = [&](const std::vector<ag::Var<S>>& terms) {
    auto acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
    return ag::scale(acc, S(1) / static_cast<S>(terms.size()));
  };
  std::vector<ag::Var<S>> cross_terms;
  for (const auto& x : batch.cross) {
    auto out = model.decode(t, con[static_cast<std::size_t>(x.content_from)], emo[static_cast<std::size_t>(x.emotion_from)]);
    cross_terms.push_back(ag::mean(ag::square(ag::sub(out, feats[static_cast<std::size_t>(x.target)]))));
  }
  std::vector<ag::Var<S>> con_terms;
  for (const auto& [a, b] : batch.same_content) {
    auto ca = con[static_cast<std::size_t>(a)], cb = con[static_cast<std::size_t>(b)];
    if (ca.rows() != cb.rows()) {
      ca = ag::mean_rows(ca);
      cb = ag::mean_rows(cb);
    }
    con_terms.push_back(ag::mean(ag::square(ag::sub(ca, cb))));
  }
  AudioLossTerms<S> out;
  out.cross = average(cross_terms);
  out.self = average(self_terms);
  out.cla = cla_rows.empty() ? t.constant(Mat<S>::Zero(1, 1))
                             : ag::cross_entropy(ag::concat_rows<S>(cla_rows), labels);
  out.con = average(con_terms);
  out.total = ag::add(ag::add(out.cross, out.self), ag::add(out.cla, out.con));
  return out;
}

AudioBatch sample_audio_batch(const std::vector<const AudioFeatureClip*>& pool, int quads, Rng& rng) {
  std::map<std::pair<int, int>, std::vector<const AudioFeatureClip*>> by_label;
  std::set<int> contents, emotions;
  for (const auto* c : pool) {
    if (!c->content_id || !c->emotion_id) continue;
    by_label[{*c->content_id, *c->emotion_id}].push_back(c);
    contents.insert(*c->content_id);
    emotions.insert(*c->emotion_id);
  }
  const std::vector<int> cs(contents.begin(), contents.end()), es(emotions.begin(), emotions.end());
  if (cs.size() < 2 || es.size() < 2) throw PairingError("audio pool needs two contents and two emotions");
  auto pick = [&](const std::vector<int>& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
  AudioBatch b;
  int attempts = 0;
  while (static_cast<int>(b.cross.size()) < 4 * quads) {
    if (++attempts > 1000 * quads) throw PairingError("audio pool lacks complete content x emotion combinations");
    const int m = pick(cs), n = pick(cs), p = pick(es), q = pick(es);
    if (m == n || p == q) continue;
    const std::pair<int, int> keys[4] = {{m, p}, {n, q}, {m, q}, {n, p}};
    if (!std::all_of(std::begin(keys), std::end(keys), [&](const auto& k) { return by_label.count(k) > 0; })) continue;
    const int base = static_cast<int>(b.clips.size());
    for (const auto& k : keys) {
      const auto& v = by_label[k];
      b.clips.push_back(v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]);
    }
    const int a = base, bb = base + 1, c = base + 2, d = base + 3;
    b.cross.push_back({a, bb, c});
    b.cross.push_back({bb, a, d});
    b.cross.push_back({c, d, a});
    b.cross.push_back({d, c, bb});
    b.same_content.emplace_back(a, c);
    b.same_content.emplace_back(bb, d);
  }
  return b;
}

template <typename S>
AudioTrainer<S>::AudioTrainer(AudioModel<S>& model, nn::AdamConfig opt) : model_(model), opt_(opt) {}

template <typename S>
AudioStepStats AudioTrainer<S>::step(const AudioBatch& batch) {
  if (model_.frozen()) throw ConfigError("audio model is frozen");
  ag::Tape<S> t;
  auto l = audio_loss(t, model_, batch);
  AudioStepStats s{static_cast<double>(l.cross.scalar()), static_cast<double>(l.self.scalar()),
                   static_cast<double>(l.cla.scalar()), static_cast<double>(l.con.scalar()),
                   static_cast<double>(l.total.scalar())};
  if (!std::isfinite(s.total)) throw NumericError("audio loss is not finite");
  t.backward(l.total);
  opt_.step(model_.parameters());
  return s;
}

double probe_accuracy(const Mat<double>& train_x, const std::vector<int>& train_y, const Mat<double>& test_x,
                      const std::vector<int>& test_y, int classes, int iterations) {
  if (train_x.rows() != static_cast<Index>(train_y.size()) || test_x.rows() != static_cast<Index>(test_y.size()))
    throw DimensionError("probe: label count differs from sample count");
  if (train_x.cols() != test_x.cols()) throw DimensionError("probe: feature dims differ");
  RowVec<double> mu = train_x.colwise().mean();
  RowVec<double> sd = ((train_x.rowwise() - mu).array().square().colwise().mean()).sqrt().max(1e-8).matrix();
  auto standardise = [&](const Mat<double>& x) -> Mat<double> {
    return ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix();
  };
  const Mat<double> xs = standardise(train_x), ts = standardise(test_x);
  Parameter<double> w("probe.w", Mat<double>::Zero(train_x.cols(), classes));
  Parameter<double> b("probe.b", Mat<double>::Zero(1, classes));
  nn::AdamConfig cfg;
  cfg.lr = 0.05;
  nn::Adam<double> opt(cfg);
  for (int it = 0; it < iterations; ++it) {
    ag::Tape<double> t;
    auto logits = ag::add_row(ag::matmul(t.constant(xs), t.param(w)), t.param(b));
    auto loss = ag::add(ag::cross_entropy(logits, train_y), ag::scale(ag::sum(ag::square(t.param(w))), 1e-4));
    t.backward(loss);
    opt.step({&w, &b});
  }
  Mat<double> logits = ts * w.value;
  logits.rowwise() += b.value.row(0);
  int correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg;
    logits.row(i).maxCoeff(&arg);
    correct += static_cast<int>(arg) == test_y[static_cast<std::size_t>(i)];
  }
  return test_y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_y.size());
}

#define EMOTOKEN_INSTANTIATE_AUDIO(S)                                                                       \
  template class AudioModel<S>;                                                                             \
  template class AudioTrainer<S>;                                                                           \
  template EmotionComponent<S> encode_emotion<S>(const AudioModel<S>&, const AudioFeatureClip&);            \
  template ContentComponent<S> encode_content<S>(const AudioModel<S>&, const AudioFeatureClip&);            \
  template AudioFeatureClip decode_audio<S>(const AudioModel<S>&, const ContentComponent<S>&,               \
                                            const EmotionComponent<S>&);                                    \
  template AudioLossTerms<S> audio_loss<S>(ag::Tape<S>&, const AudioModel<S>&, const AudioBatch&);

EMOTOKEN_INSTANTIATE_AUDIO(float)
EMOTOKEN_INSTANTIATE_AUDIO(double)

}  // namespace emotoken
