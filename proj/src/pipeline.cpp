#include "emotoken/pipeline.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace emotoken::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << text;
}

Checkpoint load_checkpoint_or(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw ConfigError("missing checkpoint " + path + " (" + hint + ")");
  return Checkpoint::load(path);
}

Mat<float> row_mat(const RowVec<float>& r) { return Mat<float>(r); }

void set_regions(ClipInputs& in, int n, int ext_row, int ext_col, int grid_h, int grid_w) {
  in.regions.clear();
  for (const auto& lm : in.clip->landmarks) in.regions.push_back(facial_region(lm, n, ext_row, ext_col, grid_h, grid_w));
}

std::vector<int> facial_tokens(const TokenGrid& s, const FacialRegion& r) {
  std::vector<int> out;
  for (int p : r.flat()) out.push_back(s.indices[static_cast<std::size_t>(p)]);
  return out;
}

/// EA for (emotion, content row, facial tokens of s in region).
ag::Var<float> anchor_ea(ag::Tape<float>& t, const AnchorModule<float>& anchor, const RowVec<float>& emotion,
                         const RowVec<float>& content, const TokenGrid& s, const FacialRegion& region) {
  auto in = anchor.embed_condition_inputs(t, t.constant(row_mat(emotion)), t.constant(row_mat(content)),
                                          facial_tokens(s, region));
  return anchor.compute_ea(t, in.e_e, in.e_f).ea;
}

std::string curve_csv(const std::vector<VqStepStats>& c) {
  std::ostringstream os;
  os << "step,reconstruction,codebook,commitment,perceptual,adversarial,discriminator,total,used_codes\n";
  for (std::size_t i = 0; i < c.size(); ++i)
    os << i << ',' << c[i].reconstruction << ',' << c[i].codebook << ',' << c[i].commitment << ',' << c[i].perceptual
       << ',' << c[i].adversarial << ',' << c[i].discriminator << ',' << c[i].total << ',' << c[i].used_codes << '\n';
  return os.str();
}

std::string curve_csv(const std::vector<AudioStepStats>& c) {
  std::ostringstream os;
  os << "step,cross,self,cla,con,total\n";
  for (std::size_t i = 0; i < c.size(); ++i)
    os << i << ',' << c[i].cross << ',' << c[i].self << ',' << c[i].cla << ',' << c[i].con << ',' << c[i].total << '\n';
  return os.str();
}

std::string curve_csv(const std::vector<double>& c) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < c.size(); ++i) os << i << ',' << c[i] << '\n';
  return os.str();
}

std::vector<const ClipInputs*> split(const std::vector<ClipInputs>& all, const Corpus& corpus, bool test) {
  std::vector<const ClipInputs*> out;
  for (const auto& c : all)
    if (corpus.is_test(*c.clip) == test) out.push_back(&c);
  return out;
}

double heldout_nll_prepared(const Stage2Models& s2, const std::vector<const ClipInputs*>& test, int frames) {
  if (test.empty()) throw DataError("corpus has no held-out clips");
  double total = 0;
  for (int k = 0; k < frames; ++k) {
    const ClipInputs& c = *test[static_cast<std::size_t>(k) % test.size()];
    const int t = static_cast<int>((static_cast<std::size_t>(k) * 7 + k / static_cast<int>(test.size())) %
                                   c.tokens.size());
    ag::Tape<float> tape(false);
    total += frame_loss(tape, s2, c, t, 0.0).auto_loss.scalar();
  }
  return total / frames;
}

struct Stage1Fingerprints {
  std::uint64_t vq, audio;
};

Stage1Fingerprints fingerprints(const Stage1Models& s1) {
  return {nn::fingerprint(s1.vq->all_parameters()), nn::fingerprint(s1.audio->parameters())};
}

Stage2Result train_prepared(const PipelineConfig& cfg, const Stage1Models& s1, const std::vector<ClipInputs>& inputs,
                            const Corpus& corpus, const std::string& out_path, const Log& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const Seeds seeds = derive_seeds(cfg.seed);
  Stage2Result res;
  const auto before = fingerprints(s1);
  res.vq_fingerprint_before = before.vq;
  res.audio_fingerprint_before = before.audio;

  const auto train = split(inputs, corpus, false);
  const auto test = split(inputs, corpus, true);
  if (train.empty()) throw DataError("corpus has no training clips");

  Stage2Models s2 = make_stage2(cfg);
  nn::ParamList<float> params = s2.anchor->parameters();
  for (auto* p : s2.ar->parameters()) params.push_back(p);
  nn::AdamConfig oc;
  oc.lr = cfg.ar_lr;
  oc.beta2 = 0.99;
  oc.grad_clip = cfg.ar_grad_clip;
  nn::Adam<float> opt(oc);
  Rng rng(seeds.ar_batches);

  for (int step = 0; step < cfg.ar_steps; ++step) {
    double lr = cfg.ar_lr;
    if (step < cfg.ar_warmup) {
      lr *= static_cast<double>(step + 1) / (cfg.ar_warmup + 1);
    } else {
      const double p = static_cast<double>(step - cfg.ar_warmup) / std::max(1, cfg.ar_steps - cfg.ar_warmup);
      lr *= 0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * p));
    }
    opt.set_lr(lr);
    double acc = 0;
    for (int b = 0; b < cfg.ar_batch; ++b) {
      const ClipInputs& c = *train[static_cast<std::size_t>(rng() % train.size())];
      const int t = static_cast<int>(rng() % c.tokens.size());
      ag::Tape<float> tape;
      auto fl = frame_loss(tape, s2, c, t, cfg.lambda);
      const double v = fl.total.scalar();
      if (!std::isfinite(v)) throw NumericError("stage 2: non-finite loss at step " + std::to_string(step));
      tape.backward(fl.total);
      acc += v;
    }
    opt.step(params, 1.0 / cfg.ar_batch);
    res.curve.push_back(acc / cfg.ar_batch);
    if (step % cfg.log_every == 0 || step + 1 == cfg.ar_steps)
      log("ar step " + std::to_string(step) + " loss " + fmt("%.4f", res.curve.back()) + " lr " + fmt("%.2e", lr) +
          " " + fmt("%.0fs", seconds_since(t0)));
  }
  res.final_loss = res.curve.empty() ? 0.0 : res.curve.back();
  res.heldout_nll = heldout_nll_prepared(s2, test, cfg.ar_heldout_frames);
  const auto after = fingerprints(s1);
  res.vq_fingerprint_after = after.vq;
  res.audio_fingerprint_after = after.audio;
  if (!res.encoders_unchanged()) throw NumericError("stage 2 modified a frozen stage-1 encoder");

  Checkpoint ck;
  ck.meta["stage"] = "2";
  ck.meta["config_hash"] = hex64(cfg.hash());
  ck.meta["region.x"] = std::to_string(cfg.region_x);
  ck.meta["region.y"] = std::to_string(cfg.region_y);
  ck.meta["ar.lambda"] = cfg.get("ar.lambda");
  ck.meta["vq.fingerprint"] = hex64(after.vq);
  ck.meta["audio.fingerprint"] = hex64(after.audio);
  s2.anchor->save(ck);
  s2.ar->save(ck);
  ensure_dir(fs::path(out_path).parent_path().string());
  ck.save(out_path);
  write_text((fs::path(out_path).parent_path() / "ar_curve.csv").string(), curve_csv(res.curve));
  res.seconds = seconds_since(t0);
  log("stage 2 done: held-out nll " + fmt("%.4f", res.heldout_nll) + " in " + fmt("%.0fs", res.seconds));
  return res;
}

std::vector<ClipInputs> prepare_all(const Stage1Models& s1, const Corpus& corpus, int x, int y) {
  std::vector<ClipInputs> out;
  out.reserve(corpus.clips.size());
  for (const auto& c : corpus.clips) out.push_back(prepare_clip(s1, c, x, y));
  return out;
}

json stage2_json(const Stage2Result& r, const PipelineConfig& cfg, const std::string& ckpt) {
  return {{"config_hash", hex64(cfg.hash())},
          {"checkpoint", ckpt},
          {"heldout_nll", r.heldout_nll},
          {"uniform_nll", std::log(static_cast<double>(cfg.vq_K))},
          {"final_loss", r.final_loss},
          {"lambda", cfg.lambda},
          {"region", {cfg.region_x, cfg.region_y}},
          {"steps", cfg.ar_steps},
          {"seconds", r.seconds},
          {"vq_fingerprint", {hex64(r.vq_fingerprint_before), hex64(r.vq_fingerprint_after)}},
          {"audio_fingerprint", {hex64(r.audio_fingerprint_before), hex64(r.audio_fingerprint_after)}},
          {"encoders_unchanged", r.encoders_unchanged()}};
}

}  // namespace

void log_to_stderr(const std::string& line) { std::cerr << line << std::endl; }

const synth::ClipRecord& Corpus::clip(const std::string& id) const {
  for (const auto& c : clips)
    if (c.id == id) return c;
  throw DataError("clip '" + id + "' not in corpus " + dir);
}

const synth::ClipRecord* Corpus::find(int content, int emotion, int identity) const {
  for (const auto& c : clips)
    if (c.labels.content == content && c.labels.emotion == emotion && c.labels.identity == identity) return &c;
  return nullptr;
}

bool Corpus::is_test(const synth::ClipRecord& c) const {
  return synth::is_test_content(c.labels.content, manifest.spec.contents);
}

synth::Manifest make_corpus(const PipelineConfig& cfg) {
  cfg.validate();
  const auto manifest = synth::corpus_grid(cfg.corpus());
  synth::write_corpus(cfg.corpus_dir, manifest);
  return manifest;
}

Corpus load_corpus(const std::string& dir) {
  Corpus c;
  c.dir = dir;
  c.manifest = synth::read_manifest(dir);
  for (const auto& e : c.manifest.clips) c.clips.push_back(synth::load_clip(dir, e));
  if (c.clips.empty()) throw DataError("corpus " + dir + " has no clips");
  return c;
}

std::string stage1_dir(const PipelineConfig& cfg) { return (fs::path(cfg.run_dir) / "stage1").string(); }
std::string stage2_dir(const PipelineConfig& cfg) { return (fs::path(cfg.run_dir) / "stage2").string(); }
std::string vq_checkpoint_path(const PipelineConfig& cfg) { return (fs::path(stage1_dir(cfg)) / "vq.ckpt").string(); }
std::string audio_checkpoint_path(const PipelineConfig& cfg) {
  return (fs::path(stage1_dir(cfg)) / "audio.ckpt").string();
}
std::string ar_checkpoint_path(const PipelineConfig& cfg) { return (fs::path(stage2_dir(cfg)) / "ar.ckpt").string(); }

void record_run(const PipelineConfig& cfg, const std::string& section, const std::string& payload) {
  ensure_dir(cfg.run_dir);
  const auto path = fs::path(cfg.run_dir) / "manifest.json";
  json j = json::object();
  if (fs::exists(path)) {
    std::ifstream is(path);
    try {
      j = json::parse(is);
    } catch (const json::exception&) {
      j = json::object();
    }
  }
  const Seeds s = derive_seeds(cfg.seed);
  j["config_hash"] = hex64(cfg.hash());
  j["master_seed"] = cfg.seed;
  j["seeds"] = {{"vq", s.vq},         {"vq_batches", s.vq_batches}, {"audio", s.audio},
                {"audio_batches", s.audio_batches}, {"anchor", s.anchor},         {"ar", s.ar},
                {"ar_batches", s.ar_batches},       {"sample", cfg.sample_seed},  {"corpus", cfg.corpus_seed}};
  j["corpus"] = cfg.corpus_dir;
  json entry = payload.empty() ? json::object() : json::parse(payload);
  entry["config_hash"] = hex64(cfg.hash());
  j["stages"][section] = entry;
  write_text(path.string(), j.dump(2) + "\n");
  cfg.save((fs::path(cfg.run_dir) / "config.txt").string());
}

std::string read_run_manifest(const std::string& run_dir) {
  std::ifstream is(fs::path(run_dir) / "manifest.json");
  if (!is) throw DataError("run manifest missing in " + run_dir);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double heldout_vq_mse(const VqModel<float>& vq, const Corpus& corpus, int stride) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& c : corpus.clips) {
    if (!corpus.is_test(c)) continue;
    for (std::size_t t = 0; t < c.frames.size(); t += static_cast<std::size_t>(stride)) {
      const Frame rec = detokenize(vq, tokenize(vq, c.frames[t]));
      total += (rec.pixels - c.frames[t].pixels).squaredNorm() / static_cast<double>(rec.pixels.size());
      ++count;
    }
  }
  if (!count) throw DataError("corpus has no held-out frames");
  return total / static_cast<double>(count);
}

VqStageResult train_vq(const PipelineConfig& cfg, const Corpus& corpus, const Log& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Seeds seeds = derive_seeds(cfg.seed);
  std::vector<const Frame*> pool;
  for (const auto& c : corpus.clips) {
    if (corpus.is_test(c)) continue;
    for (const auto& f : c.frames) {
      if (f.height != cfg.corpus_size || f.width != cfg.corpus_size)
        throw DataError("corpus frame size differs from corpus.size");
      pool.push_back(&f);
    }
  }
  if (pool.empty()) throw DataError("corpus has no training frames");

  VqModel<float> vq(cfg.vq());
  nn::AdamConfig gen, disc;
  gen.lr = cfg.vq_lr;
  disc.lr = cfg.vq_disc_lr;
  VqTrainer<float> trainer(vq, gen, disc, seeds.vq_batches);
  Rng rng(mix_seed(seeds.vq_batches, 1));
  VqStageResult res;
  for (int step = 0; step < cfg.vq_steps; ++step) {
    std::vector<const Frame*> batch;
    for (int b = 0; b < cfg.vq_batch; ++b) batch.push_back(pool[rng() % pool.size()]);
    res.curve.push_back(trainer.step(batch));
    const auto& s = res.curve.back();
    if (step % cfg.log_every == 0 || step + 1 == cfg.vq_steps)
      log("vq step " + std::to_string(step) + " rec " + fmt("%.5f", s.reconstruction) + " per " +
          fmt("%.5f", s.perceptual) + " adv " + fmt("%.3f", s.adversarial) + " codes " +
          std::to_string(s.used_codes) + " " + fmt("%.0fs", seconds_since(t0)));
  }
  res.heldout_mse = heldout_vq_mse(vq, corpus);
  res.used_codes = res.curve.empty() ? 0 : res.curve.back().used_codes;
  vq.freeze();
  res.fingerprint = nn::fingerprint(vq.all_parameters());

  Checkpoint ck;
  ck.meta["stage"] = "1";
  ck.meta["config_hash"] = hex64(cfg.hash());
  vq.save(ck);
  ck.meta["fingerprint"] = hex64(res.fingerprint);
  ensure_dir(stage1_dir(cfg));
  ck.save(vq_checkpoint_path(cfg));
  write_text((fs::path(stage1_dir(cfg)) / "vq_curve.csv").string(), curve_csv(res.curve));
  log("vq done: held-out mse " + fmt("%.5f", res.heldout_mse) + " in " + fmt("%.0fs", seconds_since(t0)));
  record_run(cfg, "train-vq",
             json{{"checkpoint", vq_checkpoint_path(cfg)},
                  {"heldout_mse", res.heldout_mse},
                  {"used_codes", res.used_codes},
                  {"steps", cfg.vq_steps},
                  {"fingerprint", hex64(res.fingerprint)},
                  {"seconds", seconds_since(t0)}}
                 .dump());
  return res;
}

ProbeResult audio_probes(const AudioModel<float>& audio, const Corpus& corpus) {
  std::vector<RowVec<double>> e[2], c[2], r[2];
  std::vector<int> y[2];
  for (const auto& clip : corpus.clips) {
    const int s = corpus.is_test(clip) ? 1 : 0;
    const RowVec<double> ev = encode_emotion(audio, clip.audio).vector.cast<double>();
    const RowVec<double> cv = encode_content(audio, clip.audio).pooled().cast<double>();
    const RowVec<double> rv = clip.audio.features.colwise().mean().cast<double>();
    e[s].push_back(ev);
    c[s].push_back(cv);
    r[s].push_back(rv);
    y[s].push_back(clip.labels.emotion);
  }
  if (y[0].empty() || y[1].empty()) throw DataError("probes need both training and held-out clips");
  auto stack = [](const std::vector<RowVec<double>>& v) {
    Mat<double> m(static_cast<Index>(v.size()), v.front().cols());
    for (std::size_t i = 0; i < v.size(); ++i) m.row(static_cast<Index>(i)) = v[i];
    return m;
  };
  ProbeResult p;
  p.emotion = probe_accuracy(stack(e[0]), y[0], stack(e[1]), y[1], synth::kEmotions);
  p.content = probe_accuracy(stack(c[0]), y[0], stack(c[1]), y[1], synth::kEmotions);
  p.raw = probe_accuracy(stack(r[0]), y[0], stack(r[1]), y[1], synth::kEmotions);
  return p;
}

AudioStageResult train_audio(const PipelineConfig& cfg, const Corpus& corpus, const Log& log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Seeds seeds = derive_seeds(cfg.seed);
  std::vector<const AudioFeatureClip*> pool;
  for (const auto& c : corpus.clips)
    if (!corpus.is_test(c)) pool.push_back(&c.audio);
  if (pool.empty()) throw DataError("corpus has no training clips");

  AudioModel<float> audio(cfg.audio());
  nn::AdamConfig oc;
  oc.lr = cfg.audio_lr;
  AudioTrainer<float> trainer(audio, oc);
  Rng rng(seeds.audio_batches);
  AudioStageResult res;
  for (int step = 0; step < cfg.audio_steps; ++step) {
    res.curve.push_back(trainer.step(sample_audio_batch(pool, cfg.audio_quads, rng)));
    const auto& s = res.curve.back();
    if (step % cfg.log_every == 0 || step + 1 == cfg.audio_steps)
      log("audio step " + std::to_string(step) + " cross " + fmt("%.4f", s.cross) + " self " + fmt("%.4f", s.self) +
          " cla " + fmt("%.4f", s.cla) + " con " + fmt("%.4f", s.con));
  }
  const ProbeResult p = audio_probes(audio, corpus);
  res.emotion_probe = p.emotion;
  res.content_probe = p.content;
  res.raw_probe = p.raw;
  audio.freeze();
  res.fingerprint = nn::fingerprint(audio.parameters());

  Checkpoint ck;
  ck.meta["stage"] = "1";
  ck.meta["config_hash"] = hex64(cfg.hash());
  audio.save(ck);
  ck.meta["fingerprint"] = hex64(res.fingerprint);
  ensure_dir(stage1_dir(cfg));
  ck.save(audio_checkpoint_path(cfg));
  write_text((fs::path(stage1_dir(cfg)) / "audio_curve.csv").string(), curve_csv(res.curve));
  log("audio done: probes emotion " + fmt("%.3f", p.emotion) + " content " + fmt("%.3f", p.content) + " raw " +
      fmt("%.3f", p.raw));
  record_run(cfg, "train-audio",
             json{{"checkpoint", audio_checkpoint_path(cfg)},
                  {"emotion_probe", p.emotion},
                  {"content_probe", p.content},
                  {"raw_probe", p.raw},
                  {"chance", 1.0 / synth::kEmotions},
                  {"steps", cfg.audio_steps},
                  {"fingerprint", hex64(res.fingerprint)},
                  {"seconds", seconds_since(t0)}}
                 .dump());
  return res;
}

Stage1Models load_stage1(const PipelineConfig& cfg) {
  cfg.validate();
  const auto vq_ck = load_checkpoint_or(vq_checkpoint_path(cfg), "run train-vq first");
  const auto audio_ck = load_checkpoint_or(audio_checkpoint_path(cfg), "run train-audio first");
  if (!vq_ck.meta.count("vq.frozen") || vq_ck.get("vq.frozen") != "1")
    throw ConfigError("visual checkpoint is not a finished, frozen stage-1 model");
  if (!audio_ck.meta.count("audio.frozen") || audio_ck.get("audio.frozen") != "1")
    throw ConfigError("audio checkpoint is not a finished, frozen stage-1 model");
  Stage1Models s;
  s.vq = std::make_unique<VqModel<float>>(cfg.vq());
  s.vq->load(vq_ck);
  s.audio = std::make_unique<AudioModel<float>>(cfg.audio());
  s.audio->load(audio_ck);
  return s;
}

ClipInputs prepare_clip(const Stage1Models& s1, const synth::ClipRecord& clip, int ext_row, int ext_col) {
  if (clip.landmarks.size() != clip.frames.size()) throw DataError("clip " + clip.id + ": missing landmarks");
  if (clip.audio.frames() != clip.length()) throw DataError("clip " + clip.id + ": audio length differs from video");
  const VqConfig& vc = s1.vq->config();
  ClipInputs in;
  in.clip = &clip;
  for (const auto& f : clip.frames) in.tokens.push_back(tokenize(*s1.vq, f));
  set_regions(in, vc.downsample, ext_row, ext_col, vc.grid_h(), vc.grid_w());
  in.emotion = encode_emotion(*s1.audio, clip.audio).vector;
  in.content = encode_content(*s1.audio, clip.audio).frames;
  return in;
}

Stage2Models make_stage2(const PipelineConfig& cfg) {
  Stage2Models m;
  m.anchor = std::make_unique<AnchorModule<float>>(cfg.anchor());
  m.ar = std::make_unique<ArModel<float>>(cfg.ar());
  return m;
}

Stage2Models load_stage2(const PipelineConfig& cfg, const std::string& path) {
  const auto ck = load_checkpoint_or(path, "run train-ar first");
  if (!ck.meta.count("stage") || ck.get("stage") != "2") throw DataError(path + " is not a stage-2 checkpoint");
  PipelineConfig c = cfg;
  c.region_x = static_cast<int>(ck.get_int("region.x"));
  c.region_y = static_cast<int>(ck.get_int("region.y"));
  Stage2Models m = make_stage2(c);
  m.anchor->load(ck);
  m.ar->load(ck);
  return m;
}

FrameLoss frame_loss(ag::Tape<float>& t, const Stage2Models& m, const ClipInputs& clip, int frame, double lambda) {
  const auto f = static_cast<std::size_t>(frame);
  const TokenGrid& s = clip.tokens[f];
  const FacialRegion& region = clip.regions[f];
  auto ea = anchor_ea(t, *m.anchor, clip.emotion, clip.content.row(frame), s, region);
  auto cond = m.anchor->build_condition(t, s, ea, region);
  FrameLoss out;
  out.auto_loss = nll(t, *m.ar, cond, s);
  if (lambda > 0 && frame > 0) {
    auto prev = m.anchor->build_condition(t, clip.tokens[f - 1], ea, region);
    out.conti_loss = continuity_loss(t, *m.ar, &prev, s);
  } else {
    out.conti_loss = continuity_loss<float>(t, *m.ar, nullptr, s);
  }
  out.total = total_loss(out.auto_loss, out.conti_loss, static_cast<float>(lambda));
  return out;
}

Stage2Result train_stage2(const PipelineConfig& cfg, const Corpus& corpus, const std::string& out_path,
                          const Log& log) {
  cfg.validate();
  const Stage1Models s1 = load_stage1(cfg);
  const auto inputs = prepare_all(s1, corpus, cfg.region_x, cfg.region_y);
  const auto res = train_prepared(cfg, s1, inputs, corpus, out_path, log);
  record_run(cfg, "train-ar", stage2_json(res, cfg, out_path).dump());
  return res;
}

double heldout_nll(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg, const Corpus& corpus) {
  std::vector<ClipInputs> inputs;
  for (const auto& c : corpus.clips)
    if (corpus.is_test(c))
      inputs.push_back(prepare_clip(s1, c, s2.anchor->config().ext_row, s2.anchor->config().ext_col));
  std::vector<const ClipInputs*> ptrs;
  for (const auto& i : inputs) ptrs.push_back(&i);
  return heldout_nll_prepared(s2, ptrs, cfg.ar_heldout_frames);
}

Generation generate(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg,
                    const synth::ClipRecord& target, const EmotionSource& source, int length,
                    const SamplingConfig& sampling) {
  const VqConfig& vc = s1.vq->config();
  if (vc.codebook_size != s2.ar->config().vocab || vc.codebook_size != s2.anchor->config().vocab)
    throw DataError("vocabulary mismatch between the visual checkpoint and the stage-2 checkpoint");
  if (length < 1 || length > target.length())
    throw ConfigError("length must lie in [1, " + std::to_string(target.length()) + "]");
  if (static_cast<int>(target.landmarks.size()) < length) throw DataError("target clip " + target.id + " lacks landmarks");
  if (target.audio.frames() < length) throw DataError("target clip " + target.id + " lacks audio frames");
  sampling.validate(vc.codebook_size);

  RowVec<float> emotion;
  if (source.audio) {
    source.audio->validate();
    emotion = encode_emotion(*s1.audio, *source.audio).vector;
  } else if (source.emotion_id) {
    synth::AudioSynthConfig ac;
    ac.noise = cfg.corpus_audio_noise;
    const auto clip = synth::synth_audio(target.labels.content, *source.emotion_id, target.length(),
                                         mix_seed(sampling.seed, 0xe0), ac);
    emotion = encode_emotion(*s1.audio, clip).vector;
  } else {
    throw ConfigError("generate needs an emotion source: audio clip or emotion id");
  }
  const Mat<float> content = encode_content(*s1.audio, target.audio).frames;

  Generation g;
  const int ext_row = s2.anchor->config().ext_row, ext_col = s2.anchor->config().ext_col;
  for (int t = 0; t < length; ++t) {
    const TokenGrid s = tokenize(*s1.vq, target.frames[static_cast<std::size_t>(t)]);
    const FacialRegion region =
        facial_region(target.landmarks[static_cast<std::size_t>(t)], vc.downsample, ext_row, ext_col, vc.grid_h(), vc.grid_w());
    ag::Tape<float> tape(false);
    auto ea = anchor_ea(tape, *s2.anchor, emotion, content.row(t), s, region);
    auto cond = s2.anchor->build_condition(tape, s, ea, region);
    SamplingConfig sc = sampling;
    sc.seed = mix_seed(sampling.seed, static_cast<std::uint64_t>(t));
    TokenGrid out = s2.ar->sample(cond.value(), sc);
    g.frames.push_back(detokenize(*s1.vq, out));
    g.tokens.push_back(std::move(out));
    g.source_tokens.push_back(s);
    g.regions.push_back(region);
  }
  return g;
}

void write_generation(const std::string& dir, const Generation& g, const std::string& meta_json) {
  ensure_dir(dir);
  json regions = json::array();
  for (std::size_t t = 0; t < g.frames.size(); ++t) {
    char name[64];
    std::snprintf(name, sizeof name, "frame_%03zu.png", t);
    write_png((fs::path(dir) / name).string(), g.frames[t]);
    std::snprintf(name, sizeof name, "tokens_%03zu.bin", t);
    save_token_grid((fs::path(dir) / name).string(), g.tokens[t]);
    regions.push_back(json::parse(region_json(g.regions[t])));
  }
  synth::save_frames((fs::path(dir) / "frames.bin").string(), g.frames);
  write_text((fs::path(dir) / "regions.json").string(), regions.dump(2) + "\n");
  write_text((fs::path(dir) / "generation.json").string(), json::parse(meta_json).dump(2) + "\n");
}

LandmarkSeq generated_landmarks(const std::vector<Frame>& frames, int identity) {
  LandmarkSeq out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(synth::estimate_landmarks(f, identity));
  return out;
}

std::vector<SwapPair> swap_pairs(const Corpus& corpus, int count, std::uint64_t seed) {
  std::vector<const synth::ClipRecord*> test;
  for (const auto& c : corpus.clips)
    if (corpus.is_test(c)) test.push_back(&c);
  if (test.empty()) throw DataError("corpus has no held-out clips for swap pairs");
  Rng rng(seed);
  std::shuffle(test.begin(), test.end(), rng);
  std::vector<SwapPair> out;
  for (int k = 0; k < count; ++k) {
    const auto& tgt = *test[static_cast<std::size_t>(k) % test.size()];
    const int p = tgt.labels.emotion;
    const int q = (p + 1 + static_cast<int>(rng() % (synth::kEmotions - 1))) % synth::kEmotions;
    const auto* ref = corpus.find(tgt.labels.content, q, tgt.labels.identity);
    if (!ref) throw DataError("corpus lacks the swap reference for " + tgt.id);
    const synth::ClipRecord* emo = nullptr;
    for (const auto* c : test)
      if (c->labels.emotion == q && c->labels.content != tgt.labels.content) {
        emo = c;
        break;
      }
    if (!emo) emo = ref;
    out.push_back({tgt.id, ref->id, emo->id, q});
  }
  return out;
}

SwapEvaluation evaluate_swaps(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg,
                              const Corpus& corpus, const std::vector<SwapPair>& pairs, int length,
                              const SamplingConfig& sampling, const Log& log) {
  SwapEvaluation ev;
  std::size_t in_changed = 0, in_total = 0, out_changed = 0, out_total = 0, agree = 0, agree_total = 0;
  double flips = 0;
  for (const auto& pair : pairs) {
    const auto& target = corpus.clip(pair.target);
    const auto& ref = corpus.clip(pair.reference);
    const auto& emo = corpus.clip(pair.emotion_clip);
    const int T = std::min({length, target.length(), ref.length()});
    EmotionSource own{target.audio, std::nullopt, target.id};
    EmotionSource swap{emo.audio, std::nullopt, emo.id};
    const Generation a = generate(s1, s2, cfg, target, own, T, sampling);
    const Generation b = generate(s1, s2, cfg, target, swap, T, sampling);
    for (int t = 0; t < T; ++t) {
      const auto& r = a.regions[static_cast<std::size_t>(t)];
      std::vector<char> inside(a.tokens[0].size(), 0);
      for (int p : r.flat()) inside[static_cast<std::size_t>(p)] = 1;
      const auto& ta = a.tokens[static_cast<std::size_t>(t)].indices;
      const auto& tb = b.tokens[static_cast<std::size_t>(t)].indices;
      const auto& src = a.source_tokens[static_cast<std::size_t>(t)].indices;
      for (std::size_t i = 0; i < ta.size(); ++i) {
        if (inside[i]) {
          in_changed += ta[i] != tb[i];
          ++in_total;
        } else {
          out_changed += ta[i] != tb[i];
          ++out_total;
          agree += ta[i] == src[i];
          ++agree_total;
        }
      }
    }
    flips += metrics::flip_rate(b.tokens);
    const std::vector<Frame> ref_frames(ref.frames.begin(), ref.frames.begin() + T);
    const LandmarkSeq ref_lm(ref.landmarks.begin(), ref.landmarks.begin() + T);
    ev.report.clips.push_back(metrics::score_clip(pair.target + "->" + synth::emotion_name(pair.emotion), b.frames,
                                                  generated_landmarks(b.frames, target.labels.identity), ref_frames,
                                                  ref_lm));
    const auto& m = ev.report.clips.back();
    log("  " + m.id + " f_ld " + fmt("%.3f", m.f_ld) + " m_ld " + fmt("%.3f", m.m_ld) + " f_lvd " + fmt("%.3f", m.f_lvd));
  }
  ev.inside_change = in_total ? static_cast<double>(in_changed) / in_total : 0;
  ev.outside_change = out_total ? static_cast<double>(out_changed) / out_total : 0;
  ev.self_outside_agreement = agree_total ? static_cast<double>(agree) / agree_total : 0;
  ev.flip_rate = pairs.empty() ? 0 : flips / static_cast<double>(pairs.size());
  ev.report.extra["inside_change"] = ev.inside_change;
  ev.report.extra["outside_change"] = ev.outside_change;
  ev.report.extra["flip_rate"] = ev.flip_rate;
  ev.report.extra["self_outside_agreement"] = ev.self_outside_agreement;
  return ev;
}

std::vector<AblationVariant> default_variants() {
  return {{"x5_lambda0.5", 5, 5, 0.5}, {"x5_lambda0", 5, 5, 0.0}, {"x3_lambda0.5", 3, 3, 0.5}, {"x7_lambda0.5", 7, 7, 0.5}};
}

std::vector<AblationRow> ablate(const PipelineConfig& cfg, const Corpus& corpus,
                                const std::vector<AblationVariant>& variants, int pair_count, int length,
                                const Log& log) {
  cfg.validate();
  const Stage1Models s1 = load_stage1(cfg);
  std::vector<ClipInputs> inputs = prepare_all(s1, corpus, cfg.region_x, cfg.region_y);
  const auto pairs = swap_pairs(corpus, pair_count, mix_seed(cfg.seed, 0xab1a7e));
  const VqConfig& vc = s1.vq->config();
  const std::string root = (fs::path(cfg.run_dir) / "ablate").string();
  std::vector<AblationRow> rows;
  json table = json::array();
  for (const auto& v : variants) {
    log("ablation variant " + v.name);
    PipelineConfig vcfg = cfg;
    vcfg.region_x = v.x;
    vcfg.region_y = v.y;
    vcfg.lambda = v.lambda;
    vcfg.validate();
    for (auto& in : inputs) set_regions(in, vc.downsample, v.x, v.y, vc.grid_h(), vc.grid_w());
    const std::string ckpt = (fs::path(root) / v.name / "ar.ckpt").string();
    const auto trained = train_prepared(vcfg, s1, inputs, corpus, ckpt, log);
    const Stage2Models s2 = load_stage2(vcfg, ckpt);
    const auto ev = evaluate_swaps(s1, s2, vcfg, corpus, pairs, length, vcfg.sampling(), log);
    AblationRow row;
    row.variant = v;
    row.aggregate = ev.report.aggregate();
    row.flip_rate = ev.flip_rate;
    row.inside_change = ev.inside_change;
    row.outside_change = ev.outside_change;
    row.heldout_nll = trained.heldout_nll;
    row.train_seconds = trained.seconds;
    row.self_outside_agreement = ev.self_outside_agreement;
    row.encoders_unchanged = trained.encoders_unchanged();
    rows.push_back(row);
    write_text((fs::path(root) / v.name / "report.json").string(), ev.report.json() + "\n");
    table.push_back({{"variant", v.name},
                     {"x", v.x},
                     {"y", v.y},
                     {"lambda", v.lambda},
                     {"m_ld", row.aggregate.m_ld},
                     {"m_lvd", row.aggregate.m_lvd},
                     {"f_ld", row.aggregate.f_ld},
                     {"f_lvd", row.aggregate.f_lvd},
                     {"ssim", row.aggregate.ssim},
                     {"psnr", row.aggregate.psnr},
                     {"flip_rate", row.flip_rate},
                     {"inside_change", row.inside_change},
                     {"outside_change", row.outside_change},
                     {"self_outside_agreement", row.self_outside_agreement},
                     {"heldout_nll", row.heldout_nll},
                     {"train_seconds", row.train_seconds}});
  }
  ensure_dir(root);
  write_text((fs::path(root) / "ablation.json").string(), table.dump(2) + "\n");
  write_text((fs::path(root) / "ablation.md").string(), ablation_markdown(rows));
  record_run(cfg, "ablate", json{{"table", table}, {"pairs", pair_count}, {"length", length}}.dump());
  return rows;
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| variant | x | y | lambda | M-LD | M-LVD | F-LD | F-LVD | SSIM | PSNR | flip rate | held-out NLL |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %d | %d | %.2f | %.3f | %.3f | %.3f | %.3f | %.3f | %.2f | %.4f | %.4f |\n",
                  r.variant.name.c_str(), r.variant.x, r.variant.y, r.variant.lambda, r.aggregate.m_ld,
                  r.aggregate.m_lvd, r.aggregate.f_ld, r.aggregate.f_lvd, r.aggregate.ssim, r.aggregate.psnr,
                  r.flip_rate, r.heldout_nll);
    os << buf;
  }
  return os.str();
}

}  // namespace emotoken::pipeline
