#include "emotoken/synth_data.hpp"

#include "emotoken/core/binary_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace emotoken::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::array<const char*, kEmotions> kNames = {"neutral", "angry",  "contempt", "disgusted",
                                                   "fear",    "happy",  "sad",      "surprised"};

// brow angle, mouth curvature, eye openness
constexpr double kEmotionTable[kEmotions][3] = {
    {0.00, 0.0, 1.00},  {-0.45, -1.0, 0.80}, {-0.20, 0.8, 0.85}, {-0.30, -1.6, 0.65},
    {0.30, -0.8, 1.35}, {0.10, 1.8, 0.90},   {0.38, -1.8, 0.85}, {0.45, 0.4, 1.50},
};

double coverage(double sd) { return std::clamp(0.5 - sd, 0.0, 1.0); }

double ellipse_sd(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = x - cx, dy = y - cy;
  const double g = (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) - 1.0;
  const double gx = 2 * dx / (rx * rx), gy = 2 * dy / (ry * ry);
  return g / std::max(std::sqrt(gx * gx + gy * gy), 1e-6);
}

double capsule_sd(double x, double y, double ax, double ay, double bx, double by, double r) {
  const double px = x - ax, py = y - ay, ux = bx - ax, uy = by - ay;
  const double h = std::clamp((px * ux + py * uy) / (ux * ux + uy * uy), 0.0, 1.0);
  const double ex = px - h * ux, ey = py - h * uy;
  return std::sqrt(ex * ex + ey * ey) - r;
}

void blend(float* px, const float* color, double a) {
  if (a <= 0) return;
  for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(px[c] * (1 - a) + color[c] * a);
}

// Feature geometry in frame pixels.
struct Geometry {
  double k;
  double brow_y, brow_dx, brow_half, brow_r;
  double eye_y, eye_dx, eye_rx, eye_ry, pupil_r;
  double mouth_x, mouth_y, mouth_hw, lip;
  double curv, open, angle;

  Geometry(const Style& s, const RenderControls& c) {
    k = s.scale;
    brow_y = s.cy - 6.0 * k;
    brow_dx = 4.5 * k;
    brow_half = 2.2 * k;
    brow_r = 0.6 * k;
    eye_y = s.cy - 2.5 * k;
    eye_dx = 4.2 * k;
    eye_rx = 2.1 * k;
    eye_ry = std::max(1.1 * c.eye_openness, 0.05) * k;
    pupil_r = 0.85 * k;
    mouth_x = s.cx;
    mouth_y = s.cy + 7.0 * k;
    mouth_hw = 4.6 * k;
    lip = 0.9 * k;
    curv = c.mouth_curvature * k;
    open = std::max(c.mouth_openness, 0.0) * k;
    angle = c.brow_angle;
  }

  double mouth_center(double u) const { return mouth_y - curv * u * u; }
  double outer_half(double u) const { return (lip + open / 2) * std::sqrt(std::max(0.0, 1 - u * u)); }
  double inner_half(double u) const { return (open / 2) * std::sqrt(std::max(0.0, 1 - u * u)); }

  // brow point at s in [-1, 1]; side -1 = image-left brow (inner end at s=+1)
  std::pair<double, double> brow_point(const Style& st, int side, double s) const {
    const double bx = st.cx + side * brow_dx;
    const double x = bx + s * brow_half * std::cos(angle);
    const double y = brow_y + side * s * brow_half * std::sin(angle);
    return {x, y};
  }
};

const float kBrow[3] = {0.15f, 0.10f, 0.05f};
const float kEyeWhite[3] = {0.97f, 0.97f, 0.97f};
const float kPupil[3] = {0.10f, 0.10f, 0.20f};
const float kLip[3] = {0.75f, 0.25f, 0.30f};
const float kMouthInner[3] = {0.25f, 0.05f, 0.08f};

void render_rows(const Style& s, const RenderControls& c, int size, int y0, int y1, float* out) {
  const Geometry g(s, c);
  const double k = s.scale;
  float nose[3];
  for (int i = 0; i < 3; ++i) nose[i] = s.skin[i] * 0.8f;
  const auto bl = g.brow_point(s, -1, -1), br = g.brow_point(s, -1, 1);
  const auto cl = g.brow_point(s, 1, -1), cr = g.brow_point(s, 1, 1);
  for (int y = y0; y < y1; ++y) {
    for (int x = 0; x < size; ++x) {
      float* px = out + (static_cast<std::size_t>(y - y0) * size + x) * 3;
      const double fx = x + 0.5, fy = y + 0.5;
      for (int i = 0; i < 3; ++i) px[i] = s.background[i];
      blend(px, s.hair, coverage(ellipse_sd(fx, fy, s.cx, s.cy - 5.5 * k, s.rx + 1.2 * k, 8.5 * k)));
      blend(px, s.skin, coverage(ellipse_sd(fx, fy, s.cx, s.cy, s.rx, s.ry)));
      blend(px, kBrow, coverage(capsule_sd(fx, fy, bl.first, bl.second, br.first, br.second, g.brow_r)));
      blend(px, kBrow, coverage(capsule_sd(fx, fy, cl.first, cl.second, cr.first, cr.second, g.brow_r)));
      for (int side : {-1, 1}) {
        const double ex = s.cx + side * g.eye_dx;
        const double eye = coverage(ellipse_sd(fx, fy, ex, g.eye_y, g.eye_rx, g.eye_ry));
        blend(px, kEyeWhite, eye);
        const double pupil = coverage(ellipse_sd(fx, fy, ex, g.eye_y, g.pupil_r, g.pupil_r));
        blend(px, kPupil, std::min(eye, pupil));
      }
      blend(px, nose, coverage(capsule_sd(fx, fy, s.cx, s.cy - 1.5 * k, s.cx + 0.3 * k, s.cy + 2.5 * k, 0.5 * k)));
      const double u = std::clamp((fx - g.mouth_x) / g.mouth_hw, -1.0, 1.0);
      const double dy = std::abs(fy - g.mouth_center(u));
      const double outer = std::max(dy - g.outer_half(u), std::abs(fx - g.mouth_x) - g.mouth_hw);
      blend(px, kLip, coverage(outer));
      if (g.open > 0) {
        const double inner = std::max(dy - g.inner_half(u), std::abs(fx - g.mouth_x) - 0.85 * g.mouth_hw);
        blend(px, kMouthInner, coverage(inner));
      }
    }
  }
}

double band_error(const Frame& f, const Style& s, const RenderControls& c, int y0, int y1, std::vector<float>& buf) {
  const int size = f.width;
  buf.resize(static_cast<std::size_t>(y1 - y0) * size * 3);
  render_rows(s, c, size, y0, y1, buf.data());
  double err = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = 0; x < size; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const double d = f.at(y, x, ch) - buf[(static_cast<std::size_t>(y - y0) * size + x) * 3 + ch];
        err += d * d;
      }
  return err;
}

std::pair<int, int> band(const Style& s, double lo, double hi, int size) {
  const int y0 = std::clamp(static_cast<int>(std::floor(s.cy + lo * s.scale)), 0, size);
  const int y1 = std::clamp(static_cast<int>(std::ceil(s.cy + hi * s.scale)), 0, size);
  return {y0, y1};
}

template <typename Set>
double search_1d(double lo, double hi, double step, double fine, const Set& eval) {
  double best = lo, best_e = eval(lo);
  for (double v = lo + step; v <= hi + 1e-9; v += step) {
    const double e = eval(v);
    if (e < best_e) best_e = e, best = v;
  }
  const double centre = best;
  for (double v = centre - step; v <= centre + step + 1e-9; v += fine) {
    const double e = eval(v);
    if (e < best_e) best_e = e, best = v;
  }
  return best;
}

std::string clip_id(const ClipLabels& l) {
  return "c" + std::to_string(l.content) + "_e" + std::to_string(l.emotion) + "_i" + std::to_string(l.identity);
}

struct Patterns {
  std::array<Mat<float>, 4> content;
  Mat<float> common;
  std::array<Mat<float>, kEmotions> emotion;
};

const Patterns& patterns(std::uint64_t seed) {
  static thread_local std::uint64_t cached_seed = 0;
  static thread_local Patterns cached;
  static thread_local bool ready = false;
  if (!ready || cached_seed != seed) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 0.5);
    auto draw = [&] {
      Mat<float> m(1, kAudioFeatures);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(n(rng));
      return m;
    };
    for (auto& b : cached.content) b = draw();
    cached.common = draw();
    for (auto& e : cached.emotion) e = draw();
    cached_seed = seed;
    ready = true;
  }
  return cached;
}

}  // namespace

const char* emotion_name(int p) {
  if (p < 0 || p >= kEmotions) throw RangeError("emotion id out of range");
  return kNames[static_cast<std::size_t>(p)];
}

int emotion_from_name(const std::string& name) {
  for (int p = 0; p < kEmotions; ++p)
    if (name == kNames[static_cast<std::size_t>(p)]) return p;
  try {
    std::size_t used = 0;
    int p = std::stoi(name, &used);
    if (used == name.size() && p >= 0 && p < kEmotions) return p;
  } catch (const std::exception&) {
  }
  throw ConfigError("unknown emotion '" + name + "'");
}

Style identity_style(int identity, int size) {
  if (identity < 0) throw RangeError("identity must be non-negative");
  if (size < 8) throw DimensionError("sprite frames need at least 8 pixels");
  Style s;
  s.scale = size / 32.0;
  const float palettes[2][3][3] = {
      {{0.55f, 0.70f, 0.85f}, {0.95f, 0.78f, 0.62f}, {0.25f, 0.15f, 0.08f}},
      {{0.80f, 0.75f, 0.55f}, {0.72f, 0.52f, 0.38f}, {0.08f, 0.08f, 0.10f}},
  };
  double dx = 0, dy = 0, rx = 10, ry = 12.5;
  if (identity < 2) {
    for (int c = 0; c < 3; ++c) {
      s.background[c] = palettes[identity][0][c];
      s.skin[c] = palettes[identity][1][c];
      s.hair[c] = palettes[identity][2][c];
    }
    if (identity == 1) dx = 0.5, dy = -0.2, rx = 9.4, ry = 12.2;
  } else {
    Rng rng(mix_seed(0x1d, static_cast<std::uint64_t>(identity)));
    std::uniform_real_distribution<double> u(0, 1);
    for (int c = 0; c < 3; ++c) {
      s.background[c] = static_cast<float>(0.3 + 0.6 * u(rng));
      s.skin[c] = static_cast<float>(0.45 + 0.5 * u(rng));
      s.hair[c] = static_cast<float>(0.3 * u(rng));
    }
    dx = 1.6 * u(rng) - 0.8;
    dy = 0.6 * u(rng) - 0.4;
    rx = 9.2 + 1.0 * u(rng);
    ry = 12.0 + 0.6 * u(rng);
  }
  s.cx = (16 + dx) * s.scale;
  s.cy = (13.8 + dy) * s.scale;
  s.rx = rx * s.scale;
  s.ry = ry * s.scale;
  return s;
}

double content_openness(int content, int t) {
  const double f = 1.6 + 0.37 * (content % 7);
  const double phi = 0.9 * content;
  const double w = 2 * kPi * f * t / kFps;
  const double v = 0.5 + 0.35 * std::sin(w + phi) + 0.15 * std::sin(1.7 * w + 2 * phi);
  return 3.0 * std::clamp(v, 0.0, 1.0);
}

RenderControls emotion_controls(int emotion) {
  if (emotion < 0 || emotion >= kEmotions) throw RangeError("emotion id out of range");
  RenderControls c;
  c.brow_angle = kEmotionTable[emotion][0];
  c.mouth_curvature = kEmotionTable[emotion][1];
  c.eye_openness = kEmotionTable[emotion][2];
  return c;
}

RenderControls controls(const SpriteParams& p) {
  if (p.content < 0) throw RangeError("content id must be non-negative");
  RenderControls c = emotion_controls(p.emotion);
  c.mouth_openness = content_openness(p.content, p.frame);
  return c;
}

Frame render(const Style& style, const RenderControls& c, int size) {
  Frame f(size, size);
  render_rows(style, c, size, 0, size, f.pixels.data());
  return f;
}

Landmarks landmarks(const Style& s, const RenderControls& c, int /*size*/) {
  const Geometry g(s, c);
  Landmarks l(kLandmarkCount, 2);
  auto set = [&](int i, double x, double y) {
    l(i, 0) = x;
    l(i, 1) = y;
  };
  for (int i = 0; i <= 16; ++i) {
    const double th = kPi - i * kPi / 16;
    set(i, s.cx + s.rx * std::cos(th), s.cy + s.ry * std::sin(th));
  }
  for (int i = 0; i < 5; ++i) {
    const double t = -1 + 0.5 * i;
    auto [x, y] = g.brow_point(s, -1, t);
    set(17 + i, x, y);
    auto [x2, y2] = g.brow_point(s, 1, t);
    set(22 + i, x2, y2);
  }
  for (int i = 0; i < 4; ++i) set(27 + i, s.cx + 0.3 * s.scale * i / 3.0, s.cy + (-1.5 + 4.0 * i / 3.0) * s.scale);
  for (int i = 0; i < 5; ++i) set(31 + i, s.cx + (-1.3 + 0.8 * i) * s.scale, s.cy + 2.8 * s.scale);
  const double lid = g.eye_ry * std::sqrt(0.75);
  for (int side = 0; side < 2; ++side) {
    const double ex = s.cx + (side == 0 ? -1 : 1) * g.eye_dx;
    const int b = 36 + 6 * side;
    set(b + 0, ex - g.eye_rx, g.eye_y);
    set(b + 1, ex - g.eye_rx / 2, g.eye_y - lid);
    set(b + 2, ex + g.eye_rx / 2, g.eye_y - lid);
    set(b + 3, ex + g.eye_rx, g.eye_y);
    set(b + 4, ex + g.eye_rx / 2, g.eye_y + lid);
    set(b + 5, ex - g.eye_rx / 2, g.eye_y + lid);
  }
  auto mx = [&](double u) { return g.mouth_x + u * g.mouth_hw; };
  set(48, mx(-1), g.mouth_center(-1));
  const double upper[5] = {-2.0 / 3, -1.0 / 3, 0, 1.0 / 3, 2.0 / 3};
  for (int i = 0; i < 5; ++i) set(49 + i, mx(upper[i]), g.mouth_center(upper[i]) - g.outer_half(upper[i]));
  set(54, mx(1), g.mouth_center(1));
  for (int i = 0; i < 5; ++i) {
    const double u = upper[4 - i];
    set(55 + i, mx(u), g.mouth_center(u) + g.outer_half(u));
  }
  set(60, mx(-0.85), g.mouth_center(-0.85));
  const double inner[3] = {-0.4, 0, 0.4};
  for (int i = 0; i < 3; ++i) set(61 + i, mx(inner[i]), g.mouth_center(inner[i]) - g.inner_half(inner[i]));
  set(64, mx(0.85), g.mouth_center(0.85));
  for (int i = 0; i < 3; ++i) {
    const double u = inner[2 - i];
    set(65 + i, mx(u), g.mouth_center(u) + g.inner_half(u));
  }
  return l;
}

Mat<float> content_basis(int content, int t, const AudioSynthConfig& cfg) {
  const auto& pat = patterns(cfg.basis_seed);
  Mat<float> out = pat.content[0] * static_cast<float>(1.5 * content_openness(content, t) / 3.0);
  for (int k = 1; k < 4; ++k) {
    const double g = 0.7 + 0.45 * ((content * 3 + k * 5) % 7);
    const double psi = 1.3 * content + 0.7 * k;
    out += pat.content[static_cast<std::size_t>(k)] * static_cast<float>(0.8 * std::sin(2 * kPi * g * t / kFps + psi));
  }
  return out;
}

Mat<float> emotion_offset(int emotion, int content, int t, const AudioSynthConfig& cfg) {
  if (emotion < 0 || emotion >= kEmotions) throw RangeError("emotion id out of range");
  const auto& pat = patterns(cfg.basis_seed);
  const float sign = ((t + content) % 2 == 0) ? 1.0f : -1.0f;
  return sign * (0.8f * pat.common + 0.6f * pat.emotion[static_cast<std::size_t>(emotion)]);
}

AudioFeatureClip synth_audio(int content, int emotion, int T, std::uint64_t seed, const AudioSynthConfig& cfg) {
  if (T < 1) throw DimensionError("synth_audio: T must be >= 1");
  AudioFeatureClip clip;
  clip.features.resize(T, kAudioFeatures);
  clip.content_id = content;
  clip.emotion_id = emotion;
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < T; ++t) {
    clip.features.row(t) = content_basis(content, t, cfg) + emotion_offset(emotion, content, t, cfg);
    if (cfg.noise > 0)
      for (int j = 0; j < kAudioFeatures; ++j) clip.features(t, j) += static_cast<float>(cfg.noise * n(rng));
  }
  return clip;
}

ClipRecord render_clip(const ClipLabels& labels, int T, std::uint64_t seed, int size, const AudioSynthConfig& audio) {
  if (T < 1) throw DimensionError("render_clip: T must be >= 1");
  ClipRecord r;
  r.id = clip_id(labels);
  r.labels = labels;
  r.seed = seed;
  const Style style = identity_style(labels.identity, size);
  for (int t = 0; t < T; ++t) {
    const RenderControls c = controls({labels.content, labels.emotion, labels.identity, t});
    r.frames.push_back(render(style, c, size));
    r.landmarks.push_back(landmarks(style, c, size));
  }
  r.audio = synth_audio(labels.content, labels.emotion, T, mix_seed(seed, 0xa0d10), audio);
  return r;
}

bool is_test_content(int content, int contents) { return content >= contents - std::max(1, contents / 4); }

int Manifest::first_test_content() const { return spec.contents - std::max(1, spec.contents / 4); }

Manifest corpus_grid(const CorpusSpec& spec) {
  if (spec.contents < 2) throw ConfigError("corpus needs at least 2 contents");
  if (spec.identities < 1) throw ConfigError("corpus needs at least 1 identity");
  if (spec.length < 1) throw ConfigError("clip length must be >= 1");
  Manifest m;
  m.spec = spec;
  std::uint64_t index = 0;
  for (int c = 0; c < spec.contents; ++c)
    for (int p = 0; p < kEmotions; ++p)
      for (int i = 0; i < spec.identities; ++i) {
        ManifestEntry e;
        e.labels = {c, p, i};
        e.id = clip_id(e.labels);
        e.seed = mix_seed(spec.seed, index++);
        e.length = spec.length;
        e.test = is_test_content(c, spec.contents);
        m.clips.push_back(e);
      }
  return m;
}

ClipRecord realize(const Manifest& manifest, const ManifestEntry& entry) {
  AudioSynthConfig audio;
  audio.noise = manifest.spec.audio_noise;
  return render_clip(entry.labels, entry.length, entry.seed, manifest.spec.size, audio);
}

void save_frames(const std::string& path, const std::vector<Frame>& frames) {
  if (frames.empty()) throw DataError("save_frames: no frames");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(frames.size()));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(frames[0].height));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(frames[0].width));
  for (const auto& f : frames) {
    if (!f.same_shape(frames[0])) throw DimensionError("save_frames: frames differ in shape");
    for (Index i = 0; i < f.pixels.size(); ++i) bin::put<float>(os, f.pixels.data()[i]);
  }
}

std::vector<Frame> load_frames(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  const auto T = bin::get<std::uint32_t>(is);
  const auto H = bin::get<std::uint32_t>(is);
  const auto W = bin::get<std::uint32_t>(is);
  if (T == 0 || H == 0 || W == 0 || H > 4096 || W > 4096) throw DataError(path + ": implausible frame header");
  std::vector<Frame> frames;
  for (std::uint32_t t = 0; t < T; ++t) {
    Frame f(static_cast<int>(H), static_cast<int>(W));
    for (Index i = 0; i < f.pixels.size(); ++i) f.pixels.data()[i] = bin::get<float>(is);
    frames.push_back(std::move(f));
  }
  return frames;
}

void write_corpus(const std::string& dir, const Manifest& manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json j;
  j["master_seed"] = manifest.spec.seed;
  j["contents"] = manifest.spec.contents;
  j["emotions"] = kEmotions;
  j["identities"] = manifest.spec.identities;
  j["length"] = manifest.spec.length;
  j["size"] = manifest.spec.size;
  j["audio_noise"] = manifest.spec.audio_noise;
  j["fps"] = kFps;
  j["clips"] = nlohmann::json::array();
  for (const auto& e : manifest.clips) {
    const ClipRecord r = realize(manifest, e);
    const fs::path base = fs::path(dir) / e.id;
    save_frames(base.string() + ".frames", r.frames);
    write_landmarks(base.string() + ".landmarks.txt", r.landmarks);
    save_audio_clip(base.string() + ".audio", r.audio);
    j["clips"].push_back({{"id", e.id},
                          {"content", e.labels.content},
                          {"emotion", e.labels.emotion},
                          {"identity", e.labels.identity},
                          {"seed", e.seed},
                          {"length", e.length},
                          {"split", e.test ? "test" : "train"}});
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw DataError("cannot write manifest in " + dir);
  os << j.dump(2) << '\n';
}

Manifest read_manifest(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw DataError("corpus manifest missing: " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(is);
    m.spec.seed = j.at("master_seed").get<std::uint64_t>();
    m.spec.contents = j.at("contents").get<int>();
    m.spec.identities = j.at("identities").get<int>();
    m.spec.length = j.at("length").get<int>();
    m.spec.size = j.at("size").get<int>();
    m.spec.audio_noise = j.value("audio_noise", 0.5);
    for (const auto& c : j.at("clips")) {
      ManifestEntry e;
      e.id = c.at("id").get<std::string>();
      e.labels = {c.at("content").get<int>(), c.at("emotion").get<int>(), c.at("identity").get<int>()};
      e.seed = c.at("seed").get<std::uint64_t>();
      e.length = c.at("length").get<int>();
      e.test = c.at("split").get<std::string>() == "test";
      m.clips.push_back(e);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("malformed manifest " + path.string() + ": " + ex.what());
  }
  return m;
}

ClipRecord load_clip(const std::string& dir, const ManifestEntry& entry) {
  const auto base = (std::filesystem::path(dir) / entry.id).string();
  ClipRecord r;
  r.id = entry.id;
  r.labels = entry.labels;
  r.seed = entry.seed;
  r.frames = load_frames(base + ".frames");
  r.landmarks = read_landmarks(base + ".landmarks.txt");
  r.audio = load_audio_clip(base + ".audio");
  if (r.landmarks.size() != r.frames.size() || r.audio.frames() != r.length())
    throw DataError("clip " + entry.id + ": frames, landmarks and audio disagree on length");
  return r;
}

RenderControls fit_controls(const Frame& frame, const Style& style) {
  const int size = frame.width;
  if (frame.height != size) throw DimensionError("fit_controls: square frames only");
  RenderControls c = emotion_controls(0);
  c.mouth_openness = 1.5;
  std::vector<float> buf;
  const auto [b0, b1] = band(style, -9.5, -3.5, size);
  const auto [e0, e1] = band(style, -5.0, 0.0, size);
  const auto [m0, m1] = band(style, 2.0, 12.0, size);
  for (int round = 0; round < 2; ++round) {
    c.brow_angle = search_1d(-0.9, 0.9, 0.05, 0.005, [&](double v) {
      RenderControls q = c;
      q.brow_angle = v;
      return band_error(frame, style, q, b0, b1, buf);
    });
    c.eye_openness = search_1d(0.3, 2.0, 0.05, 0.005, [&](double v) {
      RenderControls q = c;
      q.eye_openness = v;
      return band_error(frame, style, q, e0, e1, buf);
    });
    auto mouth = [&](double curv, double open) {
      RenderControls q = c;
      q.mouth_curvature = curv;
      q.mouth_openness = open;
      return band_error(frame, style, q, m0, m1, buf);
    };
    double best_c = 0, best_o = 0, best_e = mouth(0, 0);
    for (double cv = -3; cv <= 3 + 1e-9; cv += 0.25)
      for (double op = 0; op <= 4 + 1e-9; op += 0.25) {
        const double e = mouth(cv, op);
        if (e < best_e) best_e = e, best_c = cv, best_o = op;
      }
    const double cc = best_c, co = best_o;
    for (double cv = cc - 0.25; cv <= cc + 0.25 + 1e-9; cv += 0.025)
      for (double op = std::max(0.0, co - 0.25); op <= co + 0.25 + 1e-9; op += 0.025) {
        const double e = mouth(cv, op);
        if (e < best_e) best_e = e, best_c = cv, best_o = op;
      }
    c.mouth_curvature = best_c;
    c.mouth_openness = best_o;
  }
  return c;
}

Landmarks estimate_landmarks(const Frame& frame, int identity) {
  const Style s = identity_style(identity, frame.width);
  return landmarks(s, fit_controls(frame, s), frame.width);
}

}  // namespace emotoken::synth
