#pragma once

// Procedural sprite-face corpus with exact landmarks and paired audio features.

#include "emotoken/audio_features.hpp"
#include "emotoken/landmarks.hpp"
#include "emotoken/vq_visual.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace emotoken::synth {

inline constexpr int kEmotions = 8;
inline constexpr double kFps = 25.0;

/// neutral, angry, contempt, disgusted, fear, happy, sad, surprised
const char* emotion_name(int p);
int emotion_from_name(const std::string& name);  // also accepts a decimal id

struct SpriteParams {
  int content = 0;   // m
  int emotion = 0;   // p
  int identity = 0;
  int frame = 0;     // t
};

/// Render controls, all in frame pixels at 32x32 scale.
struct RenderControls {
  double mouth_curvature = 0;  // corner lift; positive smiles
  double mouth_openness = 0;
  double brow_angle = 0;       // radians; positive lifts the inner ends
  double eye_openness = 1;

  bool operator==(const RenderControls&) const = default;
};

struct Style {
  double scale = 1;           // frame size / 32
  double cx = 16, cy = 13.8;  // face centre, frame pixels
  double rx = 10, ry = 12.5;  // face radii
  float background[3], skin[3], hair[3];
};

Style identity_style(int identity, int size = 32);

/// Mouth-openness trajectory of content m at frame t.
double content_openness(int content, int t);
RenderControls controls(const SpriteParams& params);
/// Emotion-only controls (openness left at 0).
RenderControls emotion_controls(int emotion);

Frame render(const Style& style, const RenderControls& c, int size = 32);
/// Analytic 68-point landmarks of the rendered features, frame pixel coords.
Landmarks landmarks(const Style& style, const RenderControls& c, int size = 32);

struct ClipLabels {
  int content = 0;
  int emotion = 0;
  int identity = 0;
};

struct ClipRecord {
  std::string id;
  ClipLabels labels;
  std::uint64_t seed = 0;
  std::vector<Frame> frames;
  LandmarkSeq landmarks;
  AudioFeatureClip audio;

  int length() const { return static_cast<int>(frames.size()); }
};

struct AudioSynthConfig {
  double noise = 0.5;
  std::uint64_t basis_seed = 0x5eedba5e;  // shared content/emotion patterns
};

/// Content basis signal for (m, t): [1, 336].
Mat<float> content_basis(int content, int t, const AudioSynthConfig& cfg = {});
/// Emotion offset for (p, m, t): a per-emotion pattern with a polarity that
/// alternates frame to frame, so the clip mean carries almost no emotion.
Mat<float> emotion_offset(int emotion, int content, int t, const AudioSynthConfig& cfg = {});

AudioFeatureClip synth_audio(int content, int emotion, int T, std::uint64_t seed, const AudioSynthConfig& cfg = {});

ClipRecord render_clip(const ClipLabels& labels, int T, std::uint64_t seed, int size = 32,
                       const AudioSynthConfig& audio = {});

struct CorpusSpec {
  int contents = 8;
  int identities = 2;
  int length = 25;
  int size = 32;
  std::uint64_t seed = 7;
  double audio_noise = 0.5;
};

struct ManifestEntry {
  std::string id;
  ClipLabels labels;
  std::uint64_t seed = 0;
  int length = 0;
  bool test = false;
};

struct Manifest {
  CorpusSpec spec;
  std::vector<ManifestEntry> clips;

  /// Contents >= this index are held out.
  int first_test_content() const;
};

/// Every (content, emotion, identity) combination; per-clip seeds derive from the master seed.
Manifest corpus_grid(const CorpusSpec& spec);

/// Test split: the last max(1, M/4) contents.
bool is_test_content(int content, int contents);

ClipRecord realize(const Manifest& manifest, const ManifestEntry& entry);

/// Directory layout: manifest.json, then per clip <id>.frames (u32 T, u32 H,
/// u32 W, T*H*W*3 float32), <id>.landmarks.txt and <id>.audio.
void write_corpus(const std::string& dir, const Manifest& manifest);
Manifest read_manifest(const std::string& dir);
ClipRecord load_clip(const std::string& dir, const ManifestEntry& entry);

void save_frames(const std::string& path, const std::vector<Frame>& frames);
std::vector<Frame> load_frames(const std::string& path);

/// Recovers render controls from a frame of known identity by matching
/// re-rendered feature bands; used to landmark generated frames.
RenderControls fit_controls(const Frame& frame, const Style& style);
Landmarks estimate_landmarks(const Frame& frame, int identity);

}  // namespace emotoken::synth
