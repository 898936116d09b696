#pragma once

#include "emotoken/core/types.hpp"

#include <iosfwd>
#include <optional>
#include <string>

namespace emotoken {

inline constexpr int kAudioRows = 28;
inline constexpr int kAudioCols = 12;
inline constexpr int kAudioFeatures = kAudioRows * kAudioCols;

/// Per-frame 28x12 cepstral-style features, one row per video frame.
struct AudioFeatureClip {
  Mat<float> features;  // [T, 336]
  std::optional<int> content_id;
  std::optional<int> emotion_id;

  int frames() const { return static_cast<int>(features.rows()); }
  void validate() const;
};

/// Record layout (little-endian): u32 T, T*336 float32 (row-major,
/// each frame 28x12 row-major), i32 content_id, i32 emotion_id (-1 = none).
void write_audio_clip(std::ostream& os, const AudioFeatureClip& clip);
AudioFeatureClip read_audio_clip(std::istream& is);
void save_audio_clip(const std::string& path, const AudioFeatureClip& clip);
AudioFeatureClip load_audio_clip(const std::string& path);

}  // namespace emotoken
