#include "emotoken/audio_features.hpp"
#include "emotoken/core/binary_io.hpp"
#include "emotoken/landmarks.hpp"

#include <fstream>
#include <sstream>

namespace emotoken {

void write_landmarks(const std::string& path, const LandmarkSeq& seq) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os.precision(9);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (seq[t].rows() != kLandmarkCount || seq[t].cols() != 2) throw DimensionError("landmarks must be 68x2");
    os << "frame " << t << '\n';
    for (int k = 0; k < kLandmarkCount; ++k) os << seq[t](k, 0) << ' ' << seq[t](k, 1) << '\n';
  }
}

LandmarkSeq read_landmarks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  LandmarkSeq seq;
  std::vector<double> pts;
  auto flush = [&] {
    if (pts.empty()) return;
    if (pts.size() != 2 * kLandmarkCount)
      throw DataError(path + ": frame " + std::to_string(seq.size()) + " does not have 68 points");
    Landmarks l(kLandmarkCount, 2);
    for (int k = 0; k < kLandmarkCount; ++k) {
      l(k, 0) = pts[2 * k];
      l(k, 1) = pts[2 * k + 1];
    }
    seq.push_back(std::move(l));
    pts.clear();
  };
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("frame", 0) == 0) {
      flush();
      continue;
    }
    std::istringstream ls(line);
    double x, y;
    if (!(ls >> x >> y)) throw DataError(path + ": malformed landmark line '" + line + "'");
    pts.push_back(x);
    pts.push_back(y);
    if (pts.size() == 2 * kLandmarkCount) flush();
  }
  flush();
  return seq;
}

void AudioFeatureClip::validate() const {
  if (features.rows() < 1) throw DataError("audio clip: needs at least one frame");
  if (features.cols() != kAudioFeatures) throw DimensionError("audio clip: expected 28x12 features per frame");
  if (!features.allFinite()) throw DataError("audio clip: non-finite feature");
}

void write_audio_clip(std::ostream& os, const AudioFeatureClip& clip) {
  clip.validate();
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(clip.frames()));
  for (Index i = 0; i < clip.features.size(); ++i) bin::put<float>(os, clip.features.data()[i]);
  bin::put<std::int32_t>(os, clip.content_id.value_or(-1));
  bin::put<std::int32_t>(os, clip.emotion_id.value_or(-1));
}

AudioFeatureClip read_audio_clip(std::istream& is) {
  auto T = bin::get<std::uint32_t>(is);
  if (T == 0 || T > 100000) throw DataError("audio clip: implausible frame count");
  AudioFeatureClip clip;
  clip.features.resize(T, kAudioFeatures);
  for (Index i = 0; i < clip.features.size(); ++i) clip.features.data()[i] = bin::get<float>(is);
  auto c = bin::get<std::int32_t>(is);
  auto e = bin::get<std::int32_t>(is);
  if (c >= 0) clip.content_id = c;
  if (e >= 0) clip.emotion_id = e;
  clip.validate();
  return clip;
}

void save_audio_clip(const std::string& path, const AudioFeatureClip& clip) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  write_audio_clip(os, clip);
}

AudioFeatureClip load_audio_clip(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_audio_clip(is);
}

}  // namespace emotoken
