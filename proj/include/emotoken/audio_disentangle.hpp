#pragma once

// Emotion/content disentanglement of per-frame audio features by
// cross-reconstruction.

#include "emotoken/audio_features.hpp"
#include "emotoken/core/checkpoint.hpp"
#include "emotoken/core/nn.hpp"

#include <cstdint>
#include <vector>

namespace emotoken {

template <typename S>
struct EmotionComponent {
  RowVec<S> vector;  // [d_a]
};

/// Per-frame form; `pooled()` is the clip-level mean.
template <typename S>
struct ContentComponent {
  Mat<S> frames;  // [T, d_a]

  RowVec<S> pooled() const { return frames.colwise().mean(); }
};

struct AudioConfig {
  int component_dim = 16;  // d_a
  int hidden = 128;
  int emotions = 8;
  std::uint64_t seed = 2;

  void validate() const;
};

struct PairingError : DataError {
  using DataError::DataError;
};

/// One cross-reconstruction batch. Clips are referenced, not owned.
struct AudioBatch {
  struct Cross {
    int content_from, emotion_from, target;  // target has content of the first and emotion of the second
  };
  std::vector<const AudioFeatureClip*> clips;
  std::vector<Cross> cross;
  std::vector<std::pair<int, int>> same_content;  // same content, different emotion

  /// Throws PairingError when a required pair kind is missing or labels disagree.
  void validate() const;
};

template <typename S>
struct AudioLossTerms {
  ag::Var<S> cross, self, cla, con, total;
};

/// Encoders E_e and E_c (per-frame MLPs, E_e mean-pooled over time), decoder
/// G_a and the emotion classifier head.
template <typename S>
class AudioModel {
 public:
  explicit AudioModel(const AudioConfig& cfg);

  const AudioConfig& config() const { return cfg_; }

  /// features [T, 336] -> [1, d_a]
  ag::Var<S> emotion(ag::Tape<S>& t, ag::Var<S> features) const;
  /// features [T, 336] -> [T, d_a]
  ag::Var<S> content(ag::Tape<S>& t, ag::Var<S> features) const;
  /// content [T, d_a], emotion [1, d_a] -> [T, 336]
  ag::Var<S> decode(ag::Tape<S>& t, ag::Var<S> content, ag::Var<S> emotion) const;
  /// emotion [1, d_a] -> class logits [1, E]
  ag::Var<S> classify(ag::Tape<S>& t, ag::Var<S> emotion) const;

  nn::ParamList<S> parameters();
  nn::ParamList<S> encoder_parameters();
  void freeze();
  bool frozen() const { return frozen_; }

  void save(Checkpoint& ck);
  void load(const Checkpoint& ck);

 private:
  struct Mlp {
    nn::Linear<S> a, b, c;
  };
  ag::Var<S> mlp(ag::Tape<S>& t, const Mlp& m, ag::Var<S> x) const;
  void collect(Mlp& m, nn::ParamList<S>& out);

  AudioConfig cfg_;
  Mlp emo_, con_, dec_;
  nn::Linear<S> head_;
  bool frozen_ = false;
};

template <typename S>
EmotionComponent<S> encode_emotion(const AudioModel<S>& model, const AudioFeatureClip& clip);
template <typename S>
ContentComponent<S> encode_content(const AudioModel<S>& model, const AudioFeatureClip& clip);
template <typename S>
AudioFeatureClip decode_audio(const AudioModel<S>& model, const ContentComponent<S>& content,
                              const EmotionComponent<S>& emotion);

/// L_cross + L_self + L_cla + L_con on one batch.
template <typename S>
AudioLossTerms<S> audio_loss(ag::Tape<S>& t, const AudioModel<S>& model, const AudioBatch& batch);

/// Draws `quads` groups {(m,p), (n,q), (m,q), (n,p)} with m != n, p != q from a
/// labelled pool. Throws PairingError if the pool cannot supply them.
AudioBatch sample_audio_batch(const std::vector<const AudioFeatureClip*>& pool, int quads, Rng& rng);

struct AudioStepStats {
  double cross = 0, self = 0, cla = 0, con = 0, total = 0;
};

template <typename S>
class AudioTrainer {
 public:
  AudioTrainer(AudioModel<S>& model, nn::AdamConfig opt);
  AudioStepStats step(const AudioBatch& batch);

 private:
  AudioModel<S>& model_;
  nn::Adam<S> opt_;
};

/// Softmax-regression probe on standardised features; returns held-out accuracy.
double probe_accuracy(const Mat<double>& train_x, const std::vector<int>& train_y, const Mat<double>& test_x,
                      const std::vector<int>& test_y, int classes, int iterations = 400);

}  // namespace emotoken
