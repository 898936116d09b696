#pragma once

// Configuration, two-stage training, generation, evaluation and ablations.

#include "emotoken/ar_model.hpp"
#include "emotoken/audio_disentangle.hpp"
#include "emotoken/emotion_anchor.hpp"
#include "emotoken/metrics.hpp"
#include "emotoken/synth_data.hpp"
#include "emotoken/vq_visual.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace emotoken::pipeline {

struct PipelineConfig {
  std::uint64_t seed = 1;  // master seed; model and batch seeds derive from it

  std::string corpus_dir = "corpus";
  std::string run_dir = "run";
  std::uint64_t corpus_seed = 7;
  int corpus_contents = 8;
  int corpus_identities = 2;
  int corpus_length = 25;
  int corpus_size = 32;
  double corpus_audio_noise = 0.5;

  int vq_K = 64;
  int vq_d = 32;
  int vq_n = 2;
  double vq_beta = 0.25;
  int vq_channels = 48;
  int vq_full_channels = 32;
  double vq_perceptual_weight = 1.0;
  double vq_adversarial_weight = 0.1;
  int vq_adversarial_warmup = 400;
  int vq_steps = 1000;
  int vq_batch = 16;
  double vq_lr = 1e-3;
  double vq_disc_lr = 1e-3;

  int audio_d_a = 16;
  int audio_hidden = 128;
  int audio_steps = 600;
  int audio_quads = 4;
  double audio_lr = 1e-3;

  int region_x = 5;
  int region_y = 5;

  int anchor_heads = 4;
  int anchor_ffn_mult = 4;

  int ar_layers = 4;
  int ar_heads = 4;
  int ar_width = 128;
  int ar_context = 640;
  int ar_ffn_mult = 4;
  int ar_steps = 200;
  int ar_batch = 16;
  double ar_lr = 1e-3;
  int ar_warmup = 20;
  double ar_grad_clip = 1.0;
  double lambda = 0.5;
  int ar_heldout_frames = 48;

  double temperature = 1.0;
  int top_k = 1;
  std::uint64_t sample_seed = 0;

  int log_every = 25;

  bool operator==(const PipelineConfig&) const = default;

  /// Typed assignment by schema key; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  /// Flat "key = value" text, one entry per line in schema order.
  std::string serialize() const;
  static PipelineConfig parse(const std::string& text);
  static PipelineConfig load(const std::string& path);
  void save(const std::string& path) const;

  void validate() const;
  /// FNV-1a of serialize().
  std::uint64_t hash() const;

  synth::CorpusSpec corpus() const;
  VqConfig vq() const;
  AudioConfig audio() const;
  AnchorConfig anchor() const;
  ArConfig ar() const;
  SamplingConfig sampling() const;
};

/// Named child seeds of the master seed, recorded in the run manifest.
struct Seeds {
  std::uint64_t vq, vq_batches, audio, audio_batches, anchor, ar, ar_batches;
};
Seeds derive_seeds(std::uint64_t master);

std::string hex64(std::uint64_t v);

/// Progress sink; receives one line per call.
using Log = std::function<void(const std::string&)>;
void log_to_stderr(const std::string& line);

struct Corpus {
  std::string dir;
  synth::Manifest manifest;
  std::vector<synth::ClipRecord> clips;

  const synth::ClipRecord& clip(const std::string& id) const;
  const synth::ClipRecord* find(int content, int emotion, int identity) const;
  bool is_test(const synth::ClipRecord& c) const;
};

/// Writes the corpus described by the config; returns the manifest.
synth::Manifest make_corpus(const PipelineConfig& cfg);
Corpus load_corpus(const std::string& dir);

/// Run-directory manifest: run/manifest.json.
void record_run(const PipelineConfig& cfg, const std::string& section, const std::string& json_payload);
std::string read_run_manifest(const std::string& run_dir);

std::string stage1_dir(const PipelineConfig& cfg);
std::string stage2_dir(const PipelineConfig& cfg);
std::string vq_checkpoint_path(const PipelineConfig& cfg);
std::string audio_checkpoint_path(const PipelineConfig& cfg);
std::string ar_checkpoint_path(const PipelineConfig& cfg);

struct VqStageResult {
  double heldout_mse = 0;
  int used_codes = 0;
  std::vector<VqStepStats> curve;
  std::uint64_t fingerprint = 0;
};

struct AudioStageResult {
  double emotion_probe = 0, content_probe = 0, raw_probe = 0;
  std::vector<AudioStepStats> curve;
  std::uint64_t fingerprint = 0;
};

VqStageResult train_vq(const PipelineConfig& cfg, const Corpus& corpus, const Log& log = log_to_stderr);
AudioStageResult train_audio(const PipelineConfig& cfg, const Corpus& corpus, const Log& log = log_to_stderr);

/// Held-out reconstruction MSE over test-content frames (every `stride`-th frame).
double heldout_vq_mse(const VqModel<float>& vq, const Corpus& corpus, int stride = 3);

struct ProbeResult {
  double emotion = 0, content = 0, raw = 0;
};
/// Emotion-label probes on E_e vectors, pooled E_c vectors and raw pooled features.
ProbeResult audio_probes(const AudioModel<float>& audio, const Corpus& corpus);

/// Trained stage-1 models loaded from a run directory; both frozen.
struct Stage1Models {
  std::unique_ptr<VqModel<float>> vq;
  std::unique_ptr<AudioModel<float>> audio;
};
Stage1Models load_stage1(const PipelineConfig& cfg);

/// Per-clip stage-2 inputs: tokens, regions and audio components.
struct ClipInputs {
  const synth::ClipRecord* clip = nullptr;
  std::vector<TokenGrid> tokens;
  std::vector<FacialRegion> regions;
  RowVec<float> emotion;  // E_e of the clip audio
  Mat<float> content;     // E_c per frame
};
ClipInputs prepare_clip(const Stage1Models& s1, const synth::ClipRecord& clip, int ext_row, int ext_col);

struct Stage2Models {
  std::unique_ptr<AnchorModule<float>> anchor;
  std::unique_ptr<ArModel<float>> ar;
};
Stage2Models make_stage2(const PipelineConfig& cfg);
Stage2Models load_stage2(const PipelineConfig& cfg, const std::string& path);

struct FrameLoss {
  ag::Var<float> auto_loss, conti_loss, total;
};
/// L_auto on frame t of a clip and, when t > 0, L_conti from frame t-1.
FrameLoss frame_loss(ag::Tape<float>& t, const Stage2Models& m, const ClipInputs& clip, int frame, double lambda);

struct Stage2Result {
  double heldout_nll = 0;
  double final_loss = 0;
  std::vector<double> curve;
  std::uint64_t vq_fingerprint_before = 0, vq_fingerprint_after = 0;
  std::uint64_t audio_fingerprint_before = 0, audio_fingerprint_after = 0;
  double seconds = 0;
  bool encoders_unchanged() const {
    return vq_fingerprint_before == vq_fingerprint_after && audio_fingerprint_before == audio_fingerprint_after;
  }
};

/// Trains anchor + AR by self-reconstruction; refuses to start without frozen
/// stage-1 checkpoints. Writes the stage-2 checkpoint to `out_path`.
Stage2Result train_stage2(const PipelineConfig& cfg, const Corpus& corpus, const std::string& out_path,
                          const Log& log = log_to_stderr);

double heldout_nll(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg, const Corpus& corpus);

/// Emotion comes either from an audio clip or from an emotion id routed
/// through the synthetic emotion-offset generator.
struct EmotionSource {
  std::optional<AudioFeatureClip> audio;
  std::optional<int> emotion_id;
  std::string label;
};

struct Generation {
  std::vector<Frame> frames;
  std::vector<TokenGrid> tokens;         // sampled
  std::vector<TokenGrid> source_tokens;  // tokens of the target frames
  std::vector<FacialRegion> regions;
};

/// Per frame: tokenize target, EA from (emotion source, target content), build
/// the condition, sample, decode. `length` <= target length.
Generation generate(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg,
                    const synth::ClipRecord& target, const EmotionSource& source, int length,
                    const SamplingConfig& sampling);

/// PNG frames, token-grid binaries, raw float frames, region JSON and generation.json.
void write_generation(const std::string& dir, const Generation& g, const std::string& meta_json);
void write_png(const std::string& path, const Frame& frame);
Frame read_png(const std::string& path);

/// Landmarks of generated frames by the sprite keypoint fitter.
LandmarkSeq generated_landmarks(const std::vector<Frame>& frames, int identity);

/// Emotion swap case: target (m,p,id), emotion q != p; reference is (m,q,id).
struct SwapPair {
  std::string target, reference, emotion_clip;
  int emotion = 0;
};
std::vector<SwapPair> swap_pairs(const Corpus& corpus, int count, std::uint64_t seed);

struct SwapEvaluation {
  metrics::Report report;        // swap generations vs references
  double inside_change = 0;      // token change rate own-emotion vs swapped, inside region
  double outside_change = 0;
  double flip_rate = 0;          // swapped generations
  double self_outside_agreement = 0;  // own-emotion generation vs target tokens, outside region
};
SwapEvaluation evaluate_swaps(const Stage1Models& s1, const Stage2Models& s2, const PipelineConfig& cfg,
                              const Corpus& corpus, const std::vector<SwapPair>& pairs, int length,
                              const SamplingConfig& sampling, const Log& log = log_to_stderr);

struct AblationVariant {
  std::string name;
  int x = 5, y = 5;
  double lambda = 0.5;
};
std::vector<AblationVariant> default_variants();

struct AblationRow {
  AblationVariant variant;
  metrics::ClipMetrics aggregate;
  double flip_rate = 0, inside_change = 0, outside_change = 0, heldout_nll = 0, train_seconds = 0;
  double self_outside_agreement = 0;
  bool encoders_unchanged = false;
};

/// Trains one stage-2 model per variant (shared stage-1 models and seeds) and
/// evaluates each on the same swap pairs. Writes ablation.json/ablation.md
/// under run/ablate.
std::vector<AblationRow> ablate(const PipelineConfig& cfg, const Corpus& corpus,
                                const std::vector<AblationVariant>& variants, int pairs, int length,
                                const Log& log = log_to_stderr);
std::string ablation_markdown(const std::vector<AblationRow>& rows);

}  // namespace emotoken::pipeline
