#pragma once

// Vector-quantised visual autoencoder: frames <-> token grids.

#include "emotoken/core/checkpoint.hpp"
#include "emotoken/core/nn.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace emotoken {

/// RGB image with values in [0,1], stored as [height*width, 3].
struct Frame {
  int height = 0;
  int width = 0;
  Mat<float> pixels;

  Frame() = default;
  Frame(int h, int w) : height(h), width(w), pixels(Mat<float>::Zero(static_cast<Index>(h) * w, 3)) {}

  float& at(int y, int x, int c) { return pixels(static_cast<Index>(y) * width + x, c); }
  float at(int y, int x, int c) const { return pixels(static_cast<Index>(y) * width + x, c); }
  bool same_shape(const Frame& o) const { return height == o.height && width == o.width; }
};

/// h x w grid of codebook indices; `indices` is the row-major sequence form.
struct TokenGrid {
  int h = 0;
  int w = 0;
  std::vector<int> indices;

  TokenGrid() = default;
  TokenGrid(int rows, int cols, int fill = 0)
      : h(rows), w(cols), indices(static_cast<std::size_t>(rows) * cols, fill) {}

  int& at(int i, int j) { return indices[static_cast<std::size_t>(i) * w + j]; }
  int at(int i, int j) const { return indices[static_cast<std::size_t>(i) * w + j]; }
  std::size_t size() const { return indices.size(); }
  bool operator==(const TokenGrid&) const = default;
};

/// Wire format: u32 h, u32 w, then h*w little-endian u16 indices, row-major.
void write_token_grid(std::ostream& os, const TokenGrid& grid);
TokenGrid read_token_grid(std::istream& is);
void save_token_grid(const std::string& path, const TokenGrid& grid);
TokenGrid load_token_grid(const std::string& path);

template <typename S>
struct LatentGrid {
  int h = 0;
  int w = 0;
  Mat<S> values;  // [h*w, d]

  int dim() const { return static_cast<int>(values.cols()); }
};

template <typename S>
struct Codebook {
  Mat<S> entries;  // [K, d]

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }

  void validate() const {
    if (entries.rows() < 1 || entries.cols() < 1) throw DimensionError("codebook: empty");
    if (!entries.allFinite()) throw NumericError("codebook: non-finite entry");
  }
};

/// Index of the nearest entry by squared Euclidean distance; lowest index on ties.
template <typename S, typename Row>
int nearest_code(const Row& v, const Mat<S>& entries) {
  int best = 0;
  S best_d = (entries.row(0) - v).squaredNorm();
  for (Index k = 1; k < entries.rows(); ++k) {
    S d = (entries.row(k) - v).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

template <typename S>
std::pair<TokenGrid, LatentGrid<S>> quantize(const LatentGrid<S>& latent, const Codebook<S>& cb) {
  if (latent.dim() != cb.dim()) throw DimensionError("quantize: latent dim differs from codebook dim");
  if (latent.values.rows() != static_cast<Index>(latent.h) * latent.w)
    throw DimensionError("quantize: latent grid shape inconsistent");
  TokenGrid tokens(latent.h, latent.w);
  LatentGrid<S> entries{latent.h, latent.w, Mat<S>(latent.values.rows(), cb.dim())};
  for (Index r = 0; r < latent.values.rows(); ++r) {
    int k = nearest_code<S>(latent.values.row(r), cb.entries);
    tokens.indices[static_cast<std::size_t>(r)] = k;
    entries.values.row(r) = cb.entries.row(k);
  }
  return {std::move(tokens), std::move(entries)};
}

template <typename S>
LatentGrid<S> lookup(const TokenGrid& tokens, const Codebook<S>& cb) {
  if (tokens.indices.size() != static_cast<std::size_t>(tokens.h) * tokens.w)
    throw DimensionError("lookup: token grid shape inconsistent");
  LatentGrid<S> out{tokens.h, tokens.w, Mat<S>(static_cast<Index>(tokens.size()), cb.dim())};
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    int k = tokens.indices[r];
    if (k < 0 || k >= cb.size()) throw RangeError("lookup: index " + std::to_string(k) + " out of range");
    out.values.row(static_cast<Index>(r)) = cb.entries.row(k);
  }
  return out;
}

struct VqConfig {
  int codebook_size = 64;
  int code_dim = 32;
  int downsample = 2;  // n; power of two
  int height = 32;
  int width = 32;
  int channels = 48;       // feature width at reduced resolution
  int full_channels = 32;  // feature width at full resolution
  double beta = 0.25;
  double perceptual_weight = 1.0;
  double adversarial_weight = 0.1;
  int adversarial_warmup = 400;  // generator steps before the adversarial term switches on
  int dead_code_window = 50;     // steps per usage epoch
  int dead_code_patience = 2;    // unused epochs before an entry is re-seeded
  std::uint64_t seed = 1;

  int grid_h() const { return height / downsample; }
  int grid_w() const { return width / downsample; }
  void validate() const;
};

/// Encoder E_v, codebook, decoder G_v, patch discriminator and the frozen
/// perceptual feature stack.
template <typename S>
class VqModel {
 public:
  explicit VqModel(const VqConfig& cfg);

  const VqConfig& config() const { return cfg_; }

  /// frames: [batch*H*W, 3] -> latent [batch*h*w, d]
  ag::Var<S> encoder(ag::Tape<S>& t, ag::Var<S> frames, int batch) const;
  /// latent: [batch*h*w, d] -> frames [batch*H*W, 3], unclamped
  ag::Var<S> decoder(ag::Tape<S>& t, ag::Var<S> latent, int batch) const;
  /// frames -> patch logits [batch*hd*wd, 1]
  ag::Var<S> discriminator(ag::Tape<S>& t, ag::Var<S> frames, int batch) const;
  /// frames -> feature maps of the frozen perceptual stack
  std::vector<ag::Var<S>> perceptual(ag::Tape<S>& t, ag::Var<S> frames, int batch) const;

  Codebook<S> codebook() const { return {codebook_.value}; }
  const Parameter<S>& codebook_param() const { return codebook_; }
  Parameter<S>& codebook_param() { return codebook_; }

  nn::ParamList<S> autoencoder_parameters();  // encoder, decoder, codebook
  nn::ParamList<S> encoder_parameters();
  nn::ParamList<S> decoder_parameters();
  nn::ParamList<S> discriminator_parameters();
  nn::ParamList<S> all_parameters();

  /// Freezes every parameter; afterwards the model is read-only.
  void freeze();
  bool frozen() const { return frozen_; }

  void save(Checkpoint& ck);
  void load(const Checkpoint& ck);

 private:
  struct ResBlock {
    nn::Conv2d<S> a, b;
  };
  ag::Var<S> resblock(ag::Tape<S>& t, const ResBlock& rb, ag::Var<S> x, int batch, int h, int w) const;

  VqConfig cfg_;
  int stages_ = 0;
  nn::Conv2d<S> enc_in_;
  std::vector<nn::Conv2d<S>> enc_down_;
  ResBlock enc_res_;
  nn::Conv2d<S> enc_out_;
  Parameter<S> codebook_;
  nn::Conv2d<S> dec_in_;
  ResBlock dec_res_;
  std::vector<nn::Conv2d<S>> dec_up_;
  nn::Conv2d<S> dec_out_;
  std::vector<nn::Conv2d<S>> disc_;
  std::vector<nn::Conv2d<S>> percep_;
  bool frozen_ = false;
};

template <typename S>
Mat<S> stack_frames(const std::vector<const Frame*>& frames);

/// Frame -> pre-quantisation latent grid.
template <typename S>
LatentGrid<S> encode(const VqModel<S>& model, const Frame& frame);

/// Entry grid -> frame clamped to [0,1].
template <typename S>
Frame decode(const VqModel<S>& model, const LatentGrid<S>& entries);

template <typename S>
TokenGrid tokenize(const VqModel<S>& model, const Frame& frame) {
  return quantize(encode(model, frame), model.codebook()).first;
}

template <typename S>
Frame detokenize(const VqModel<S>& model, const TokenGrid& tokens) {
  return decode(model, lookup(tokens, model.codebook()));
}

/// L_VQ = |x - x_hat|^2 + |sg[e] - z_q|^2 + beta |sg[z_q] - e|^2, each term
/// averaged over spatial positions (squared norms summed over channels).
template <typename S>
struct VqLossTerms {
  ag::Var<S> reconstruction, codebook, commitment, total;
};

template <typename S>
VqLossTerms<S> vq_loss(ag::Var<S> x, ag::Var<S> x_hat, ag::Var<S> latent, ag::Var<S> entries, S beta) {
  auto rec = ag::mean_row_sq_norm(ag::sub(x, x_hat));
  auto cb = ag::mean_row_sq_norm(ag::sub(ag::stop_gradient(latent), entries));
  auto commit = ag::scale(ag::mean_row_sq_norm(ag::sub(ag::stop_gradient(entries), latent)), beta);
  return {rec, cb, commit, ag::add(ag::add(rec, cb), commit)};
}

/// Value-only form on plain matrices.
template <typename S>
S vq_loss(const Mat<S>& x, const Mat<S>& x_hat, const Mat<S>& latent, const Mat<S>& entries, S beta) {
  ag::Tape<S> t(false);
  return vq_loss(t.constant(x), t.constant(x_hat), t.constant(latent), t.constant(entries), beta).total.scalar();
}

template <typename S>
struct VqganLoss {
  VqLossTerms<S> vq;
  ag::Var<S> perceptual;
  ag::Var<S> adversarial;  // generator hinge term, >= 0
  ag::Var<S> total;
  ag::Var<S> latent;
  ag::Var<S> reconstruction_frames;
  TokenGrid tokens;  // batch grids stacked vertically
};

/// L_VQGAN = L_VQ + w_adv * L_adv + w_per * L_per for one batch of frames.
/// `adversarial` selects whether the discriminator term is included.
template <typename S>
VqganLoss<S> vqgan_loss(ag::Tape<S>& t, const VqModel<S>& model, ag::Var<S> frames, int batch, bool adversarial);

/// Hinge discriminator objective: mean relu(1 - D(x)) + mean relu(1 + D(x_hat)).
template <typename S>
ag::Var<S> discriminator_loss(ag::Tape<S>& t, const VqModel<S>& model, ag::Var<S> real, ag::Var<S> fake, int batch);

struct VqStepStats {
  double reconstruction = 0, codebook = 0, commitment = 0, perceptual = 0, adversarial = 0,
         discriminator = 0, total = 0;
  int reseeded = 0;
  int used_codes = 0;
};

/// Single-writer training loop state for the visual autoencoder.
template <typename S>
class VqTrainer {
 public:
  VqTrainer(VqModel<S>& model, nn::AdamConfig gen, nn::AdamConfig disc, std::uint64_t seed);

  VqStepStats step(const std::vector<const Frame*>& batch);
  std::int64_t steps() const { return steps_; }

 private:
  void track_usage(const TokenGrid& tokens, const Mat<S>& latent, VqStepStats& stats);

  VqModel<S>& model_;
  nn::Adam<S> gen_opt_;
  nn::Adam<S> disc_opt_;
  Rng rng_;
  std::int64_t steps_ = 0;
  std::vector<int> window_hits_;
  std::vector<int> idle_epochs_;
  Mat<S> recent_latents_;
};

}  // namespace emotoken
