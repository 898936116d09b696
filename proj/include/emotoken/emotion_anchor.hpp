#pragma once

// Facial-region selection on the token grid and the emotion-anchor
// cross-attention that writes audio emotion into facial token features.

#include "emotoken/core/checkpoint.hpp"
#include "emotoken/core/nn.hpp"
#include "emotoken/landmarks.hpp"
#include "emotoken/vq_visual.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace emotoken {

/// Block of token-grid cells around the rounded landmark centroid. The first
/// coordinate is the grid row (image y), the second the column (image x).
struct FacialRegion {
  double centroid_row = 0, centroid_col = 0;  // before rounding, grid units
  int center_row = 0, center_col = 0;
  int ext_row = 0, ext_col = 0;  // half extents
  int grid_h = 0, grid_w = 0;
  std::vector<std::pair<int, int>> positions;  // clamped, row-major
  std::vector<int> cells;                      // index of each position in the unclamped block

  int block_rows() const { return 2 * ext_row + 1; }
  int block_cols() const { return 2 * ext_col + 1; }
  int unclamped_size() const { return block_rows() * block_cols(); }
  bool contains(int i, int j) const;
  /// Row-major flat indices of the positions.
  std::vector<int> flat() const;
};

/// Round-half-up, as used for the region centre.
inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

FacialRegion region_at(int center_row, int center_col, int ext_row, int ext_col, int grid_h, int grid_w);

/// centre = round(mean(landmarks) / n), block clamped to the grid.
FacialRegion facial_region(const Landmarks& landmarks, int n, int ext_row, int ext_col, int grid_h, int grid_w);

std::string region_json(const FacialRegion& region);

struct AnchorConfig {
  int vocab = 64;
  int width = 128;  // d
  int heads = 4;
  int component_dim = 16;  // d_a of the audio components
  int ext_row = 5;
  int ext_col = 5;
  int ffn_mult = 4;
  std::uint64_t seed = 3;

  void validate() const;
};

template <typename S>
struct ConditionInputs {
  ag::Var<S> e_e;  // [1, d]
  ag::Var<S> e_f;  // [|s_f|, d]
};

template <typename S>
struct AnchorOutput {
  ag::Var<S> ea;                  // [(2x+1)(2y+1), d]
  ag::Var<S> context;             // attention output before the output projection
  std::vector<Mat<S>> weights;    // per head [(2x+1)(2y+1), |s_f|]; rows sum to 1
};

template <typename S>
class AnchorModule {
 public:
  explicit AnchorModule(const AnchorConfig& cfg);

  const AnchorConfig& config() const { return cfg_; }

  /// e_e = Enc(emotion + content), e_f = token embeddings of the facial indices.
  ConditionInputs<S> embed_condition_inputs(ag::Tape<S>& t, ag::Var<S> emotion, ag::Var<S> content,
                                            const std::vector<int>& facial_indices) const;
  /// Cross-attention from the tiled, position-encoded e_e to e_f, then FFN with residual.
  AnchorOutput<S> compute_ea(ag::Tape<S>& t, ag::Var<S> e_e, ag::Var<S> e_f) const;
  /// Token embeddings of s with the region rows replaced by EA rows.
  ag::Var<S> build_condition(ag::Tape<S>& t, const TokenGrid& s, ag::Var<S> ea, const FacialRegion& region) const;
  ag::Var<S> embed_tokens(ag::Tape<S>& t, const std::vector<int>& indices) const;

  const Parameter<S>& token_table() const { return tokens_.table; }
  const nn::Linear<S>& value_projection() const { return wv_; }

  nn::ParamList<S> parameters();
  void save(Checkpoint& ck);
  void load(const Checkpoint& ck);

 private:
  AnchorConfig cfg_;
  nn::Embedding<S> tokens_;
  nn::Linear<S> enc_a_, enc_b_;
  Parameter<S> query_pos_;  // [(2x+1)(2y+1), d]
  nn::Linear<S> wq_, wk_, wv_, wo_;
  nn::Linear<S> ffn_a_, ffn_b_;
};

/// Value-level condition: rows at region positions equal EA rows, others equal
/// the token embedding of s. Throws DimensionError on a size mismatch.
template <typename S>
struct ConditionSequence {
  Mat<S> embeddings;  // [h*w, d]
  FacialRegion region;
};

template <typename S>
ConditionSequence<S> build_condition(const TokenGrid& s, const Mat<S>& ea, const FacialRegion& region,
                                     const Mat<S>& token_table);

}  // namespace emotoken
