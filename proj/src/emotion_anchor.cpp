#include "emotoken/emotion_anchor.hpp"

#include "json.hpp"

#include <algorithm>

namespace emotoken {

bool FacialRegion::contains(int i, int j) const {
  return i >= std::max(0, center_row - ext_row) && i <= std::min(grid_h - 1, center_row + ext_row) &&
         j >= std::max(0, center_col - ext_col) && j <= std::min(grid_w - 1, center_col + ext_col);
}

std::vector<int> FacialRegion::flat() const {
  std::vector<int> out;
  out.reserve(positions.size());
  for (const auto& [i, j] : positions) out.push_back(i * grid_w + j);
  return out;
}

FacialRegion region_at(int center_row, int center_col, int ext_row, int ext_col, int grid_h, int grid_w) {
  if (ext_row < 0 || ext_col < 0) throw ConfigError("region extents must be non-negative");
  if (grid_h < 1 || grid_w < 1) throw DimensionError("region: empty token grid");
  FacialRegion r;
  r.centroid_row = center_row;
  r.centroid_col = center_col;
  r.center_row = center_row;
  r.center_col = center_col;
  r.ext_row = ext_row;
  r.ext_col = ext_col;
  r.grid_h = grid_h;
  r.grid_w = grid_w;
  for (int i = center_row - ext_row; i <= center_row + ext_row; ++i)
    for (int j = center_col - ext_col; j <= center_col + ext_col; ++j) {
      if (i < 0 || i >= grid_h || j < 0 || j >= grid_w) continue;
      r.positions.emplace_back(i, j);
      r.cells.push_back((i - (center_row - ext_row)) * r.block_cols() + (j - (center_col - ext_col)));
    }
  return r;
}

FacialRegion facial_region(const Landmarks& landmarks, int n, int ext_row, int ext_col, int grid_h, int grid_w) {
  if (landmarks.rows() == 0) throw DataError("facial_region: no landmarks");
  if (landmarks.cols() != 2) throw DimensionError("facial_region: landmarks must be (x, y) pairs");
  if (n < 1) throw ConfigError("facial_region: downsample ratio must be >= 1");
  if (!landmarks.allFinite()) throw DataError("facial_region: non-finite landmark");
  const double row = landmarks.col(1).mean() / n;
  const double col = landmarks.col(0).mean() / n;
  FacialRegion r = region_at(round_half_up(row), round_half_up(col), ext_row, ext_col, grid_h, grid_w);
  r.centroid_row = row;
  r.centroid_col = col;
  return r;
}

std::string region_json(const FacialRegion& r) {
  nlohmann::json j;
  j["center"] = {r.center_row, r.center_col};
  j["centroid"] = {r.centroid_row, r.centroid_col};
  j["extents"] = {r.ext_row, r.ext_col};
  j["grid"] = {r.grid_h, r.grid_w};
  j["unclamped_size"] = r.unclamped_size();
  auto& pos = j["positions"] = nlohmann::json::array();
  for (const auto& [a, b] : r.positions) pos.push_back({a, b});
  return j.dump(2);
}

void AnchorConfig::validate() const {
  if (vocab < 2) throw ConfigError("anchor: vocabulary must have at least 2 entries");
  if (width < 1 || heads < 1 || width % heads != 0) throw ConfigError("anchor: width must be divisible by heads");
  if (component_dim < 1) throw ConfigError("anchor: component dim must be positive");
  if (ext_row < 0 || ext_col < 0) throw ConfigError("anchor: region extents must be non-negative");
  if (ffn_mult < 1) throw ConfigError("anchor: ffn multiplier must be positive");
}

template <typename S>
AnchorModule<S>::AnchorModule(const AnchorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int d = cfg_.width;
  tokens_ = nn::Embedding<S>("anchor.tokens", cfg_.vocab, d, rng);
  enc_a_ = nn::Linear<S>("anchor.enc_a", cfg_.component_dim, d, rng);
  enc_b_ = nn::Linear<S>("anchor.enc_b", d, d, rng);
  const int cells = (2 * cfg_.ext_row + 1) * (2 * cfg_.ext_col + 1);
  query_pos_ = Parameter<S>("anchor.query_pos", nn::normal<S>(cells, d, S(0.02), rng));
  wq_ = nn::Linear<S>("anchor.wq", d, d, rng);
  wk_ = nn::Linear<S>("anchor.wk", d, d, rng);
  wv_ = nn::Linear<S>("anchor.wv", d, d, rng);
  wo_ = nn::Linear<S>("anchor.wo", d, d, rng);
  ffn_a_ = nn::Linear<S>("anchor.ffn_a", d, cfg_.ffn_mult * d, rng);
  ffn_b_ = nn::Linear<S>("anchor.ffn_b", cfg_.ffn_mult * d, d, rng);
}

template <typename S>
ag::Var<S> AnchorModule<S>::embed_tokens(ag::Tape<S>& t, const std::vector<int>& indices) const {
  for (int k : indices)
    if (k < 0 || k >= cfg_.vocab) throw RangeError("anchor: token index " + std::to_string(k) + " out of vocabulary");
  return tokens_(t, indices);
}

template <typename S>
ConditionInputs<S> AnchorModule<S>::embed_condition_inputs(ag::Tape<S>& t, ag::Var<S> emotion, ag::Var<S> content,
                                                           const std::vector<int>& facial_indices) const {
  if (emotion.rows() != 1 || content.rows() != 1 || emotion.cols() != cfg_.component_dim ||
      content.cols() != cfg_.component_dim)
    throw DimensionError("anchor: emotion and content must be [1, d_a] vectors");
  auto h = ag::gelu(enc_a_(t, ag::add(emotion, content)));
  ConditionInputs<S> out;
  out.e_e = enc_b_(t, h);
  out.e_f = embed_tokens(t, facial_indices);
  return out;
}

template <typename S>
AnchorOutput<S> AnchorModule<S>::compute_ea(ag::Tape<S>& t, ag::Var<S> e_e, ag::Var<S> e_f) const {
  if (e_f.rows() < 1) throw DimensionError("compute_ea: empty facial token set");
  if (e_e.rows() != 1 || e_e.cols() != cfg_.width || e_f.cols() != cfg_.width)
    throw DimensionError("compute_ea: e_e must be [1, d] and e_f [n, d]");
  const Index cells = query_pos_.value.rows();
  auto query = ag::add(ag::tile_rows(e_e, cells), t.param(query_pos_));
  AnchorOutput<S> out;
  out.context = ag::attention(wq_(t, query), wk_(t, e_f), wv_(t, e_f), cfg_.heads, Mat<S>(), &out.weights);
  auto h = ag::add(query, wo_(t, out.context));
  out.ea = ag::add(h, ffn_b_(t, ag::gelu(ffn_a_(t, h))));
  return out;
}

template <typename S>
ag::Var<S> AnchorModule<S>::build_condition(ag::Tape<S>& t, const TokenGrid& s, ag::Var<S> ea,
                                            const FacialRegion& region) const {
  if (s.h != region.grid_h || s.w != region.grid_w) throw DimensionError("build_condition: grid shape differs from region grid");
  if (ea.rows() != region.unclamped_size()) throw DimensionError("build_condition: EA rows differ from region size");
  const Index hw = static_cast<Index>(s.size());
  std::vector<int> index(static_cast<std::size_t>(hw));
  for (Index r = 0; r < hw; ++r) index[static_cast<std::size_t>(r)] = static_cast<int>(r);
  const auto flat = region.flat();
  for (std::size_t p = 0; p < flat.size(); ++p) index[static_cast<std::size_t>(flat[p])] = static_cast<int>(hw) + region.cells[p];
  return ag::gather_rows(ag::concat_rows<S>({embed_tokens(t, s.indices), ea}), index);
}

template <typename S>
nn::ParamList<S> AnchorModule<S>::parameters() {
  nn::ParamList<S> out;
  tokens_.collect(out);
  enc_a_.collect(out);
  enc_b_.collect(out);
  out.push_back(&query_pos_);
  for (auto* l : {&wq_, &wk_, &wv_, &wo_, &ffn_a_, &ffn_b_}) l->collect(out);
  return out;
}

template <typename S>
void AnchorModule<S>::save(Checkpoint& ck) {
  ck.meta["anchor.vocab"] = std::to_string(cfg_.vocab);
  ck.meta["anchor.width"] = std::to_string(cfg_.width);
  ck.meta["anchor.heads"] = std::to_string(cfg_.heads);
  ck.meta["anchor.d_a"] = std::to_string(cfg_.component_dim);
  ck.meta["anchor.ext_row"] = std::to_string(cfg_.ext_row);
  ck.meta["anchor.ext_col"] = std::to_string(cfg_.ext_col);
  ck.meta["anchor.ffn_mult"] = std::to_string(cfg_.ffn_mult);
  ck.store(parameters());
}

template <typename S>
void AnchorModule<S>::load(const Checkpoint& ck) {
  if (ck.get_int("anchor.vocab") != cfg_.vocab || ck.get_int("anchor.width") != cfg_.width ||
      ck.get_int("anchor.ext_row") != cfg_.ext_row || ck.get_int("anchor.ext_col") != cfg_.ext_col ||
      ck.get_int("anchor.d_a") != cfg_.component_dim)
    throw DataError("anchor checkpoint incompatible with configuration");
  ck.restore(parameters());
}

template <typename S>
ConditionSequence<S> build_condition(const TokenGrid& s, const Mat<S>& ea, const FacialRegion& region,
                                     const Mat<S>& token_table) {
  if (s.h != region.grid_h || s.w != region.grid_w) throw DimensionError("build_condition: grid shape differs from region grid");
  if (ea.rows() != region.unclamped_size()) throw DimensionError("build_condition: EA rows differ from region size");
  if (ea.cols() != token_table.cols()) throw DimensionError("build_condition: EA width differs from embedding width");
  ConditionSequence<S> c;
  c.region = region;
  c.embeddings.resize(static_cast<Index>(s.size()), token_table.cols());
  for (std::size_t r = 0; r < s.size(); ++r) {
    const int k = s.indices[r];
    if (k < 0 || k >= token_table.rows()) throw RangeError("build_condition: token out of vocabulary");
    c.embeddings.row(static_cast<Index>(r)) = token_table.row(k);
  }
  const auto flat = region.flat();
  for (std::size_t p = 0; p < flat.size(); ++p) c.embeddings.row(flat[p]) = ea.row(region.cells[p]);
  return c;
}

template class AnchorModule<float>;
template class AnchorModule<double>;
template ConditionSequence<float> build_condition<float>(const TokenGrid&, const Mat<float>&, const FacialRegion&,
                                                         const Mat<float>&);
template ConditionSequence<double> build_condition<double>(const TokenGrid&, const Mat<double>&, const FacialRegion&,
                                                           const Mat<double>&);

}  // namespace emotoken
