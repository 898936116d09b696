#pragma once

// Decoder-only transformer over token indices, conditioned by a continuous
// prefix segment (the condition sequence).

#include "emotoken/core/checkpoint.hpp"
#include "emotoken/core/nn.hpp"
#include "emotoken/vq_visual.hpp"

#include <cstdint>
#include <vector>

namespace emotoken {

struct ContextOverflow : RangeError {
  using RangeError::RangeError;
};

struct ArConfig {
  int vocab = 64;  // K; one extra BOS slot is appended internally
  int layers = 4;
  int heads = 4;
  int width = 128;
  int context = 640;
  int grid_h = 16;
  int grid_w = 16;
  int ffn_mult = 4;
  bool zero_head = true;
  std::uint64_t seed = 4;

  int sequence_length() const { return grid_h * grid_w; }
  void validate() const;
};

struct SamplingConfig {
  double temperature = 1.0;
  int top_k = 1;
  std::uint64_t seed = 0;

  void validate(int vocab) const;
};

template <typename S>
class ArModel {
 public:
  explicit ArModel(const ArConfig& cfg);

  const ArConfig& config() const { return cfg_; }

  /// Teacher-forced logits [L, K]; row i is the distribution of targets[i]
  /// given the condition and targets[0..i-1]. Uses at most L inputs.
  ag::Var<S> forward(ag::Tape<S>& t, ag::Var<S> condition, const std::vector<int>& targets) const;

  /// Next-index logits [1, K] after `prefix`; throws ContextOverflow when the
  /// prefix already fills the grid or the context.
  Mat<S> next_logits(const Mat<S>& condition, const std::vector<int>& prefix) const;

  /// Sequential sampling of h*w indices with a key/value cache.
  TokenGrid sample(const Mat<S>& condition, const SamplingConfig& sampling) const;

  /// Logits of every position computed one step at a time through the cache.
  Mat<S> stepwise_logits(const Mat<S>& condition, const std::vector<int>& targets) const;

  nn::ParamList<S> parameters();
  void save(Checkpoint& ck);
  void load(const Checkpoint& ck);

 private:
  struct Block {
    nn::LayerNorm<S> ln1, ln2;
    nn::Linear<S> wq, wk, wv, proj, fc1, fc2;
  };
  class Cache;

  void check_lengths(Index prefix_rows, std::size_t inputs) const;
  std::vector<int> shifted_inputs(const std::vector<int>& targets, std::size_t count) const;
  Mat<S> mask(Index prefix, Index targets) const;

  ArConfig cfg_;
  nn::Embedding<S> tok_;
  Parameter<S> pos_;  // [h*w, d]; prefix cell r and the target slot predicting cell r share a row
  Parameter<S> seg_;  // [2, d]
  std::vector<Block> blocks_;
  nn::LayerNorm<S> ln_f_;
  nn::Linear<S> head_;
};

/// Mean per-position negative log-likelihood of `target` under the condition.
template <typename S>
ag::Var<S> nll(ag::Tape<S>& t, const ArModel<S>& model, ag::Var<S> condition, const TokenGrid& target);

/// NLL of the current target under the condition built from the previous
/// frame; zero when there is no previous frame.
template <typename S>
ag::Var<S> continuity_loss(ag::Tape<S>& t, const ArModel<S>& model, const ag::Var<S>* prev_condition,
                           const TokenGrid& target);

/// L_auto + lambda * L_conti.
template <typename S>
ag::Var<S> total_loss(ag::Var<S> auto_loss, ag::Var<S> conti_loss, S lambda) {
  if (lambda < S(0)) throw ConfigError("lambda must be non-negative");
  return ag::add(auto_loss, ag::scale(conti_loss, lambda));
}

/// Value-level helpers.
template <typename S>
S nll_value(const ArModel<S>& model, const Mat<S>& condition, const TokenGrid& target);

/// Softmax over [1, K] logits with temperature.
template <typename S>
std::vector<double> distribution(const Mat<S>& logits, double temperature = 1.0);

/// Index drawn from logits under temperature / top-k; top_k == 1 is argmax
/// with the lowest index winning ties.
template <typename S>
int sample_index(const Mat<S>& logits, const SamplingConfig& sampling, Rng& rng);

}  // namespace emotoken
