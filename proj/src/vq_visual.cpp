#include "emotoken/vq_visual.hpp"
#include "emotoken/core/binary_io.hpp"

#include <bit>
#include <fstream>

namespace emotoken {

void write_token_grid(std::ostream& os, const TokenGrid& grid) {
  if (grid.indices.size() != static_cast<std::size_t>(grid.h) * grid.w)
    throw DimensionError("token grid: shape inconsistent");
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(grid.h));
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(grid.w));
  for (int v : grid.indices) {
    if (v < 0 || v > 0xFFFF) throw RangeError("token grid: index does not fit in 16 bits");
    bin::put<std::uint16_t>(os, static_cast<std::uint16_t>(v));
  }
}

TokenGrid read_token_grid(std::istream& is) {
  auto h = bin::get<std::uint32_t>(is);
  auto w = bin::get<std::uint32_t>(is);
  if (static_cast<std::uint64_t>(h) * w > (1u << 24)) throw DataError("token grid: implausible size");
  TokenGrid g(static_cast<int>(h), static_cast<int>(w));
  for (auto& v : g.indices) v = bin::get<std::uint16_t>(is);
  return g;
}

void save_token_grid(const std::string& path, const TokenGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  write_token_grid(os, grid);
}

TokenGrid load_token_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_token_grid(is);
}

void VqConfig::validate() const {
  if (codebook_size < 2) throw ConfigError("vq: codebook size must be >= 2");
  if (code_dim < 1) throw ConfigError("vq: code dim must be positive");
  if (downsample < 1 || !std::has_single_bit(static_cast<unsigned>(downsample)))
    throw ConfigError("vq: downsample ratio must be a power of two");
  if (height % downsample != 0 || width % downsample != 0)
    throw DimensionError("vq: frame size not divisible by downsample ratio");
  if (beta < 0) throw ConfigError("vq: beta must be non-negative");
}

template <typename S>
VqModel<S>::VqModel(const VqConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg.seed);
  stages_ = std::countr_zero(static_cast<unsigned>(cfg.downsample));
  const int C = cfg.channels, F = cfg.full_channels, d = cfg.code_dim;
  const int mid = stages_ > 0 ? C : F;

  enc_in_ = nn::Conv2d<S>("vq.enc.in", 3, F, 3, 1, 1, rng);
  for (int s = 0; s < stages_; ++s)
    enc_down_.emplace_back("vq.enc.down" + std::to_string(s), s == 0 ? F : C, C, 3, 2, 1, rng);
  enc_res_ = {nn::Conv2d<S>("vq.enc.res.a", mid, mid, 3, 1, 1, rng),
              nn::Conv2d<S>("vq.enc.res.b", mid, mid, 3, 1, 1, rng)};
  enc_out_ = nn::Conv2d<S>("vq.enc.out", mid, d, 1, 1, 0, rng);

  const S bound = S(1) / static_cast<S>(cfg.codebook_size);
  codebook_ = Parameter<S>("vq.codebook", nn::uniform<S>(cfg.codebook_size, d, bound, rng));

  dec_in_ = nn::Conv2d<S>("vq.dec.in", d, mid, 1, 1, 0, rng);
  dec_res_ = {nn::Conv2d<S>("vq.dec.res.a", mid, mid, 3, 1, 1, rng),
              nn::Conv2d<S>("vq.dec.res.b", mid, mid, 3, 1, 1, rng)};
  for (int s = 0; s < stages_; ++s)
    dec_up_.emplace_back("vq.dec.up" + std::to_string(s), C, s + 1 == stages_ ? F : C, 3, 1, 1, rng);
  dec_out_ = nn::Conv2d<S>("vq.dec.out", F, 3, 3, 1, 1, rng);

  disc_.emplace_back("vq.disc.0", 3, 32, 3, 2, 1, rng);
  disc_.emplace_back("vq.disc.1", 32, 64, 3, 2, 1, rng);
  disc_.emplace_back("vq.disc.2", 64, 1, 3, 1, 1, rng);

  Rng prng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  percep_.emplace_back("vq.percep.0", 3, 16, 3, 1, 1, prng);
  percep_.emplace_back("vq.percep.1", 16, 32, 3, 2, 1, prng);
  for (auto& c : percep_) {
    c.weight.frozen = true;
    c.bias.frozen = true;
  }
}

template <typename S>
ag::Var<S> VqModel<S>::resblock(ag::Tape<S>& t, const ResBlock& rb, ag::Var<S> x, int batch, int h, int w) const {
  auto y = rb.a(t, ag::leaky_relu(x), batch, h, w);
  y = rb.b(t, ag::leaky_relu(y), batch, h, w);
  return ag::add(x, y);
}

template <typename S>
ag::Var<S> VqModel<S>::encoder(ag::Tape<S>& t, ag::Var<S> frames, int batch) const {
  int h = cfg_.height, w = cfg_.width;
  if (frames.rows() != static_cast<Index>(batch) * h * w || frames.cols() != 3)
    throw DimensionError("encoder: frame batch has wrong shape");
  auto x = ag::leaky_relu(enc_in_(t, frames, batch, h, w));
  for (const auto& conv : enc_down_) {
    x = ag::leaky_relu(conv(t, x, batch, h, w));
    h /= 2;
    w /= 2;
  }
  x = resblock(t, enc_res_, x, batch, h, w);
  return enc_out_(t, ag::leaky_relu(x), batch, h, w);
}

template <typename S>
ag::Var<S> VqModel<S>::decoder(ag::Tape<S>& t, ag::Var<S> latent, int batch) const {
  int h = cfg_.grid_h(), w = cfg_.grid_w();
  if (latent.rows() != static_cast<Index>(batch) * h * w || latent.cols() != cfg_.code_dim)
    throw DimensionError("decoder: latent batch has wrong shape");
  auto x = dec_in_(t, latent, batch, h, w);
  x = resblock(t, dec_res_, x, batch, h, w);
  for (const auto& conv : dec_up_) {
    x = ag::upsample2x(x, batch, h, w);
    h *= 2;
    w *= 2;
    x = ag::leaky_relu(conv(t, x, batch, h, w));
  }
  if (stages_ == 0) x = ag::leaky_relu(x);
  return dec_out_(t, x, batch, h, w);
}

template <typename S>
ag::Var<S> VqModel<S>::discriminator(ag::Tape<S>& t, ag::Var<S> frames, int batch) const {
  int h = cfg_.height, w = cfg_.width;
  auto x = frames;
  for (std::size_t i = 0; i < disc_.size(); ++i) {
    const auto& conv = disc_[i];
    x = conv(t, x, batch, h, w);
    auto g = conv.geometry(batch, h, w);
    h = g.out_height();
    w = g.out_width();
    if (i + 1 < disc_.size()) x = ag::leaky_relu(x);
  }
  return x;
}

template <typename S>
std::vector<ag::Var<S>> VqModel<S>::perceptual(ag::Tape<S>& t, ag::Var<S> frames, int batch) const {
  int h = cfg_.height, w = cfg_.width;
  std::vector<ag::Var<S>> feats;
  auto x = frames;
  for (const auto& conv : percep_) {
    x = ag::relu(conv(t, x, batch, h, w));
    auto g = conv.geometry(batch, h, w);
    h = g.out_height();
    w = g.out_width();
    feats.push_back(x);
  }
  return feats;
}

template <typename S>
nn::ParamList<S> VqModel<S>::encoder_parameters() {
  nn::ParamList<S> out;
  enc_in_.collect(out);
  for (auto& c : enc_down_) c.collect(out);
  enc_res_.a.collect(out);
  enc_res_.b.collect(out);
  enc_out_.collect(out);
  return out;
}

template <typename S>
nn::ParamList<S> VqModel<S>::decoder_parameters() {
  nn::ParamList<S> out;
  dec_in_.collect(out);
  dec_res_.a.collect(out);
  dec_res_.b.collect(out);
  for (auto& c : dec_up_) c.collect(out);
  dec_out_.collect(out);
  return out;
}

template <typename S>
nn::ParamList<S> VqModel<S>::autoencoder_parameters() {
  auto out = encoder_parameters();
  out.push_back(&codebook_);
  auto dec = decoder_parameters();
  out.insert(out.end(), dec.begin(), dec.end());
  return out;
}

template <typename S>
nn::ParamList<S> VqModel<S>::discriminator_parameters() {
  nn::ParamList<S> out;
  for (auto& c : disc_) c.collect(out);
  return out;
}

template <typename S>
nn::ParamList<S> VqModel<S>::all_parameters() {
  auto out = autoencoder_parameters();
  auto d = discriminator_parameters();
  out.insert(out.end(), d.begin(), d.end());
  for (auto& c : percep_) c.collect(out);
  return out;
}

template <typename S>
void VqModel<S>::freeze() {
  nn::set_frozen(all_parameters(), true);
  frozen_ = true;
}

template <typename S>
void VqModel<S>::save(Checkpoint& ck) {
  ck.meta["vq.K"] = std::to_string(cfg_.codebook_size);
  ck.meta["vq.d"] = std::to_string(cfg_.code_dim);
  ck.meta["vq.n"] = std::to_string(cfg_.downsample);
  ck.meta["vq.H"] = std::to_string(cfg_.height);
  ck.meta["vq.W"] = std::to_string(cfg_.width);
  ck.meta["vq.channels"] = std::to_string(cfg_.channels);
  ck.meta["vq.full_channels"] = std::to_string(cfg_.full_channels);
  ck.meta["vq.beta"] = std::to_string(cfg_.beta);
  ck.meta["vq.seed"] = std::to_string(cfg_.seed);
  ck.meta["vq.frozen"] = frozen_ ? "1" : "0";
  ck.store(all_parameters());
}

template <typename S>
void VqModel<S>::load(const Checkpoint& ck) {
  if (ck.get_int("vq.K") != cfg_.codebook_size || ck.get_int("vq.d") != cfg_.code_dim ||
      ck.get_int("vq.n") != cfg_.downsample)
    throw DataError("vq checkpoint incompatible with configuration (K/d/n mismatch)");
  ck.restore(all_parameters());
  if (ck.meta.count("vq.frozen") && ck.get("vq.frozen") == "1") freeze();
}

template <typename S>
Mat<S> stack_frames(const std::vector<const Frame*>& frames) {
  if (frames.empty()) throw DimensionError("stack_frames: empty batch");
  const Index px = frames.front()->pixels.rows();
  Mat<S> out(px * static_cast<Index>(frames.size()), 3);
  for (std::size_t b = 0; b < frames.size(); ++b) {
    if (!frames[b]->same_shape(*frames.front())) throw DimensionError("stack_frames: mixed frame sizes");
    out.middleRows(static_cast<Index>(b) * px, px) = frames[b]->pixels.template cast<S>();
  }
  return out;
}

template <typename S>
LatentGrid<S> encode(const VqModel<S>& model, const Frame& frame) {
  const auto& cfg = model.config();
  if (frame.height % cfg.downsample != 0 || frame.width % cfg.downsample != 0)
    throw DimensionError("encode: frame " + std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                         " not divisible by n=" + std::to_string(cfg.downsample));
  if (frame.height != cfg.height || frame.width != cfg.width)
    throw DimensionError("encode: frame size differs from the model's configured size");
  ag::Tape<S> t(false);
  auto x = t.constant(frame.pixels.template cast<S>());
  auto e = model.encoder(t, x, 1);
  return {cfg.grid_h(), cfg.grid_w(), e.value()};
}

template <typename S>
Frame decode(const VqModel<S>& model, const LatentGrid<S>& entries) {
  const auto& cfg = model.config();
  if (entries.h != cfg.grid_h() || entries.w != cfg.grid_w() || entries.dim() != cfg.code_dim)
    throw DimensionError("decode: latent grid shape differs from the model");
  ag::Tape<S> t(false);
  auto y = model.decoder(t, t.constant(entries.values), 1);
  Frame f(entries.h * cfg.downsample, entries.w * cfg.downsample);
  f.pixels = y.value().template cast<float>().cwiseMax(0.0f).cwiseMin(1.0f);
  return f;
}

template <typename S>
VqganLoss<S> vqgan_loss(ag::Tape<S>& t, const VqModel<S>& model, ag::Var<S> frames, int batch, bool adversarial) {
  const auto& cfg = model.config();
  auto latent = model.encoder(t, frames, batch);
  auto cb_var = t.param(model.codebook_param());
  const int gh = cfg.grid_h(), gw = cfg.grid_w();
  TokenGrid tokens(gh * batch, gw);
  const Mat<S>& lv = latent.value();
  for (Index r = 0; r < lv.rows(); ++r)
    tokens.indices[static_cast<std::size_t>(r)] = nearest_code<S>(lv.row(r), model.codebook_param().value);
  auto entries = ag::gather_rows(cb_var, tokens.indices);
  auto z = ag::straight_through(latent, entries);
  auto x_hat = model.decoder(t, z, batch);

  VqganLoss<S> out;
  out.vq = vq_loss(frames, x_hat, latent, entries, static_cast<S>(cfg.beta));
  auto real_feats = model.perceptual(t, ag::stop_gradient(frames), batch);
  auto fake_feats = model.perceptual(t, x_hat, batch);
  out.perceptual = t.constant(Mat<S>::Zero(1, 1));
  for (std::size_t i = 0; i < real_feats.size(); ++i)
    out.perceptual = ag::add(out.perceptual, ag::mean(ag::square(ag::sub(fake_feats[i], ag::stop_gradient(real_feats[i])))));
  if (adversarial) {
    auto logits = model.discriminator(t, x_hat, batch);
    out.adversarial = ag::mean(ag::relu(ag::add_scalar(ag::scale(logits, S(-1)), S(1))));
  } else {
    out.adversarial = t.constant(Mat<S>::Zero(1, 1));
  }
  out.total = ag::add(out.vq.total, ag::add(ag::scale(out.perceptual, static_cast<S>(cfg.perceptual_weight)),
                                            ag::scale(out.adversarial, static_cast<S>(cfg.adversarial_weight))));
  out.latent = latent;
  out.reconstruction_frames = x_hat;
  out.tokens = std::move(tokens);
  return out;
}

template <typename S>
ag::Var<S> discriminator_loss(ag::Tape<S>& t, const VqModel<S>& model, ag::Var<S> real, ag::Var<S> fake, int batch) {
  auto dr = model.discriminator(t, real, batch);
  auto df = model.discriminator(t, fake, batch);
  auto lr = ag::mean(ag::relu(ag::add_scalar(ag::scale(dr, S(-1)), S(1))));
  auto lf = ag::mean(ag::relu(ag::add_scalar(df, S(1))));
  return ag::add(lr, lf);
}

template <typename S>
VqTrainer<S>::VqTrainer(VqModel<S>& model, nn::AdamConfig gen, nn::AdamConfig disc, std::uint64_t seed)
    : model_(model), gen_opt_(gen), disc_opt_(disc), rng_(seed) {
  const int K = model.config().codebook_size;
  window_hits_.assign(K, 0);
  idle_epochs_.assign(K, 0);
}

template <typename S>
VqStepStats VqTrainer<S>::step(const std::vector<const Frame*>& batch) {
  if (model_.frozen()) throw std::logic_error("VqTrainer: model is frozen");
  const auto& cfg = model_.config();
  const int B = static_cast<int>(batch.size());
  Mat<S> x = stack_frames<S>(batch);
  const bool adversarial = cfg.adversarial_weight > 0 && steps_ >= cfg.adversarial_warmup;
  VqStepStats stats;

  Mat<S> fake;
  {
    ag::Tape<S> t;
    auto frames = t.constant(x);
    auto loss = vqgan_loss(t, model_, frames, B, adversarial);
    if (!std::isfinite(static_cast<double>(loss.total.scalar()))) throw NumericError("vq: non-finite loss");
    t.backward(loss.total);
    stats.reconstruction = loss.vq.reconstruction.scalar();
    stats.codebook = loss.vq.codebook.scalar();
    stats.commitment = loss.vq.commitment.scalar();
    stats.perceptual = loss.perceptual.scalar();
    stats.adversarial = loss.adversarial.scalar();
    stats.total = loss.total.scalar();
    fake = loss.reconstruction_frames.value();
    track_usage(loss.tokens, loss.latent.value(), stats);
  }
  nn::zero_grad(model_.discriminator_parameters());
  gen_opt_.step(model_.autoencoder_parameters());

  if (cfg.adversarial_weight > 0 && steps_ + 1 >= cfg.adversarial_warmup) {
    ag::Tape<S> t;
    auto dl = discriminator_loss(t, model_, t.constant(x), t.constant(fake), B);
    t.backward(dl);
    stats.discriminator = dl.scalar();
    disc_opt_.step(model_.discriminator_parameters());
  }
  ++steps_;
  return stats;
}

template <typename S>
void VqTrainer<S>::track_usage(const TokenGrid& tokens, const Mat<S>& latent, VqStepStats& stats) {
  for (int k : tokens.indices) ++window_hits_[k];
  recent_latents_ = latent;
  for (int h : window_hits_) stats.used_codes += h > 0 ? 1 : 0;
  const auto& cfg = model_.config();
  if (cfg.dead_code_window <= 0 || (steps_ + 1) % cfg.dead_code_window != 0) return;
  auto& cb = model_.codebook_param();
  std::uniform_int_distribution<Index> pick(0, recent_latents_.rows() - 1);
  for (std::size_t k = 0; k < window_hits_.size(); ++k) {
    idle_epochs_[k] = window_hits_[k] == 0 ? idle_epochs_[k] + 1 : 0;
    if (idle_epochs_[k] >= cfg.dead_code_patience) {
      cb.value.row(static_cast<Index>(k)) = recent_latents_.row(pick(rng_));
      if (cb.adam_m.size() == cb.value.size()) {
        cb.adam_m.row(static_cast<Index>(k)).setZero();
        cb.adam_v.row(static_cast<Index>(k)).setZero();
      }
      idle_epochs_[k] = 0;
      ++stats.reseeded;
    }
    window_hits_[k] = 0;
  }
}

#define EMOTOKEN_INSTANTIATE_VQ(S)                                                                          \
  template class VqModel<S>;                                                                                \
  template class VqTrainer<S>;                                                                              \
  template Mat<S> stack_frames<S>(const std::vector<const Frame*>&);                                        \
  template LatentGrid<S> encode<S>(const VqModel<S>&, const Frame&);                                        \
  template Frame decode<S>(const VqModel<S>&, const LatentGrid<S>&);                                        \
  template VqganLoss<S> vqgan_loss<S>(ag::Tape<S>&, const VqModel<S>&, ag::Var<S>, int, bool);              \
  template ag::Var<S> discriminator_loss<S>(ag::Tape<S>&, const VqModel<S>&, ag::Var<S>, ag::Var<S>, int);

EMOTOKEN_INSTANTIATE_VQ(float)
EMOTOKEN_INSTANTIATE_VQ(double)

}  // namespace emotoken
