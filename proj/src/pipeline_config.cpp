#include "emotoken/pipeline.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>

namespace emotoken::pipeline {

namespace {

using C = PipelineConfig;
using Member = std::variant<int C::*, double C::*, std::uint64_t C::*, std::string C::*>;

struct Field {
  const char* key;
  Member member;
};

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      {"seed", &C::seed},
      {"corpus.dir", &C::corpus_dir},
      {"corpus.seed", &C::corpus_seed},
      {"corpus.contents", &C::corpus_contents},
      {"corpus.identities", &C::corpus_identities},
      {"corpus.length", &C::corpus_length},
      {"corpus.size", &C::corpus_size},
      {"corpus.audio_noise", &C::corpus_audio_noise},
      {"run.dir", &C::run_dir},
      {"vq.K", &C::vq_K},
      {"vq.d", &C::vq_d},
      {"vq.n", &C::vq_n},
      {"vq.beta", &C::vq_beta},
      {"vq.channels", &C::vq_channels},
      {"vq.full_channels", &C::vq_full_channels},
      {"vq.perceptual_weight", &C::vq_perceptual_weight},
      {"vq.adversarial_weight", &C::vq_adversarial_weight},
      {"vq.adversarial_warmup", &C::vq_adversarial_warmup},
      {"vq.steps", &C::vq_steps},
      {"vq.batch", &C::vq_batch},
      {"vq.lr", &C::vq_lr},
      {"vq.disc_lr", &C::vq_disc_lr},
      {"audio.d_a", &C::audio_d_a},
      {"audio.hidden", &C::audio_hidden},
      {"audio.steps", &C::audio_steps},
      {"audio.quads", &C::audio_quads},
      {"audio.lr", &C::audio_lr},
      {"region.x", &C::region_x},
      {"region.y", &C::region_y},
      {"anchor.heads", &C::anchor_heads},
      {"anchor.ffn_mult", &C::anchor_ffn_mult},
      {"ar.layers", &C::ar_layers},
      {"ar.heads", &C::ar_heads},
      {"ar.width", &C::ar_width},
      {"ar.context", &C::ar_context},
      {"ar.ffn_mult", &C::ar_ffn_mult},
      {"ar.steps", &C::ar_steps},
      {"ar.batch", &C::ar_batch},
      {"ar.lr", &C::ar_lr},
      {"ar.warmup", &C::ar_warmup},
      {"ar.grad_clip", &C::ar_grad_clip},
      {"ar.lambda", &C::lambda},
      {"ar.heldout_frames", &C::ar_heldout_frames},
      {"sample.temperature", &C::temperature},
      {"sample.top_k", &C::top_k},
      {"sample.seed", &C::sample_seed},
      {"log.every", &C::log_every},
  };
  return fields;
}

const Field& field(const std::string& key) {
  for (const auto& f : schema())
    if (key == f.key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& raw) {
  const Field& f = field(key);
  const std::string value = trim(raw);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, std::string>) {
          if (value.find('\n') != std::string::npos) throw ConfigError("config key '" + key + "': newline in value");
          this->*member = value;
        } else if constexpr (std::is_same_v<T, double>) {
          const double v = parse_number<double>(key, value);
          if (!std::isfinite(v)) throw ConfigError("config key '" + key + "': value must be finite");
          this->*member = v;
        } else {
          this->*member = parse_number<T>(key, value);
        }
      },
      f.member);
}

std::string PipelineConfig::get(const std::string& key) const {
  const Field& f = field(key);
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, std::string>) return this->*member;
        else if constexpr (std::is_same_v<T, double>) return format_double(this->*member);
        else return std::to_string(this->*member);
      },
      f.member);
}

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : schema()) out.emplace_back(f.key);
  return out;
}

std::string PipelineConfig::serialize() const {
  std::ostringstream os;
  for (const auto& f : schema()) os << f.key << " = " << get(f.key) << "\n";
  return os.str();
}

PipelineConfig PipelineConfig::parse(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    if (std::find(seen.begin(), seen.end(), key) != seen.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen.push_back(key);
    cfg.set(key, t.substr(eq + 1));
  }
  return cfg;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void PipelineConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << serialize();
}

void PipelineConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(!corpus_dir.empty() && !run_dir.empty(), "corpus.dir and run.dir must be set");
  need(corpus_contents >= 2, "corpus.contents must be >= 2");
  need(corpus_identities >= 1, "corpus.identities must be >= 1");
  need(corpus_length >= 2, "corpus.length must be >= 2");
  need(corpus_size >= 8, "corpus.size must be >= 8");
  need(corpus_audio_noise >= 0, "corpus.audio_noise must be >= 0");
  need(vq_K >= 2, "vq.K must be >= 2");
  need(vq_K <= 65535, "vq.K must fit the 16-bit token format");
  need(vq_d >= 1, "vq.d must be >= 1");
  need(vq_n >= 1 && (vq_n & (vq_n - 1)) == 0, "vq.n must be a power of two");
  need(corpus_size % vq_n == 0, "corpus.size must be divisible by vq.n");
  need(vq_beta >= 0, "vq.beta must be >= 0");
  need(vq_steps >= 0 && vq_batch >= 1, "vq.steps >= 0 and vq.batch >= 1 required");
  need(vq_lr > 0 && vq_disc_lr > 0, "vq learning rates must be > 0");
  need(audio_d_a >= 1 && audio_hidden >= 1, "audio dimensions must be >= 1");
  need(audio_steps >= 0 && audio_quads >= 1 && audio_lr > 0, "audio optimiser settings out of range");
  need(region_x >= 0 && region_y >= 0, "region.x and region.y must be >= 0");
  need(lambda >= 0, "ar.lambda must be >= 0");
  need(ar_width >= 1 && ar_heads >= 1 && ar_width % ar_heads == 0, "ar.width must be divisible by ar.heads");
  need(ar_width % anchor_heads == 0 && anchor_heads >= 1, "ar.width must be divisible by anchor.heads");
  need(ar_layers >= 1 && ar_ffn_mult >= 1 && anchor_ffn_mult >= 1, "ar sizes must be positive");
  const int hw = (corpus_size / vq_n) * (corpus_size / vq_n);
  need(ar_context >= 2 * hw, "ar.context must hold the condition prefix and the token grid");
  need(ar_steps >= 0 && ar_batch >= 1 && ar_lr > 0 && ar_warmup >= 0 && ar_grad_clip >= 0,
       "ar optimiser settings out of range");
  need(ar_heldout_frames >= 1, "ar.heldout_frames must be >= 1");
  need(temperature > 0, "sample.temperature must be > 0");
  need(top_k >= 1 && top_k <= vq_K, "sample.top_k must lie in [1, K]");
  need(log_every >= 1, "log.every must be >= 1");
}

std::uint64_t PipelineConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

synth::CorpusSpec PipelineConfig::corpus() const {
  synth::CorpusSpec s;
  s.contents = corpus_contents;
  s.identities = corpus_identities;
  s.length = corpus_length;
  s.size = corpus_size;
  s.seed = corpus_seed;
  s.audio_noise = corpus_audio_noise;
  return s;
}

VqConfig PipelineConfig::vq() const {
  VqConfig c;
  c.codebook_size = vq_K;
  c.code_dim = vq_d;
  c.downsample = vq_n;
  c.height = c.width = corpus_size;
  c.channels = vq_channels;
  c.full_channels = vq_full_channels;
  c.beta = vq_beta;
  c.perceptual_weight = vq_perceptual_weight;
  c.adversarial_weight = vq_adversarial_weight;
  c.adversarial_warmup = vq_adversarial_warmup;
  c.seed = derive_seeds(seed).vq;
  return c;
}

AudioConfig PipelineConfig::audio() const {
  AudioConfig c;
  c.component_dim = audio_d_a;
  c.hidden = audio_hidden;
  c.emotions = synth::kEmotions;
  c.seed = derive_seeds(seed).audio;
  return c;
}

AnchorConfig PipelineConfig::anchor() const {
  AnchorConfig c;
  c.vocab = vq_K;
  c.width = ar_width;
  c.heads = anchor_heads;
  c.component_dim = audio_d_a;
  c.ext_row = region_x;
  c.ext_col = region_y;
  c.ffn_mult = anchor_ffn_mult;
  c.seed = derive_seeds(seed).anchor;
  return c;
}

ArConfig PipelineConfig::ar() const {
  ArConfig c;
  c.vocab = vq_K;
  c.layers = ar_layers;
  c.heads = ar_heads;
  c.width = ar_width;
  c.context = ar_context;
  c.grid_h = c.grid_w = corpus_size / vq_n;
  c.ffn_mult = ar_ffn_mult;
  c.seed = derive_seeds(seed).ar;
  return c;
}

SamplingConfig PipelineConfig::sampling() const {
  SamplingConfig s;
  s.temperature = temperature;
  s.top_k = top_k;
  s.seed = sample_seed;
  return s;
}

Seeds derive_seeds(std::uint64_t master) {
  return {mix_seed(master, 1), mix_seed(master, 2), mix_seed(master, 3), mix_seed(master, 4),
          mix_seed(master, 5), mix_seed(master, 6), mix_seed(master, 7)};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace emotoken::pipeline
