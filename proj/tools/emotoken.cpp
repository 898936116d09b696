// Command-line front end: corpus generation, training stages, generation,
// evaluation and ablations.

#include "emotoken/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace emotoken;
using namespace emotoken::pipeline;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string run_dir, corpus_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value config file");
  cmd->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("--run", c.run_dir, "run directory");
  cmd->add_option("--corpus", c.corpus_dir, "corpus directory");
  cmd->add_option("--seed", c.seed, "master seed");
}

/// File values first, then --set, then the dedicated flags.
PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg = c.config_file.empty() ? PipelineConfig{} : PipelineConfig::load(c.config_file);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!c.run_dir.empty()) cfg.run_dir = c.run_dir;
  if (!c.corpus_dir.empty()) cfg.corpus_dir = c.corpus_dir;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run(int argc, char** argv) {
  CLI::App app{"Emotion-controllable talking-face token pipeline"};
  app.require_subcommand(1);

  Common mk, vq, au, ar, gen, ev, ab;

  auto* make_corpus_cmd = app.add_subcommand("make-corpus", "write the synthetic sprite corpus");
  add_common(make_corpus_cmd, mk);

  auto* train_vq_cmd = app.add_subcommand("train-vq", "stage 1: train and freeze the visual tokenizer");
  add_common(train_vq_cmd, vq);

  auto* train_audio_cmd = app.add_subcommand("train-audio", "stage 1: train and freeze the audio disentangler");
  add_common(train_audio_cmd, au);

  auto* train_ar_cmd = app.add_subcommand("train-ar", "stage 2: train the emotion anchor and AR model");
  add_common(train_ar_cmd, ar);
  std::optional<double> lambda;
  std::optional<int> region;
  train_ar_cmd->add_option("--lambda", lambda, "continuity loss weight");
  train_ar_cmd->add_option("--region", region, "facial region half extent (x = y)");

  auto* generate_cmd = app.add_subcommand("generate", "render an emotion onto a target clip");
  add_common(generate_cmd, gen);
  std::string clip_id, emotion, emotion_audio, out_dir, checkpoint;
  std::optional<int> length, top_k;
  std::optional<double> temperature;
  generate_cmd->add_option("--clip", clip_id, "target clip id from the corpus")->required();
  auto* emo_opt = generate_cmd->add_option("--emotion", emotion, "emotion name or id (0-7)");
  auto* audio_opt = generate_cmd->add_option("--emotion-audio", emotion_audio, "audio-feature file carrying the emotion");
  emo_opt->excludes(audio_opt);
  generate_cmd->add_option("--length", length, "frames to generate");
  generate_cmd->add_option("--temperature", temperature, "sampling temperature");
  generate_cmd->add_option("--top-k", top_k, "top-k sampling cutoff (1 = greedy)");
  generate_cmd->add_option("--out", out_dir, "output directory");
  generate_cmd->add_option("--checkpoint", checkpoint, "stage-2 checkpoint (default: run/stage2/ar.ckpt)");

  auto* eval_cmd = app.add_subcommand("eval", "score generated clips against reference clips");
  add_common(eval_cmd, ev);
  std::vector<std::string> generated;
  std::string reference, report_path;
  eval_cmd->add_option("--generated", generated, "generation output directory, repeatable")->required();
  eval_cmd->add_option("--reference", reference, "reference clip id (default: recorded in generation.json)");
  eval_cmd->add_option("--out", report_path, "report path (default: run/eval/report.json)");

  auto* ablate_cmd = app.add_subcommand("ablate", "region-size and continuity ablations on one stage-1 run");
  add_common(ablate_cmd, ab);
  int pairs = 16, ab_length = 16;
  ablate_cmd->add_option("--pairs", pairs, "emotion-swap pairs per variant");
  ablate_cmd->add_option("--length", ab_length, "frames per generated clip");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  if (make_corpus_cmd->parsed()) {
    PipelineConfig cfg = resolve(mk);
    if (mk.seed) cfg.corpus_seed = *mk.seed;
    const auto manifest = make_corpus(cfg);
    std::cout << "wrote " << manifest.clips.size() << " clips to " << cfg.corpus_dir << "\n";
    return kOk;
  }

  auto training_config = [](const Common& c) {
    PipelineConfig cfg = resolve(c);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
  };

  if (train_vq_cmd->parsed()) {
    const PipelineConfig cfg = training_config(vq);
    const auto r = train_vq(cfg, load_corpus(cfg.corpus_dir));
    std::cout << "held-out mse " << r.heldout_mse << "\n";
    return kOk;
  }
  if (train_audio_cmd->parsed()) {
    const PipelineConfig cfg = training_config(au);
    const auto r = train_audio(cfg, load_corpus(cfg.corpus_dir));
    std::cout << "emotion probe " << r.emotion_probe << " content probe " << r.content_probe << "\n";
    return kOk;
  }
  if (train_ar_cmd->parsed()) {
    PipelineConfig cfg = resolve(ar);
    if (ar.seed) cfg.seed = *ar.seed;
    if (lambda) cfg.lambda = *lambda;
    if (region) cfg.region_x = cfg.region_y = *region;
    cfg.validate();
    const Corpus corpus = load_corpus(cfg.corpus_dir);
    const auto r = train_stage2(cfg, corpus, ar_checkpoint_path(cfg));
    std::cout << "held-out nll " << r.heldout_nll << " (uniform " << std::log(double(cfg.vq_K)) << ")\n";
    return kOk;
  }
  if (generate_cmd->parsed()) {
    PipelineConfig cfg = resolve(gen);
    if (gen.seed) cfg.sample_seed = *gen.seed;
    if (temperature) cfg.temperature = *temperature;
    if (top_k) cfg.top_k = *top_k;
    cfg.validate();
    if (emotion.empty() && emotion_audio.empty()) throw ConfigError("generate needs --emotion or --emotion-audio");
    const Corpus corpus = load_corpus(cfg.corpus_dir);
    const auto& target = corpus.clip(clip_id);
    const Stage1Models s1 = load_stage1(cfg);
    const Stage2Models s2 = load_stage2(cfg, checkpoint.empty() ? ar_checkpoint_path(cfg) : checkpoint);
    EmotionSource source;
    std::optional<int> emotion_label;
    if (!emotion.empty()) {
      source.emotion_id = synth::emotion_from_name(emotion);
      source.label = synth::emotion_name(*source.emotion_id);
      emotion_label = source.emotion_id;
    } else {
      source.audio = load_audio_clip(emotion_audio);
      source.label = emotion_audio;
      emotion_label = source.audio->emotion_id;
    }
    const int T = length.value_or(target.length());
    const auto g = generate(s1, s2, cfg, target, source, T, cfg.sampling());
    std::string reference_id = target.id;
    if (emotion_label)
      if (const auto* r = corpus.find(target.labels.content, *emotion_label, target.labels.identity)) reference_id = r->id;
    const std::string dir = out_dir.empty()
                                ? (fs::path(cfg.run_dir) / "generate" / (target.id + "_" + source.label)).string()
                                : out_dir;
    json meta{{"target", target.id},
              {"identity", target.labels.identity},
              {"content", target.labels.content},
              {"emotion_source", {{"kind", source.audio ? "audio" : "id"}, {"value", source.label}}},
              {"reference", reference_id},
              {"length", T},
              {"sampling", {{"temperature", cfg.temperature}, {"top_k", cfg.top_k}, {"seed", cfg.sample_seed}}},
              {"config_hash", hex64(cfg.hash())}};
    if (emotion_label) meta["emotion"] = *emotion_label;
    write_generation(dir, g, meta.dump());
    record_run(cfg, "generate", json{{"output", dir}, {"target", target.id}, {"sample_seed", cfg.sample_seed}}.dump());
    std::cout << "wrote " << T << " frames to " << dir << "\n";
    return kOk;
  }
  if (eval_cmd->parsed()) {
    PipelineConfig cfg = resolve(ev);
    cfg.validate();
    const Corpus corpus = load_corpus(cfg.corpus_dir);
    metrics::Report report;
    for (const auto& dir : generated) {
      json meta;
      try {
        meta = json::parse(read_file((fs::path(dir) / "generation.json").string()));
      } catch (const json::exception& e) {
        throw DataError(dir + "/generation.json: " + e.what());
      }
      const auto frames = synth::load_frames((fs::path(dir) / "frames.bin").string());
      const std::string ref_id = reference.empty() ? meta.value("reference", std::string()) : reference;
      const auto& ref = corpus.clip(ref_id);
      if (static_cast<int>(frames.size()) > ref.length())
        throw DataError(dir + ": more generated frames than the reference clip has");
      const std::size_t T = frames.size();
      const std::vector<Frame> ref_frames(ref.frames.begin(), ref.frames.begin() + static_cast<long>(T));
      const LandmarkSeq ref_lm(ref.landmarks.begin(), ref.landmarks.begin() + static_cast<long>(T));
      const int identity = meta.value("identity", ref.labels.identity);
      report.clips.push_back(
          metrics::score_clip(fs::path(dir).filename().string(), frames, generated_landmarks(frames, identity), ref_frames, ref_lm));
    }
    const std::string path = report_path.empty() ? (fs::path(cfg.run_dir) / "eval" / "report.json").string() : report_path;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << report.json() << "\n";
    std::cout << report.json() << "\n";
    record_run(cfg, "eval", json{{"report", path}}.dump());
    return kOk;
  }
  if (ablate_cmd->parsed()) {
    PipelineConfig cfg = resolve(ab);
    if (ab.seed) cfg.seed = *ab.seed;
    cfg.validate();
    const Corpus corpus = load_corpus(cfg.corpus_dir);
    const auto rows = ablate(cfg, corpus, default_variants(), pairs, ab_length);
    std::cout << ablation_markdown(rows);
    return kOk;
  }
  return kConfig;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const RangeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
