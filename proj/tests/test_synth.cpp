#include "doctest.h"

#include "emotoken/synth_data.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace emotoken;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("emotoken_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double mean_point_error(const Landmarks& a, const Landmarks& b) {
  return (a - b).rowwise().norm().mean();
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("emotion names round trip") {
  for (int p = 0; p < synth::kEmotions; ++p) CHECK(synth::emotion_from_name(synth::emotion_name(p)) == p);
  CHECK(synth::emotion_from_name("5") == 5);
  CHECK(std::string(synth::emotion_name(0)) == "neutral");
  CHECK_THROWS(synth::emotion_from_name("bored"));
  CHECK_THROWS(synth::emotion_from_name("8"));
}

TEST_CASE("corpus grid covers every combination with a disjoint content split") {
  synth::CorpusSpec spec;
  spec.contents = 4;
  spec.identities = 2;
  const auto m = synth::corpus_grid(spec);
  CHECK(m.clips.size() == 64);
  CHECK(m.first_test_content() == 3);
  std::set<std::tuple<int, int, int>> combos;
  std::set<int> train_contents, test_contents;
  std::set<std::string> ids;
  for (const auto& e : m.clips) {
    combos.insert({e.labels.content, e.labels.emotion, e.labels.identity});
    ids.insert(e.id);
    (e.test ? test_contents : train_contents).insert(e.labels.content);
    CHECK(e.test == synth::is_test_content(e.labels.content, 4));
  }
  CHECK(combos.size() == 64);
  CHECK(ids.size() == 64);
  CHECK(test_contents == std::set<int>{3});
  CHECK(train_contents == std::set<int>{0, 1, 2});

  spec.contents = 8;
  const auto m8 = synth::corpus_grid(spec);
  CHECK(m8.first_test_content() == 6);
  CHECK(synth::corpus_grid(spec).clips.front().seed == m8.clips.front().seed);
  spec.seed = 8;
  CHECK(synth::corpus_grid(spec).clips.front().seed != m8.clips.front().seed);
}

TEST_CASE("clip realisation is deterministic") {
  synth::CorpusSpec spec;
  spec.contents = 4;
  spec.length = 6;
  const auto m = synth::corpus_grid(spec);
  const auto a = synth::realize(m, m.clips[5]);
  const auto b = synth::realize(m, m.clips[5]);
  REQUIRE(a.length() == 6);
  for (int t = 0; t < 6; ++t) {
    CHECK(a.frames[t].pixels == b.frames[t].pixels);
    CHECK(a.landmarks[t] == b.landmarks[t]);
  }
  CHECK(a.audio.features == b.audio.features);
  const auto c = synth::realize(m, m.clips[6]);
  CHECK(c.audio.features != a.audio.features);
}

TEST_CASE("noise-free audio is content basis plus an alternating emotion offset") {
  synth::AudioSynthConfig cfg;
  cfg.noise = 0;
  const auto clip = synth::synth_audio(2, 5, 4, 123, cfg);
  for (int t = 0; t < 4; ++t) {
    const Mat<float> expect = synth::content_basis(2, t, cfg) + synth::emotion_offset(5, 2, t, cfg);
    CHECK(clip.features.row(t) == expect.row(0));
  }
  CHECK(synth::emotion_offset(5, 2, 0, cfg) == -synth::emotion_offset(5, 2, 1, cfg));
  CHECK(synth::synth_audio(2, 5, 4, 999, cfg).features == clip.features);
  CHECK(synth::emotion_offset(5, 2, 0, cfg) != synth::emotion_offset(4, 2, 0, cfg));
  CHECK_THROWS_AS(synth::emotion_offset(8, 0, 0, cfg), RangeError);
}

TEST_CASE("landmarks sit on the face and follow the controls") {
  const auto style = synth::identity_style(0);
  const auto neutral = synth::landmarks(style, synth::emotion_controls(0));
  REQUIRE(neutral.rows() == kLandmarkCount);
  REQUIRE(neutral.cols() == 2);
  CHECK(neutral.col(0).mean() == doctest::Approx(style.cx).epsilon(0.1));
  CHECK(neutral.minCoeff() >= 0.0);
  CHECK(neutral.maxCoeff() <= 32.0);

  synth::RenderControls open = synth::emotion_controls(0);
  open.mouth_openness = 2.0;
  const auto opened = synth::landmarks(style, open);
  CHECK((opened.topRows(kMouthFirst) - neutral.topRows(kMouthFirst)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((opened.bottomRows(kMouthCount) - neutral.bottomRows(kMouthCount)).cwiseAbs().maxCoeff() > 0.5);

  const auto big = synth::landmarks(synth::identity_style(0, 64), synth::emotion_controls(0), 64);
  CHECK((big - 2.0 * neutral).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("landmark text format round trip") {
  const auto dir = scratch_dir("landmarks");
  LandmarkSeq seq;
  const auto style = synth::identity_style(1);
  for (int t = 0; t < 3; ++t) seq.push_back(synth::landmarks(style, synth::controls({1, 2, 1, t})));
  const auto path = (dir / "a.landmarks.txt").string();
  write_landmarks(path, seq);
  const auto back = read_landmarks(path);
  REQUIRE(back.size() == 3);
  for (int t = 0; t < 3; ++t) CHECK((back[t] - seq[t]).cwiseAbs().maxCoeff() < 1e-6);  // nine significant digits

  {
    std::ofstream os((dir / "c.txt").string());
    os << "# comment\n\nframe 0\n";
    for (int i = 0; i < kLandmarkCount; ++i) os << i << " " << 2 * i << "\n";
  }
  const auto c = read_landmarks((dir / "c.txt").string());
  REQUIRE(c.size() == 1);
  CHECK(c[0](67, 1) == 134.0);
  {
    std::ofstream os((dir / "bad.txt").string());
    os << "frame 0\n1 2\n";
  }
  CHECK_THROWS_AS(read_landmarks((dir / "bad.txt").string()), DataError);
  CHECK_THROWS_AS(read_landmarks((dir / "missing.txt").string()), DataError);
}

TEST_CASE("corpus directory round trip") {
  const auto dir = scratch_dir("corpus");
  synth::CorpusSpec spec;
  spec.contents = 4;
  spec.identities = 1;
  spec.length = 3;
  const auto m = synth::corpus_grid(spec);
  synth::write_corpus(dir.string(), m);
  const auto back = synth::read_manifest(dir.string());
  REQUIRE(back.clips.size() == m.clips.size());
  CHECK(back.spec.contents == 4);
  CHECK(back.clips[7].id == m.clips[7].id);
  CHECK(back.clips[7].seed == m.clips[7].seed);
  const auto a = synth::load_clip(dir.string(), back.clips[7]);
  const auto b = synth::realize(m, m.clips[7]);
  REQUIRE(a.length() == 3);
  CHECK(a.frames[2].pixels == b.frames[2].pixels);
  CHECK((a.landmarks[1] - b.landmarks[1]).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(a.audio.features == b.audio.features);
  CHECK(a.audio.emotion_id == b.labels.emotion);

  fs::remove(dir / (m.clips[7].id + ".frames"));
  CHECK_THROWS_AS(synth::load_clip(dir.string(), back.clips[7]), DataError);
}

TEST_CASE("keypoint fitter recovers landmarks of rendered frames") {
  double worst = 0;
  for (int id = 0; id < 2; ++id)
    for (int p = 0; p < synth::kEmotions; ++p)
      for (int t : {0, 7}) {
        const auto style = synth::identity_style(id);
        const auto c = synth::controls({1, p, id, t});
        const auto est = synth::estimate_landmarks(synth::render(style, c), id);
        worst = std::max(worst, mean_point_error(est, synth::landmarks(style, c)));
      }
  CHECK(worst < 0.05);

  const auto s = synth::identity_style(0);
  const auto happy = synth::landmarks(s, synth::emotion_controls(5));
  const auto sad = synth::landmarks(s, synth::emotion_controls(6));
  const auto est = synth::estimate_landmarks(synth::render(s, synth::emotion_controls(5)), 0);
  CHECK(mean_point_error(est, happy) < mean_point_error(est, sad));
}

}  // TEST_SUITE
