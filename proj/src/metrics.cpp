#include "emotoken/metrics.hpp"

#include "json.hpp"

#include <cmath>

namespace emotoken::metrics {

namespace {

void check_pair(const LandmarkSeq& a, const LandmarkSeq& b) {
  if (a.size() != b.size()) throw DimensionError("landmark sequences differ in length");
  if (a.empty()) throw DimensionError("landmark sequences are empty");
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].rows() != kLandmarkCount || a[t].cols() != 2 || b[t].rows() != kLandmarkCount || b[t].cols() != 2)
      throw DimensionError("landmarks must be 68x2");
    if (!a[t].allFinite() || !b[t].allFinite()) throw DataError("non-finite landmark");
  }
}

void check_frames(const Frame& a, const Frame& b) {
  if (!a.same_shape(b) || a.pixels.rows() != b.pixels.rows() || a.pixels.cols() != b.pixels.cols())
    throw DimensionError("frames differ in shape");
}

}  // namespace

std::vector<int> subset_indices(Subset s) {
  std::vector<int> out;
  const int first = s == Subset::mouth ? kMouthFirst : 0;
  for (int i = first; i < kLandmarkCount; ++i) out.push_back(i);
  return out;
}

double ld(const LandmarkSeq& gen, const LandmarkSeq& ref, Subset s) {
  check_pair(gen, ref);
  const auto idx = subset_indices(s);
  double total = 0;
  for (std::size_t t = 0; t < gen.size(); ++t)
    for (int i : idx) total += (gen[t].row(i) - ref[t].row(i)).norm();
  return total / static_cast<double>(gen.size() * idx.size());
}

double lvd(const LandmarkSeq& gen, const LandmarkSeq& ref, Subset s) {
  check_pair(gen, ref);
  if (gen.size() < 2) throw DimensionError("lvd needs at least two frames");
  const auto idx = subset_indices(s);
  double total = 0;
  for (std::size_t t = 0; t + 1 < gen.size(); ++t)
    for (int i : idx) {
      const RowVec<double> vg = gen[t + 1].row(i) - gen[t].row(i);
      const RowVec<double> vr = ref[t + 1].row(i) - ref[t].row(i);
      total += (vg - vr).norm();
    }
  return total / static_cast<double>((gen.size() - 1) * idx.size());
}

double ssim(const Frame& a, const Frame& b, const SsimConfig& cfg) {
  check_frames(a, b);
  const int win = std::min({cfg.window, a.height, a.width});
  const int stride = std::max(1, cfg.stride);
  const double n = static_cast<double>(win) * win;
  double total = 0;
  int count = 0;
  for (int c = 0; c < 3; ++c)
    for (int y0 = 0; y0 + win <= a.height; y0 += stride)
      for (int x0 = 0; x0 + win <= a.width; x0 += stride) {
        double ma = 0, mb = 0;
        for (int y = y0; y < y0 + win; ++y)
          for (int x = x0; x < x0 + win; ++x) ma += a.at(y, x, c), mb += b.at(y, x, c);
        ma /= n, mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (int y = y0; y < y0 + win; ++y)
          for (int x = x0; x < x0 + win; ++x) {
            const double da = a.at(y, x, c) - ma, db = b.at(y, x, c) - mb;
            va += da * da, vb += db * db, cov += da * db;
          }
        va /= n - 1, vb /= n - 1, cov /= n - 1;
        total += ((2 * ma * mb + cfg.c1) * (2 * cov + cfg.c2)) /
                 ((ma * ma + mb * mb + cfg.c1) * (va + vb + cfg.c2));
        ++count;
      }
  return total / count;
}

double psnr(const Frame& a, const Frame& b) {
  check_frames(a, b);
  const double mse = (a.pixels.cast<double>() - b.pixels.cast<double>()).squaredNorm() / static_cast<double>(a.pixels.size());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::optional<double> fid(const std::vector<Frame>&, const std::vector<Frame>&) { return std::nullopt; }

ClipMetrics score_clip(const std::string& id, const std::vector<Frame>& gen_frames, const LandmarkSeq& gen_landmarks,
                       const std::vector<Frame>& ref_frames, const LandmarkSeq& ref_landmarks) {
  if (gen_frames.size() != ref_frames.size() || gen_frames.size() != gen_landmarks.size())
    throw DimensionError("clip " + id + ": generated and reference are not aligned");
  ClipMetrics m;
  m.id = id;
  m.m_ld = ld(gen_landmarks, ref_landmarks, Subset::mouth);
  m.f_ld = ld(gen_landmarks, ref_landmarks, Subset::face);
  if (gen_landmarks.size() >= 2) {
    m.m_lvd = lvd(gen_landmarks, ref_landmarks, Subset::mouth);
    m.f_lvd = lvd(gen_landmarks, ref_landmarks, Subset::face);
  }
  for (std::size_t t = 0; t < gen_frames.size(); ++t) {
    m.ssim += ssim(gen_frames[t], ref_frames[t]);
    m.psnr += psnr(gen_frames[t], ref_frames[t]);
  }
  m.ssim /= static_cast<double>(gen_frames.size());
  m.psnr /= static_cast<double>(gen_frames.size());
  return m;
}

ClipMetrics Report::aggregate() const {
  ClipMetrics a;
  a.id = "aggregate";
  if (clips.empty()) return a;
  for (const auto& c : clips) {
    a.m_ld += c.m_ld, a.m_lvd += c.m_lvd, a.f_ld += c.f_ld, a.f_lvd += c.f_lvd, a.ssim += c.ssim, a.psnr += c.psnr;
  }
  const double n = static_cast<double>(clips.size());
  a.m_ld /= n, a.m_lvd /= n, a.f_ld /= n, a.f_lvd /= n, a.ssim /= n, a.psnr /= n;
  return a;
}

std::string Report::json() const {
  auto row = [](const ClipMetrics& c) {
    return nlohmann::json{{"m_ld", c.m_ld}, {"m_lvd", c.m_lvd}, {"f_ld", c.f_ld},
                          {"f_lvd", c.f_lvd}, {"ssim", c.ssim},   {"psnr", c.psnr}};
  };
  nlohmann::json j;
  j["clips"] = nlohmann::json::array();
  for (const auto& c : clips) {
    auto r = row(c);
    r["id"] = c.id;
    j["clips"].push_back(r);
  }
  j["aggregate"] = row(aggregate());
  j["fid"] = "unavailable";
  for (const auto& [k, v] : extra) j["extra"][k] = v;
  return j.dump(2);
}

double token_change_rate(const TokenGrid& a, const TokenGrid& b, const std::vector<int>& positions) {
  if (a.h != b.h || a.w != b.w) throw DimensionError("token grids differ in shape");
  std::size_t changed = 0, total = 0;
  if (positions.empty()) {
    for (std::size_t i = 0; i < a.size(); ++i) changed += a.indices[i] != b.indices[i];
    total = a.size();
  } else {
    for (int p : positions) changed += a.indices[static_cast<std::size_t>(p)] != b.indices[static_cast<std::size_t>(p)];
    total = positions.size();
  }
  return total ? static_cast<double>(changed) / static_cast<double>(total) : 0.0;
}

double flip_rate(const std::vector<TokenGrid>& grids) {
  if (grids.size() < 2) return 0.0;
  double total = 0;
  for (std::size_t t = 0; t + 1 < grids.size(); ++t) total += token_change_rate(grids[t], grids[t + 1]);
  return total / static_cast<double>(grids.size() - 1);
}

}  // namespace emotoken::metrics
