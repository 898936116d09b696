#pragma once

// Landmark distance/velocity metrics and frame quality metrics.

#include "emotoken/landmarks.hpp"
#include "emotoken/vq_visual.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace emotoken::metrics {

enum class Subset { mouth, face };

/// Landmark rows covered by a subset: mouth = 48..67, face = all 68.
std::vector<int> subset_indices(Subset s);

/// Mean per-point Euclidean distance over frames and subset points.
double ld(const LandmarkSeq& gen, const LandmarkSeq& ref, Subset s);
/// Mean Euclidean norm of the velocity difference (p[t+1] - p[t]).
double lvd(const LandmarkSeq& gen, const LandmarkSeq& ref, Subset s);

struct SsimConfig {
  int window = 8;
  int stride = 4;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

/// Mean SSIM over sliding windows, averaged over channels.
double ssim(const Frame& a, const Frame& b, const SsimConfig& cfg = {});

inline constexpr double kPsnrCap = 100.0;
/// 10 log10(1 / MSE) for [0,1] images; kPsnrCap when the frames are identical.
double psnr(const Frame& a, const Frame& b);

/// FID needs an external pretrained network; always reports unavailable.
std::optional<double> fid(const std::vector<Frame>& a, const std::vector<Frame>& b);

struct ClipMetrics {
  std::string id;
  double m_ld = 0, m_lvd = 0, f_ld = 0, f_lvd = 0, ssim = 0, psnr = 0;
};

/// Scores one aligned generated/reference clip pair.
ClipMetrics score_clip(const std::string& id, const std::vector<Frame>& gen_frames, const LandmarkSeq& gen_landmarks,
                       const std::vector<Frame>& ref_frames, const LandmarkSeq& ref_landmarks);

struct Report {
  std::vector<ClipMetrics> clips;
  std::map<std::string, double> extra;  // additional aggregate figures

  ClipMetrics aggregate() const;  // arithmetic mean over clips
  std::string json() const;
};

/// Fraction of positions whose indices differ.
double token_change_rate(const TokenGrid& a, const TokenGrid& b, const std::vector<int>& positions = {});
/// Mean change rate between consecutive grids.
double flip_rate(const std::vector<TokenGrid>& grids);

}  // namespace emotoken::metrics
