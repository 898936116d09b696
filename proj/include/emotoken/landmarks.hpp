#pragma once

// 68-point facial landmarks and their text file format.

#include "emotoken/core/types.hpp"

#include <string>
#include <vector>

namespace emotoken {

inline constexpr int kLandmarkCount = 68;
inline constexpr int kMouthFirst = 48;  // mouth subset is 48..67
inline constexpr int kMouthCount = 20;

/// One frame of landmarks: [68, 2] pixel coordinates (x, y).
using Landmarks = Mat<double>;

/// T frames of landmarks.
using LandmarkSeq = std::vector<Landmarks>;

/// Text format: per frame a "frame <t>" header line followed by 68 lines of
/// "x y". Blank lines and lines starting with '#' are ignored.
void write_landmarks(const std::string& path, const LandmarkSeq& seq);
LandmarkSeq read_landmarks(const std::string& path);

}  // namespace emotoken
