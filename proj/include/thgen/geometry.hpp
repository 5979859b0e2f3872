#pragma once

#include <vector>

#include "thgen/mat.hpp"

namespace thgen::geom {

// Rigid pose mapping template coordinates into frame coordinates:
// frame = R(theta) * aligned + t.
struct Pose {
  double theta = 0.0;  // radians, in (-pi, pi]
  double tx = 0.0;
  double ty = 0.0;
};

struct AlignedDecomposition {
  Mat p_align;  // L x 2
  Pose pose;
};

// [[cos, -sin], [sin, cos]]; orthogonal with det +1.
Mat rotation_matrix(double theta);

// Wraps an angle into (-pi, pi].
double wrap_angle(double theta);

// Least-squares rigid registration (rotation + translation, no scale, no
// reflection) of `frame` onto `tpl`; p_align = R(-theta) * (frame - t).
AlignedDecomposition align(const Mat& frame, const Mat& tpl);

// Exact inverse of the map inside align(): R(theta) * p_align + t.
Mat reconstruct(const Mat& p_align, const Pose& pose);

// Mean aligned face by generalized Procrustes analysis, re-centered at the
// origin after every averaging step.
Mat mean_template(const std::vector<Mat>& frames, int iterations = 5);

}  // namespace thgen::geom
