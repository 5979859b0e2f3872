#pragma once

#include <vector>

#include "thgen/geometry.hpp"
#include "thgen/mat.hpp"

namespace thgen::metrics {

struct ScoredTrial {
  double score = 0.0;
  bool is_same = false;
};

// Mean Euclidean landmark distance over frames and points. On the 68-point
// topology only the mouth region (points 48-67) is compared; other landmark
// counts use every point. centroid_align removes each frame's region centroid
// before measuring.
double lmd(const std::vector<Mat>& gen, const std::vector<Mat>& ref, bool centroid_align = true);

// Mean absolute wrapped rotation gap |wrap(theta_gen - theta_ref)| in radians.
double rd(const std::vector<geom::Pose>& gen, const std::vector<geom::Pose>& ref);

// 10*log10(1/MSE) against peak 1.0, capped at 100 dB for identical images.
double psnr(const Mat& a, const Mat& b);

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2,
// averaged over fully-interior window positions.
double ssim(const Mat& a, const Mat& b);

// Equal error rate from the ROC convex hull, interpolating between bracketing
// operating points; both score polarities are evaluated and the smaller EER is
// returned, so the caller never worries about similarity sign conventions.
double eer(const std::vector<ScoredTrial>& trials);

}  // namespace thgen::metrics
