#include "thgen/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace thgen::geom {

namespace {

void check_landmarks(const Mat& m, const char* what) {
  require(m.cols == 2, std::string(what) + ": expected L x 2 points, got " +
                           std::to_string(m.rows) + " x " + std::to_string(m.cols));
  require(m.rows >= 2, std::string(what) + ": need at least 2 points");
}

struct Centroid {
  double x, y;
};

Centroid centroid_of(const Mat& m) {
  double cx = 0.0, cy = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    cx += m(i, 0);
    cy += m(i, 1);
  }
  const double inv = 1.0 / static_cast<double>(m.rows);
  return {cx * inv, cy * inv};
}

}  // namespace

Mat rotation_matrix(double theta) {
  Mat r(2, 2);
  const double c = std::cos(theta), s = std::sin(theta);
  r(0, 0) = c;
  r(0, 1) = -s;
  r(1, 0) = s;
  r(1, 1) = c;
  return r;
}

double wrap_angle(double theta) {
  double r = std::fmod(theta + std::numbers::pi, 2.0 * std::numbers::pi);
  if (r <= 0.0) r += 2.0 * std::numbers::pi;
  return r - std::numbers::pi;
}

AlignedDecomposition align(const Mat& frame, const Mat& tpl) {
  check_landmarks(frame, "align: frame");
  check_landmarks(tpl, "align: template");
  require(frame.rows == tpl.rows, "align: landmark count mismatch (" + std::to_string(frame.rows) +
                                      " vs " + std::to_string(tpl.rows) + ")");

  const Centroid cf = centroid_of(frame);
  const Centroid ct = centroid_of(tpl);

  // theta solves min over rotations of ||R(theta) * centered_tpl - centered_frame||.
  double dot = 0.0, cross = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < frame.rows; ++i) {
    const double tx = tpl(i, 0) - ct.x, ty = tpl(i, 1) - ct.y;
    const double fx = frame(i, 0) - cf.x, fy = frame(i, 1) - cf.y;
    dot += tx * fx + ty * fy;
    cross += tx * fy - ty * fx;
    spread += tx * tx + ty * ty;
  }
  require(spread > 0.0, "align: degenerate template (all points coincident)");

  AlignedDecomposition out;
  out.pose.theta = wrap_angle(std::atan2(cross, dot));
  const double c = std::cos(out.pose.theta), s = std::sin(out.pose.theta);
  out.pose.tx = cf.x - (c * ct.x - s * ct.y);
  out.pose.ty = cf.y - (s * ct.x + c * ct.y);

  out.p_align = Mat(frame.rows, 2);
  for (std::size_t i = 0; i < frame.rows; ++i) {
    const double x = frame(i, 0) - out.pose.tx;
    const double y = frame(i, 1) - out.pose.ty;
    out.p_align(i, 0) = c * x + s * y;  // R(-theta)
    out.p_align(i, 1) = -s * x + c * y;
  }
  return out;
}

Mat reconstruct(const Mat& p_align, const Pose& pose) {
  require(p_align.cols == 2, "reconstruct: expected L x 2 points");
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  Mat out(p_align.rows, 2);
  for (std::size_t i = 0; i < p_align.rows; ++i) {
    out(i, 0) = c * p_align(i, 0) - s * p_align(i, 1) + pose.tx;
    out(i, 1) = s * p_align(i, 0) + c * p_align(i, 1) + pose.ty;
  }
  return out;
}

Mat mean_template(const std::vector<Mat>& frames, int iterations) {
  require(!frames.empty(), "mean_template: no frames");
  Mat tpl = frames[0];
  check_landmarks(tpl, "mean_template");
  {
    const Centroid c = centroid_of(tpl);
    for (std::size_t i = 0; i < tpl.rows; ++i) {
      tpl(i, 0) -= c.x;
      tpl(i, 1) -= c.y;
    }
  }
  for (int it = 0; it < iterations; ++it) {
    Mat acc(tpl.rows, 2);
    for (const Mat& f : frames) {
      const Mat aligned = align(f, tpl).p_align;
      for (std::size_t i = 0; i < acc.size(); ++i) acc.v[i] += aligned.v[i];
    }
    const double inv = 1.0 / static_cast<double>(frames.size());
    for (auto& v : acc.v) v *= inv;
    const Centroid c = centroid_of(acc);
    for (std::size_t i = 0; i < acc.rows; ++i) {
      acc(i, 0) -= c.x;
      acc(i, 1) -= c.y;
    }
    tpl = acc;
  }
  return tpl;
}

}  // namespace thgen::geom
