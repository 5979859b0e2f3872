#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <vector>

#include "thgen/geometry.hpp"
#include "thgen/rng.hpp"

using namespace thgen;
using namespace thgen::geom;

namespace {

constexpr double kPi = std::numbers::pi;

Mat random_face(Rng& rng, std::size_t n = 8) {
  Mat f(n, 2);
  for (auto& v : f.v) v = rng.uniform(-1.0, 1.0);
  return f;
}

Mat apply_rigid(const Mat& f, double theta, double tx, double ty) {
  Pose p{theta, tx, ty};
  return reconstruct(f, p);
}

double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace

TEST_CASE("rotation matrix basics") {
  Mat eye = rotation_matrix(0.0);
  CHECK(eye(0, 0) == 1.0);
  CHECK(eye(0, 1) == 0.0);
  CHECK(eye(1, 0) == 0.0);
  CHECK(eye(1, 1) == 1.0);

  Mat quarter = rotation_matrix(kPi / 2);
  CHECK(quarter(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(quarter(0, 1) == doctest::Approx(-1.0));
  CHECK(quarter(1, 0) == doctest::Approx(1.0));
  CHECK(quarter(1, 1) == doctest::Approx(0.0).epsilon(1e-15));

  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const double a = rng.uniform(-3.0, 3.0), b = rng.uniform(-3.0, 3.0);
    Mat ra = rotation_matrix(a), rb = rotation_matrix(b), rab = rotation_matrix(a + b);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        double prod = ra(r, 0) * rb(0, c) + ra(r, 1) * rb(1, c);
        CHECK(std::fabs(prod - rab(r, c)) < 1e-12);
      }
    }
    CHECK(std::fabs(ra(0, 0) * ra(1, 1) - ra(0, 1) * ra(1, 0) - 1.0) < 1e-15);
  }
}

TEST_CASE("wrap_angle lands in (-pi, pi]") {
  CHECK(wrap_angle(kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(-kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(3 * kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(2 * kPi) == doctest::Approx(0.0).epsilon(1e-12));
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const double w = wrap_angle(rng.uniform(-50.0, 50.0));
    CHECK(w > -kPi);
    CHECK(w <= kPi);
  }
}

TEST_CASE("aligning a frame to itself is the identity") {
  Rng rng(7);
  Mat tpl = random_face(rng);
  auto d = align(tpl, tpl);
  CHECK(std::fabs(d.pose.theta) < 1e-12);
  CHECK(std::fabs(d.pose.tx) < 1e-12);
  CHECK(std::fabs(d.pose.ty) < 1e-12);
  CHECK(max_abs_diff(d.p_align, tpl) < 1e-12);
}

TEST_CASE("align recovers a known rigid motion") {
  Rng rng(11);
  Mat tpl = random_face(rng);
  Mat frame = apply_rigid(tpl, kPi / 2, 1.0, 2.0);
  auto d = align(frame, tpl);
  CHECK(d.pose.theta == doctest::Approx(kPi / 2).epsilon(1e-9));
  CHECK(d.pose.tx == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(d.pose.ty == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(max_abs_diff(d.p_align, tpl) < 1e-9);
}

TEST_CASE("alignment residual is invariant to extra rigid motions") {
  Rng rng(13);
  Mat tpl = random_face(rng);
  Mat frame = random_face(rng);
  const Mat base = align(frame, tpl).p_align;

  for (int i = 0; i < 20; ++i) {
    Mat moved = apply_rigid(frame, rng.uniform(-kPi, kPi), rng.uniform(-5.0, 5.0),
                            rng.uniform(-5.0, 5.0));
    const Mat again = align(moved, tpl).p_align;
    CHECK(max_abs_diff(again, base) < 1e-9);
  }
}

TEST_CASE("reconstruct with the identity pose is a no-op") {
  Rng rng(17);
  Mat f = random_face(rng);
  Mat r = reconstruct(f, Pose{});
  CHECK(max_abs_diff(r, f) == 0.0);
}

TEST_CASE("align/reconstruct round-trip on 100 random frames") {
  Rng rng(19);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Mat tpl = random_face(rng, 6 + rng.uniform_int(10));
    Mat frame(tpl.rows, 2);
    for (auto& v : frame.v) v = rng.uniform(-4.0, 4.0);
    auto d = align(frame, tpl);
    Mat back = reconstruct(d.p_align, d.pose);
    worst = std::max(worst, max_abs_diff(back, frame));
    CHECK(d.pose.theta > -kPi);
    CHECK(d.pose.theta <= kPi);
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("alignment never reflects") {
  Rng rng(23);
  Mat tpl = random_face(rng);
  Mat mirrored = tpl;
  for (std::size_t i = 0; i < mirrored.rows; ++i) mirrored(i, 0) = -mirrored(i, 0);
  auto d = align(mirrored, tpl);
  Mat r = rotation_matrix(d.pose.theta);
  CHECK(r(0, 0) * r(1, 1) - r(0, 1) * r(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("align validates its inputs") {
  Mat ok(4, 2);
  ok.v = {0, 0, 1, 0, 1, 1, 0, 1};
  Mat short_frame(3, 2);
  CHECK_THROWS_AS(align(short_frame, ok), std::invalid_argument);

  Mat degenerate(4, 2, 2.5);  // all points coincident
  CHECK_THROWS_AS(align(ok, degenerate), std::invalid_argument);

  Mat one_point(1, 2);
  CHECK_THROWS_AS(align(one_point, one_point), std::invalid_argument);

  Mat wrong_width(4, 3);
  CHECK_THROWS_AS(align(wrong_width, ok), std::invalid_argument);
}

TEST_CASE("mean template of a rigid-motion family recovers one face shape") {
  Rng rng(29);
  Mat base = random_face(rng, 10);
  // Center the base so shapes are comparable after alignment.
  double cx = 0, cy = 0;
  for (std::size_t i = 0; i < base.rows; ++i) {
    cx += base(i, 0) / base.rows;
    cy += base(i, 1) / base.rows;
  }
  for (std::size_t i = 0; i < base.rows; ++i) {
    base(i, 0) -= cx;
    base(i, 1) -= cy;
  }

  std::vector<Mat> family;
  for (int i = 0; i < 12; ++i) {
    family.push_back(
        apply_rigid(base, rng.uniform(-2.0, 2.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)));
  }
  Mat tpl = mean_template(family);

  double tx = 0, ty = 0;
  for (std::size_t i = 0; i < tpl.rows; ++i) {
    tx += tpl(i, 0);
    ty += tpl(i, 1);
  }
  CHECK(std::fabs(tx) < 1e-9);
  CHECK(std::fabs(ty) < 1e-9);

  // The template equals the base up to a global rotation.
  auto d = align(tpl, base);
  CHECK(max_abs_diff(d.p_align, base) < 1e-9);

  // Every family member aligns onto the template exactly.
  for (const Mat& f : family) {
    auto a = align(f, tpl);
    Mat back = reconstruct(a.p_align, a.pose);
    CHECK(max_abs_diff(back, f) < 1e-9);
    CHECK(max_abs_diff(a.p_align, mean_template(family)) < 1e-8);
  }
}
