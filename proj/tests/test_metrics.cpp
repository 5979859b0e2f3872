#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <vector>

#include "thgen/metrics.hpp"
#include "thgen/rng.hpp"

using namespace thgen;
using namespace thgen::metrics;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<Mat> random_track(Rng& rng, std::size_t frames, std::size_t points) {
  std::vector<Mat> track(frames, Mat(points, 2));
  for (auto& f : track) {
    for (auto& v : f.v) v = rng.uniform(-1.0, 1.0);
  }
  return track;
}

Mat random_image(Rng& rng, std::size_t h, std::size_t w) {
  Mat img(h, w);
  for (auto& v : img.v) v = rng.uniform(0.0, 1.0);
  return img;
}

}  // namespace

TEST_CASE("lmd of identical tracks is zero") {
  Rng rng(3);
  auto track = random_track(rng, 5, 68);
  CHECK(lmd(track, track) == 0.0);
  CHECK(lmd(track, track, false) == 0.0);
}

TEST_CASE("lmd sees a rigid offset as 5 without centroid alignment, 0 with") {
  Rng rng(5);
  auto ref = random_track(rng, 4, 68);
  auto gen = ref;
  for (auto& f : gen) {
    for (std::size_t i = 0; i < f.rows; ++i) {
      f(i, 0) += 3.0;
      f(i, 1) += 4.0;
    }
  }
  CHECK(lmd(gen, ref, false) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(lmd(gen, ref, true) < 1e-12);
}

TEST_CASE("lmd on the 68-point topology only scores the mouth") {
  Rng rng(7);
  auto ref = random_track(rng, 3, 68);
  auto gen = ref;
  for (auto& f : gen) {
    for (std::size_t i = 0; i < 48; ++i) {
      f(i, 0) += 10.0;  // distort everything except the mouth region
      f(i, 1) -= 10.0;
    }
  }
  CHECK(lmd(gen, ref, false) == 0.0);

  // On other landmark counts every point participates.
  auto small_ref = random_track(rng, 3, 10);
  auto small_gen = small_ref;
  for (auto& f : small_gen) f(0, 0) += 1.0;
  CHECK(lmd(small_gen, small_ref, false) > 0.0);
}

TEST_CASE("lmd validates lengths") {
  Rng rng(9);
  auto a = random_track(rng, 3, 68);
  auto b = random_track(rng, 4, 68);
  CHECK_THROWS_AS(lmd(a, b), std::invalid_argument);
  CHECK_THROWS_AS(lmd({}, {}), std::invalid_argument);
}

TEST_CASE("rd basics and wrapping") {
  std::vector<geom::Pose> zeros(4), quarter(4);
  for (auto& p : quarter) p.theta = kPi / 2;
  CHECK(rd(zeros, zeros) == 0.0);
  CHECK(rd(quarter, zeros) == doctest::Approx(kPi / 2).epsilon(1e-12));

  std::vector<geom::Pose> a(1), b(1);
  a[0].theta = 3.1;
  b[0].theta = -3.1;
  CHECK(rd(a, b) == doctest::Approx(2.0 * kPi - 6.2).epsilon(1e-9));

  std::vector<geom::Pose> longer(2);
  CHECK_THROWS_AS(rd(a, longer), std::invalid_argument);
}

TEST_CASE("psnr closed forms") {
  Rng rng(11);
  Mat img = random_image(rng, 16, 16);
  CHECK(psnr(img, img) == 100.0);

  Mat shifted = img;
  for (auto& v : shifted.v) v += 0.1;
  CHECK(psnr(shifted, img) == doctest::Approx(20.0).epsilon(1e-9));

  Mat zeros(8, 8, 0.0), ones(8, 8, 1.0);
  CHECK(psnr(zeros, ones) == doctest::Approx(0.0).epsilon(1e-12));

  Mat other(8, 9);
  CHECK_THROWS_AS(psnr(zeros, other), std::invalid_argument);
}

namespace {

// Independent SSIM evaluation, written directly from the formula with naive
// per-window loops and no shared code with the library.
double ssim_oracle(const Mat& a, const Mat& b) {
  const double c1 = 1e-4, c2 = 9e-4;
  std::vector<double> w(121);
  double wsum = 0;
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) {
      w[i * 11 + j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
      wsum += w[i * 11 + j];
    }
  }
  for (auto& x : w) x /= wsum;

  double total = 0;
  int count = 0;
  for (std::size_t r = 0; r + 11 <= a.rows; ++r) {
    for (std::size_t c = 0; c + 11 <= a.cols; ++c) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 11; ++j) {
          ma += w[i * 11 + j] * a(r + i, c + j);
          mb += w[i * 11 + j] * b(r + i, c + j);
        }
      }
      double va = 0, vb = 0, cab = 0;
      for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 11; ++j) {
          const double da = a(r + i, c + j) - ma, db = b(r + i, c + j) - mb;
          va += w[i * 11 + j] * da * da;
          vb += w[i * 11 + j] * db * db;
          cab += w[i * 11 + j] * da * db;
        }
      }
      total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

TEST_CASE("ssim is 1 for identical images and matches a direct oracle") {
  Rng rng(13);
  Mat a = random_image(rng, 20, 24);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  Mat b = random_image(rng, 20, 24);
  CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-9));
}

TEST_CASE("ssim of a checkerboard against its inverse is negative") {
  Mat board(16, 16);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 16; ++c) board(r, c) = static_cast<double>((r + c) % 2);
  }
  Mat inverse = board;
  for (auto& v : inverse.v) v = 1.0 - v;

  const double s = ssim(board, inverse);
  CHECK(s < 0.0);
  CHECK(s == doctest::Approx(ssim_oracle(board, inverse)).epsilon(1e-9));
}

TEST_CASE("ssim symmetry and size guard") {
  Rng rng(17);
  Mat a = random_image(rng, 15, 13);
  Mat b = random_image(rng, 15, 13);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

  Mat tiny = random_image(rng, 10, 12);
  CHECK_THROWS_AS(ssim(tiny, tiny), std::invalid_argument);
}

TEST_CASE("eer of separated scores is zero under either polarity") {
  std::vector<ScoredTrial> trials = {
      {0.9, true}, {0.8, true}, {0.2, false}, {0.1, false}};
  CHECK(eer(trials) == 0.0);

  for (auto& t : trials) t.score = -t.score;  // distance-like scores
  CHECK(eer(trials) == 0.0);
}

TEST_CASE("eer of the four-score crossing case is 0.25") {
  const std::vector<ScoredTrial> trials = {
      {0.8, true}, {0.4, true}, {0.6, false}, {0.2, false}};
  CHECK(eer(trials) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("eer of label-independent scores is one half") {
  Rng rng(19);
  std::vector<ScoredTrial> trials(10000);
  for (auto& t : trials) {
    t.score = rng.uniform(0.0, 1.0);
    t.is_same = rng.uniform(0.0, 1.0) < 0.5;
  }
  CHECK(std::fabs(eer(trials) - 0.5) <= 0.02);
}

TEST_CASE("eer stays within [0, 0.5] and rejects bad input") {
  Rng rng(23);
  for (int round = 0; round < 30; ++round) {
    std::vector<ScoredTrial> trials(50);
    bool has_pos = false, has_neg = false;
    for (auto& t : trials) {
      t.score = rng.uniform(-2.0, 2.0);
      t.is_same = rng.uniform(0.0, 1.0) < 0.4;
      (t.is_same ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    const double e = eer(trials);
    CHECK(e >= 0.0);
    CHECK(e <= 0.5 + 1e-12);
  }

  CHECK_THROWS_AS(eer({}), std::invalid_argument);
  CHECK_THROWS_AS(eer({{0.5, true}, {0.6, true}}), std::invalid_argument);
  CHECK_THROWS_AS(eer({{0.5, true}, {std::nan(""), false}}), std::invalid_argument);
}
