#include "thgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace thgen::metrics {

namespace {

constexpr std::size_t kMouthBegin = 48;
constexpr std::size_t kMouthEnd = 68;  // exclusive

struct Region {
  std::size_t begin, end;
};

Region metric_region(std::size_t n_points) {
  if (n_points == kMouthEnd) return {kMouthBegin, kMouthEnd};
  return {0, n_points};
}

}  // namespace

double lmd(const std::vector<Mat>& gen, const std::vector<Mat>& ref, bool centroid_align) {
  require(gen.size() == ref.size(), "lmd: track lengths differ (" + std::to_string(gen.size()) +
                                        " vs " + std::to_string(ref.size()) + ")");
  require(!gen.empty(), "lmd: empty tracks");

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < gen.size(); ++t) {
    const Mat& g = gen[t];
    const Mat& r = ref[t];
    require(g.cols == 2 && r.cols == 2, "lmd: frames must be L x 2");
    require(g.rows == r.rows, "lmd: landmark counts differ at frame " + std::to_string(t));
    const Region reg = metric_region(g.rows);
    const std::size_t n = reg.end - reg.begin;

    double gcx = 0.0, gcy = 0.0, rcx = 0.0, rcy = 0.0;
    if (centroid_align) {
      for (std::size_t i = reg.begin; i < reg.end; ++i) {
        gcx += g(i, 0);
        gcy += g(i, 1);
        rcx += r(i, 0);
        rcy += r(i, 1);
      }
      gcx /= static_cast<double>(n);
      gcy /= static_cast<double>(n);
      rcx /= static_cast<double>(n);
      rcy /= static_cast<double>(n);
    }
    for (std::size_t i = reg.begin; i < reg.end; ++i) {
      const double dx = (g(i, 0) - gcx) - (r(i, 0) - rcx);
      const double dy = (g(i, 1) - gcy) - (r(i, 1) - rcy);
      total += std::sqrt(dx * dx + dy * dy);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double rd(const std::vector<geom::Pose>& gen, const std::vector<geom::Pose>& ref) {
  require(gen.size() == ref.size(), "rd: track lengths differ (" + std::to_string(gen.size()) +
                                        " vs " + std::to_string(ref.size()) + ")");
  require(!gen.empty(), "rd: empty tracks");
  double total = 0.0;
  for (std::size_t t = 0; t < gen.size(); ++t) {
    total += std::fabs(geom::wrap_angle(gen[t].theta - ref[t].theta));
  }
  return total / static_cast<double>(gen.size());
}

double psnr(const Mat& a, const Mat& b) {
  require(a.same_shape(b), "psnr: image dimensions differ");
  require(!a.empty(), "psnr: empty images");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse <= 0.0) return 100.0;
  return std::min(10.0 * std::log10(1.0 / mse), 100.0);
}

double ssim(const Mat& a, const Mat& b) {
  require(a.same_shape(b), "ssim: image dimensions differ");
  constexpr std::size_t kWin = 11;
  require(a.rows >= kWin && a.cols >= kWin,
          "ssim: image smaller than the 11x11 window (" + std::to_string(a.rows) + " x " +
              std::to_string(a.cols) + ")");

  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;

  double w[kWin][kWin];
  double wsum = 0.0;
  for (std::size_t i = 0; i < kWin; ++i) {
    for (std::size_t j = 0; j < kWin; ++j) {
      const double di = static_cast<double>(i) - 5.0, dj = static_cast<double>(j) - 5.0;
      w[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
      wsum += w[i][j];
    }
  }
  for (auto& row : w) {
    for (double& x : row) x /= wsum;
  }

  double acc = 0.0;
  std::size_t windows = 0;
  for (std::size_t r = 0; r + kWin <= a.rows; ++r) {
    for (std::size_t c = 0; c + kWin <= a.cols; ++c) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < kWin; ++i) {
        for (std::size_t j = 0; j < kWin; ++j) {
          const double av = a(r + i, c + j), bv = b(r + i, c + j);
          const double wij = w[i][j];
          ma += wij * av;
          mb += wij * bv;
          saa += wij * av * av;
          sbb += wij * bv * bv;
          sab += wij * av * bv;
        }
      }
      const double va = saa - ma * ma;
      const double vb = sbb - mb * mb;
      const double cov = sab - ma * mb;
      acc += ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
             ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
      ++windows;
    }
  }
  return acc / static_cast<double>(windows);
}

namespace {

struct RocPoint {
  double fp, tp;
};

double cross_z(const RocPoint& o, const RocPoint& a, const RocPoint& b) {
  return (a.fp - o.fp) * (b.tp - o.tp) - (a.tp - o.tp) * (b.fp - o.fp);
}

// EER for the fixed polarity "higher score means same speaker".
double eer_one_polarity(const std::vector<ScoredTrial>& trials, std::size_t n_pos,
                        std::size_t n_neg) {
  // Stepwise ROC, ties grouped: accumulate (fp, tp) from the most permissive
  // threshold down.
  std::map<double, std::pair<std::size_t, std::size_t>> by_score;  // score -> (pos, neg)
  for (const auto& t : trials) {
    auto& e = by_score[t.score];
    if (t.is_same) {
      ++e.first;
    } else {
      ++e.second;
    }
  }

  std::vector<RocPoint> pts;
  pts.reserve(by_score.size() + 1);
  pts.push_back({0.0, 0.0});
  double fp = 0.0, tp = 0.0;
  for (auto it = by_score.rbegin(); it != by_score.rend(); ++it) {
    tp += static_cast<double>(it->second.first);
    fp += static_cast<double>(it->second.second);
    pts.push_back({fp, tp});
  }

  // Upper convex hull from (0,0) to (n_neg, n_pos).
  std::vector<RocPoint> hull;
  for (const auto& p : pts) {
    while (hull.size() >= 2 && cross_z(hull[hull.size() - 2], hull.back(), p) >= 0.0) {
      hull.pop_back();
    }
    hull.push_back(p);
  }

  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  // far - frr goes from -1 at (0,0) to +1 at the end; find the sign change.
  auto miss = [&](const RocPoint& p) { return p.fp / nn - (1.0 - p.tp / np); };
  for (std::size_t i = 0; i + 1 < hull.size(); ++i) {
    const double f0 = miss(hull[i]), f1 = miss(hull[i + 1]);
    if (f0 <= 0.0 && f1 >= 0.0) {
      if (f1 == f0) return hull[i].fp / nn;
      const double lambda = -f0 / (f1 - f0);
      return (hull[i].fp + lambda * (hull[i + 1].fp - hull[i].fp)) / nn;
    }
  }
  return 0.5;  // unreachable for well-formed input
}

}  // namespace

double eer(const std::vector<ScoredTrial>& trials) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& t : trials) {
    require(std::isfinite(t.score), "eer: non-finite trial score");
    if (t.is_same) {
      ++n_pos;
    } else {
      ++n_neg;
    }
  }
  require(n_pos >= 1 && n_neg >= 1, "eer: need at least one same and one different trial");

  std::vector<ScoredTrial> flipped(trials);
  for (auto& t : flipped) t.score = -t.score;
  return std::min(eer_one_polarity(trials, n_pos, n_neg),
                  eer_one_polarity(flipped, n_pos, n_neg));
}

}  // namespace thgen::metrics
