#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace thgen {

// Plain row-major matrix of doubles for non-learned numerics (fbank frames,
// landmark coordinates, images). Learned quantities live in ad::Tensor.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  std::size_t size() const { return v.size(); }
  bool empty() const { return v.empty(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace thgen
