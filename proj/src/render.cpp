#include "thgen/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace thgen::render {

namespace {

void chain(std::vector<std::pair<std::size_t, std::size_t>>& edges, std::size_t first,
           std::size_t last, bool closed) {
  for (std::size_t i = first; i < last; ++i) edges.emplace_back(i, i + 1);
  if (closed) edges.emplace_back(last, first);
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> connectivity(std::size_t n_points) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  if (n_points == 68) {
    chain(edges, 0, 16, false);   // jaw
    chain(edges, 17, 21, false);  // right brow
    chain(edges, 22, 26, false);  // left brow
    chain(edges, 27, 30, false);  // nose bridge
    chain(edges, 31, 35, false);  // nose base
    chain(edges, 36, 41, true);   // right eye
    chain(edges, 42, 47, true);   // left eye
    chain(edges, 48, 59, true);   // outer lip
    chain(edges, 60, 67, true);   // inner lip
  } else if (n_points >= 2) {
    chain(edges, 0, n_points - 1, false);
  }
  return edges;
}

Mat rasterize(const Mat& frame, const RenderSpec& spec) {
  require(frame.cols == 2 && frame.rows >= 1, "rasterize: expected L x 2 landmarks");
  require(spec.width >= 8 && spec.height >= 8, "rasterize: canvas too small");

  double min_x = frame(0, 0), max_x = frame(0, 0);
  double min_y = frame(0, 1), max_y = frame(0, 1);
  for (std::size_t i = 1; i < frame.rows; ++i) {
    min_x = std::min(min_x, frame(i, 0));
    max_x = std::max(max_x, frame(i, 0));
    min_y = std::min(min_y, frame(i, 1));
    max_y = std::max(max_y, frame(i, 1));
  }
  const double bw = max_x - min_x, bh = max_y - min_y;
  require(bw > 0.0 || bh > 0.0, "rasterize: degenerate bounding box (all points coincident)");

  const double usable_w =
      static_cast<double>(spec.width - 1) * (1.0 - 2.0 * spec.margin_frac);
  const double usable_h =
      static_cast<double>(spec.height - 1) * (1.0 - 2.0 * spec.margin_frac);
  double scale = 1e300;
  if (bw > 0.0) scale = std::min(scale, usable_w / bw);
  if (bh > 0.0) scale = std::min(scale, usable_h / bh);

  const double off_x = (static_cast<double>(spec.width - 1) - bw * scale) / 2.0;
  const double off_y = (static_cast<double>(spec.height - 1) - bh * scale) / 2.0;

  std::vector<long> px(frame.rows), py(frame.rows);
  for (std::size_t i = 0; i < frame.rows; ++i) {
    px[i] = std::lround(off_x + (frame(i, 0) - min_x) * scale);
    py[i] = std::lround(off_y + (frame(i, 1) - min_y) * scale);
  }

  Mat img(spec.height, spec.width, 0.0);
  auto plot = [&](long x, long y) {
    if (x >= 0 && y >= 0 && x < static_cast<long>(spec.width) &&
        y < static_cast<long>(spec.height)) {
      img(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          std::clamp(spec.stroke, 0.0, 1.0);
    }
  };

  for (const auto& [a, b] : connectivity(frame.rows)) {
    long x0 = px[a], y0 = py[a];
    const long x1 = px[b], y1 = py[b];
    const long dx = std::labs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const long dy = -std::labs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
      plot(x0, y0);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  if (frame.rows == 1) plot(px[0], py[0]);
  return img;
}

void save_pgm(const std::string& path, const Mat& img) {
  require(!img.empty(), "save_pgm: empty image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write PGM file " + path);
  out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
  for (double v : img.v) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out) throw std::runtime_error("failed writing PGM file " + path);
}

Mat load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PGM file " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("not a binary PGM file: " + path);
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w == 0 || h == 0 || maxval != 255) {
    throw std::runtime_error("unsupported PGM header in " + path);
  }
  in.get();  // single whitespace after maxval
  Mat img(h, w);
  for (auto& v : img.v) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("truncated PGM file " + path);
    v = static_cast<double>(c) / 255.0;
  }
  return img;
}

}  // namespace thgen::render
