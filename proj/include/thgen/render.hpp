#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "thgen/mat.hpp"

namespace thgen::render {

struct RenderSpec {
  std::size_t width = 256;
  std::size_t height = 256;
  double stroke = 1.0;        // pixel value written along polylines
  double margin_frac = 0.10;  // canvas fraction kept clear on each side
};

// Polyline connectivity for a landmark topology: 68 points get the standard
// jaw/brows/nose/eyes/lips groups; anything else is a single open chain.
std::vector<std::pair<std::size_t, std::size_t>> connectivity(std::size_t n_points);

// Min-max fit with margin (translation- and scale-invariant), then Bresenham
// strokes over a black canvas. Values lie in [0, 1].
Mat rasterize(const Mat& frame, const RenderSpec& spec = {});

// Binary 8-bit PGM (P5).
void save_pgm(const std::string& path, const Mat& img);
Mat load_pgm(const std::string& path);

}  // namespace thgen::render
