#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "dscl/errors.hpp"

namespace dscl {

// Axis-aligned rectangle in normalized image coordinates, origin top-left.
struct PatchBox {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  static PatchBox full() { return {}; }

  double x0() const { return cx - 0.5 * w; }
  double x1() const { return cx + 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  bool inside_unit_square(double tol = 1e-12) const {
    return w > 0.0 && h > 0.0 && x0() >= -tol && y0() >= -tol && x1() <= 1.0 + tol && y1() <= 1.0 + tol;
  }

  friend bool operator==(const PatchBox&, const PatchBox&) = default;
};

// Cells of a rows x cols grid pooled for `box`, row-major. A cell counts when the
// box covers at least half of it. When no cell reaches that, the cell with the
// largest covered fraction is used; a box touching no cell at all is degenerate.
inline std::vector<std::size_t> roi_cells(const PatchBox& box, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> cells;
  double best = 0.0;
  std::size_t best_cell = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double cy0 = static_cast<double>(r) / static_cast<double>(rows);
    const double cy1 = static_cast<double>(r + 1) / static_cast<double>(rows);
    const double oy = std::max(0.0, std::min(cy1, box.y1()) - std::max(cy0, box.y0())) * static_cast<double>(rows);
    for (std::size_t c = 0; c < cols; ++c) {
      const double cx0 = static_cast<double>(c) / static_cast<double>(cols);
      const double cx1 = static_cast<double>(c + 1) / static_cast<double>(cols);
      const double ox =
          std::max(0.0, std::min(cx1, box.x1()) - std::max(cx0, box.x0())) * static_cast<double>(cols);
      const double frac = ox * oy;
      if (frac >= 0.5 - 1e-12) cells.push_back(r * cols + c);
      if (frac > best) {
        best = frac;
        best_cell = r * cols + c;
      }
    }
  }
  if (cells.empty()) {
    if (best <= 0.0) throw DegenerateInputError("ROI box covers no feature-map cell");
    cells.push_back(best_cell);
  }
  return cells;
}

}  // namespace dscl
