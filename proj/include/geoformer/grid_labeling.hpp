#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace geoformer::grid {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Simple closed polygon in projected metres. Height is NaN when unknown;
/// such buildings count toward lambda_p but not h_ave.
struct BuildingPolygon {
  std::vector<Point> ring;  // open ring (last vertex != first)
  double height = 0.0;
};

/// Regular fishnet. Cell (row, col) covers
/// [x0 + col*cell, x0 + (col+1)*cell) x [y0 + row*cell, y0 + (row+1)*cell);
/// rows increase northward.
struct FishnetGrid {
  double x0 = 0.0;
  double y0 = 0.0;
  double cell = 100.0;
  size_t rows = 0;
  size_t cols = 0;
};

struct CellLabel {
  size_t row = 0;
  size_t col = 0;
  double lambda_p = 0.0;
  double h_ave = 0.0;  // NaN when no building with known height intersects
  size_t n_buildings = 0;
};

struct LabelGrid {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<CellLabel> cells;  // row-major, rows*cols

  CellLabel& at(size_t r, size_t c) { return cells[r * cols + c]; }
  const CellLabel& at(size_t r, size_t c) const { return cells[r * cols + c]; }
};

double polygon_area(const std::vector<Point>& ring);  // signed shoelace / 2
bool is_simple_polygon(const std::vector<Point>& ring);

/// Sutherland-Hodgman clip of a polygon against the axis-aligned box
/// [xmin,xmax] x [ymin,ymax]. Returns the clipped ring (possibly empty).
std::vector<Point> clip_to_box(const std::vector<Point>& ring, double xmin, double ymin,
                               double xmax, double ymax);

/// Eq.-style fishnet aggregation: per cell, lambda_p = sum A_i / cell^2 over
/// intersecting buildings, h_ave = area-weighted mean of known heights.
LabelGrid aggregate(const std::vector<BuildingPolygon>& polygons, const FishnetGrid& grid);

enum class FilterReason : int {
  kept = 0,
  height_range = 1,   // h_ave outside [2, 500] (or unknown)
  min_footprint = 2,  // lambda_p <= 0.01
  sliver = 3,         // lambda_p < 0.04 with h_ave >= 20
};

FilterReason filter_cell(double h_ave, double lambda_p);

struct FilterOutcome {
  std::vector<CellLabel> kept;
  std::vector<std::pair<CellLabel, FilterReason>> rejected;
};

FilterOutcome filter_samples(const LabelGrid& labels);

/// NDJSON footprint input: one object per line with fields
///   "footprint": [[x, y], ...]   (projected metres, open ring)
///   "height":    number or null
std::vector<BuildingPolygon> read_footprints_ndjson(const std::string& path);
void write_footprints_ndjson(const std::string& path,
                             const std::vector<BuildingPolygon>& polygons);

}  // namespace geoformer::grid
