#include "geoformer/grid_labeling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "geoformer/errors.hpp"

namespace geoformer::grid {

double polygon_area(const std::vector<Point>& ring) {
  double s = 0.0;
  const size_t n = ring.size();
  for (size_t i = 0; i < n; ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return 0.5 * s;
}

namespace {

bool segments_properly_intersect(const Point& p1, const Point& p2, const Point& q1,
                                 const Point& q2) {
  auto cross = [](const Point& o, const Point& a, const Point& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  const double d1 = cross(q1, q2, p1);
  const double d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1);
  const double d4 = cross(p1, p2, q2);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
         ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

bool is_simple_polygon(const std::vector<Point>& ring) {
  const size_t n = ring.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      // skip adjacent edges (shared vertex)
      if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
      if (segments_properly_intersect(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]))
        return false;
    }
  }
  return true;
}

std::vector<Point> clip_to_box(const std::vector<Point>& ring, double xmin, double ymin,
                               double xmax, double ymax) {
  // four half-plane passes: inside(p) and segment-boundary intersection
  using Inside = bool (*)(const Point&, double);
  using Cross = Point (*)(const Point&, const Point&, double);

  auto clip_pass = [](const std::vector<Point>& in, Inside inside, Cross cross, double bound) {
    std::vector<Point> out;
    const size_t n = in.size();
    for (size_t i = 0; i < n; ++i) {
      const Point& cur = in[i];
      const Point& prev = in[(i + n - 1) % n];
      const bool cur_in = inside(cur, bound);
      const bool prev_in = inside(prev, bound);
      if (cur_in) {
        if (!prev_in) out.push_back(cross(prev, cur, bound));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(cross(prev, cur, bound));
      }
    }
    return out;
  };

  std::vector<Point> poly = ring;
  poly = clip_pass(
      poly, [](const Point& p, double b) { return p.x >= b; },
      [](const Point& a, const Point& b, double bd) {
        const double t = (bd - a.x) / (b.x - a.x);
        return Point{bd, a.y + t * (b.y - a.y)};
      },
      xmin);
  if (poly.empty()) return poly;
  poly = clip_pass(
      poly, [](const Point& p, double b) { return p.x <= b; },
      [](const Point& a, const Point& b, double bd) {
        const double t = (bd - a.x) / (b.x - a.x);
        return Point{bd, a.y + t * (b.y - a.y)};
      },
      xmax);
  if (poly.empty()) return poly;
  poly = clip_pass(
      poly, [](const Point& p, double b) { return p.y >= b; },
      [](const Point& a, const Point& b, double bd) {
        const double t = (bd - a.y) / (b.y - a.y);
        return Point{a.x + t * (b.x - a.x), bd};
      },
      ymin);
  if (poly.empty()) return poly;
  poly = clip_pass(
      poly, [](const Point& p, double b) { return p.y <= b; },
      [](const Point& a, const Point& b, double bd) {
        const double t = (bd - a.y) / (b.y - a.y);
        return Point{a.x + t * (b.x - a.x), bd};
      },
      ymax);
  return poly;
}

LabelGrid aggregate(const std::vector<BuildingPolygon>& polygons, const FishnetGrid& grid) {
  if (grid.cell <= 0.0 || grid.rows < 1 || grid.cols < 1)
    throw usage_error("aggregate: invalid fishnet grid");
  const double cell_area = grid.cell * grid.cell;

  LabelGrid out;
  out.rows = grid.rows;
  out.cols = grid.cols;
  out.cells.resize(grid.rows * grid.cols);
  for (size_t r = 0; r < grid.rows; ++r)
    for (size_t c = 0; c < grid.cols; ++c) {
      out.at(r, c).row = r;
      out.at(r, c).col = c;
    }
  std::vector<double> h_num(out.cells.size(), 0.0);
  std::vector<double> h_den(out.cells.size(), 0.0);

  for (size_t pi = 0; pi < polygons.size(); ++pi) {
    const BuildingPolygon& b = polygons[pi];
    if (b.ring.size() < 3 || std::abs(polygon_area(b.ring)) <= 0.0)
      throw data_error("polygon " + std::to_string(pi) + " is degenerate (area <= 0)");
    if (!is_simple_polygon(b.ring))
      throw data_error("polygon " + std::to_string(pi) + " is self-intersecting");
    if (!std::isnan(b.height) && b.height <= 0.0)
      throw data_error("polygon " + std::to_string(pi) + " has non-positive height");

    double bx0 = std::numeric_limits<double>::infinity(), by0 = bx0;
    double bx1 = -bx0, by1 = -by0;
    for (const Point& p : b.ring) {
      bx0 = std::min(bx0, p.x);
      bx1 = std::max(bx1, p.x);
      by0 = std::min(by0, p.y);
      by1 = std::max(by1, p.y);
    }
    const long c0 = std::max(0L, (long)std::floor((bx0 - grid.x0) / grid.cell));
    const long c1 = std::min((long)grid.cols - 1, (long)std::floor((bx1 - grid.x0) / grid.cell));
    const long r0 = std::max(0L, (long)std::floor((by0 - grid.y0) / grid.cell));
    const long r1 = std::min((long)grid.rows - 1, (long)std::floor((by1 - grid.y0) / grid.cell));

    for (long r = r0; r <= r1; ++r)
      for (long c = c0; c <= c1; ++c) {
        const double xmin = grid.x0 + c * grid.cell;
        const double ymin = grid.y0 + r * grid.cell;
        const auto clipped = clip_to_box(b.ring, xmin, ymin, xmin + grid.cell, ymin + grid.cell);
        if (clipped.size() < 3) continue;
        const double area = std::abs(polygon_area(clipped));
        if (area <= 0.0) continue;
        CellLabel& cl = out.at((size_t)r, (size_t)c);
        cl.lambda_p += area / cell_area;
        cl.n_buildings += 1;
        if (!std::isnan(b.height)) {
          h_num[(size_t)r * grid.cols + (size_t)c] += area * b.height;
          h_den[(size_t)r * grid.cols + (size_t)c] += area;
        }
      }
  }

  for (size_t i = 0; i < out.cells.size(); ++i)
    out.cells[i].h_ave =
        h_den[i] > 0.0 ? h_num[i] / h_den[i] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

FilterReason filter_cell(double h_ave, double lambda_p) {
  if (!(h_ave >= 2.0 && h_ave <= 500.0)) return FilterReason::height_range;
  if (!(lambda_p > 0.01)) return FilterReason::min_footprint;
  if (lambda_p < 0.04 && h_ave >= 20.0) return FilterReason::sliver;
  return FilterReason::kept;
}

FilterOutcome filter_samples(const LabelGrid& labels) {
  FilterOutcome out;
  for (const CellLabel& cl : labels.cells) {
    if (cl.n_buildings == 0) continue;  // empty cells are not samples
    const FilterReason r = filter_cell(cl.h_ave, cl.lambda_p);
    if (r == FilterReason::kept)
      out.kept.push_back(cl);
    else
      out.rejected.emplace_back(cl, r);
  }
  return out;
}

std::vector<BuildingPolygon> read_footprints_ndjson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open footprint file: " + path);
  std::vector<BuildingPolygon> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error(path + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    }
    BuildingPolygon b;
    for (const auto& pt : j.at("footprint")) {
      if (!pt.is_array() || pt.size() != 2)
        throw data_error(path + ":" + std::to_string(lineno) + ": footprint points must be [x,y]");
      b.ring.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    if (j.contains("height") && !j["height"].is_null())
      b.height = j["height"].get<double>();
    else
      b.height = std::numeric_limits<double>::quiet_NaN();
    out.push_back(std::move(b));
  }
  return out;
}

void write_footprints_ndjson(const std::string& path,
                             const std::vector<BuildingPolygon>& polygons) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot open for writing: " + path);
  for (const BuildingPolygon& b : polygons) {
    nlohmann::json j;
    j["footprint"] = nlohmann::json::array();
    for (const Point& p : b.ring) j["footprint"].push_back({p.x, p.y});
    if (std::isnan(b.height))
      j["height"] = nullptr;
    else
      j["height"] = b.height;
    out << j.dump() << '\n';
  }
}

}  // namespace geoformer::grid
