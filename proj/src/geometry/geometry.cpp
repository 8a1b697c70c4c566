#include "cofs/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace cofs {

double polygon_area(const Polygon& poly) {
  double a = 0.0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % n];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * a;
}

namespace {

double side(const Point2& a, const Point2& b, const Point2& p) {
  return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
}

Point2 crossing(const Point2& p, const Point2& q, double sp, double sq) {
  const double t = sp / (sp - sq);
  return {p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])};
}

}  // namespace

Polygon clip_convex(const Polygon& subject, const Polygon& clip) {
  Polygon out = subject;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Point2& a = clip[e];
    const Point2& b = clip[(e + 1) % clip.size()];
    Polygon in;
    in.swap(out);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Point2& p = in[i];
      const Point2& q = in[(i + 1) % in.size()];
      const double sp = side(a, b, p), sq = side(a, b, q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) out.push_back(crossing(p, q, sp, sq));
    }
  }
  return out;
}

Polygon footprint_polygon(const BoundingBox& box) {
  const auto f = footprint(box);
  return Polygon(f.begin(), f.end());
}

double footprint_overlap_area(const BoundingBox& a, const BoundingBox& b) {
  const Polygon inter = clip_convex(footprint_polygon(a), footprint_polygon(b));
  return inter.size() < 3 ? 0.0 : std::abs(polygon_area(inter));
}

bool footprint_inside(const BoundingBox& box, const BoundaryRaster& boundary, double inset) {
  const double hx = std::max(0.0, 0.5 * box.e[0] - inset), hz = std::max(0.0, 0.5 * box.e[2] - inset);
  const double c = std::cos(box.r), s = std::sin(box.r);
  const double step = 0.5 * boundary.cell;
  const int nx = 2 + static_cast<int>(2.0 * hx / step), nz = 2 + static_cast<int>(2.0 * hz / step);
  for (int i = 0; i < nx; ++i) {
    const double u = -hx + 2.0 * hx * i / (nx - 1);
    for (int j = 0; j < nz; ++j) {
      const double v = -hz + 2.0 * hz * j / (nz - 1);
      if (!boundary.contains(box.t[0] + c * u - s * v, box.t[2] + s * u + c * v)) return false;
    }
  }
  return true;
}

}  // namespace cofs
