// Planar polygon helpers on the (x, z) floor plane.
#pragma once

#include <array>
#include <vector>

#include "cofs/layout.hpp"

namespace cofs {

using Point2 = std::array<double, 2>;
using Polygon = std::vector<Point2>;

// Signed area; positive for counter-clockwise vertex order.
double polygon_area(const Polygon& poly);

// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
Polygon clip_convex(const Polygon& subject, const Polygon& clip);

Polygon footprint_polygon(const BoundingBox& box);
double footprint_overlap_area(const BoundingBox& a, const BoundingBox& b);

// True when every point of the footprint, sampled on a grid no coarser than
// half a raster cell and shrunk by `inset` from the edges, lies on an
// interior pixel.
bool footprint_inside(const BoundingBox& box, const BoundaryRaster& boundary, double inset = 1e-4);

}  // namespace cofs
