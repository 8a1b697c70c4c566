// Evaluation: class-histogram KL divergence and geometric layout diagnostics.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "cofs/layout.hpp"

namespace cofs {

inline constexpr double kKlEpsilon = 1e-6;

struct ClassHistogram {
  std::vector<double> probs;
};

// Class frequencies pooled over every object of every layout. An empty set
// gives all zeros.
ClassHistogram class_histogram(std::span<const Layout> layouts, std::size_t num_classes);

// sum_i gt_i * ln((gt_i + eps) / (gen_i + eps)); throws on a size mismatch.
double class_kl(const ClassHistogram& gt, const ClassHistogram& gen, double eps = kKlEpsilon);

struct Diagnostics {
  double overlap_rate = 0.0;          // layouts with a positive-area footprint intersection
  double out_of_boundary_rate = 0.0;  // layouts with a box center off the interior raster
  double mean_objects = 0.0;
};

// Footprint pairs sharing less than this area count as touching, not overlapping.
inline constexpr double kOverlapAreaTolerance = 1e-9;

bool has_overlap(const Layout& layout);
bool has_center_outside(const Layout& layout);
Diagnostics diagnostics(std::span<const Layout> layouts);

// One-line JSON evaluation record.
std::string evaluation_report(std::span<const Layout> generated, std::span<const Layout> reference,
                              const ClassSchema& schema);

}  // namespace cofs
