// Synthetic bedroom grammar and top-down SVG rendering.
//
// Every room has exactly one bed with its head against a wall, 0-2
// nightstands beside the head, optionally a wardrobe flush to another wall,
// a table with 2-4 chairs, and a lamp. Boxes never overlap and stay inside
// the rasterized floor plan.
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cofs/layout.hpp"

namespace cofs {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SizeRule {
  Range ex, ey, ez;  // width, height, depth in meters
};

enum GrammarClass : std::size_t { kBed = 0, kNightstand, kWardrobe, kTable, kChair, kLamp, kGrammarClasses };

struct GrammarConfig {
  std::array<std::string, kGrammarClasses> labels = {"bed", "nightstand", "wardrobe", "table", "chair", "lamp"};
  std::array<SizeRule, kGrammarClasses> sizes = {{
      {{1.4, 1.9}, {0.4, 0.6}, {1.9, 2.2}},    // bed
      {{0.4, 0.55}, {0.45, 0.65}, {0.35, 0.5}}, // nightstand
      {{1.0, 1.8}, {1.8, 2.2}, {0.55, 0.65}},   // wardrobe
      {{0.8, 1.3}, {0.7, 0.78}, {0.7, 0.95}},   // table
      {{0.4, 0.5}, {0.8, 1.0}, {0.4, 0.5}},     // chair
      {{0.3, 0.45}, {1.4, 1.8}, {0.3, 0.45}},   // lamp
  }};
  Range room_width{3.2, 4.4};
  Range room_depth{3.2, 4.4};
  double l_shape_prob = 0.3;
  Range l_cut{0.25, 0.4};  // fraction of each side removed by the L notch
  std::array<double, 3> nightstand_probs = {0.15, 0.25, 0.6};  // 0, 1, 2
  double nightstand_gap = 0.05;
  double wardrobe_prob = 0.6;
  double table_prob = 0.35;
  std::size_t chairs_min = 2;
  std::size_t chairs_max = 4;
  double lamp_prob = 0.4;
  double wall_gap = 0.02;
  std::size_t raster_side = 64;
  double cell = 0.1;
  std::size_t max_attempts = 200;
  std::uint64_t seed = 0;

  ClassSchema schema() const;
  void validate() const;
};

// INI-style text with a top-level `seed`, a [room] section, a [rules]
// section, and one section per class holding "lo hi" pairs for ex, ey, ez.
GrammarConfig parse_grammar_config(std::istream& in);
GrammarConfig read_grammar_config_file(const std::string& path);

// Layout `index` of the dataset, drawn from its own seeded stream.
Layout generate_layout(const GrammarConfig& cfg, std::uint64_t index);
std::vector<Layout> generate_dataset(const GrammarConfig& cfg, std::size_t n);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Disjoint, exhaustive split of 0..n-1 in shuffled order.
SplitIndices split_dataset(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed);

// Standalone SVG: boundary outline, one rotated <rect> per box, class labels.
// `schema` may be null; ids are printed then.
std::string render_svg(const Layout& layout, const ClassSchema* schema = nullptr, double pixels_per_meter = 100.0);

}  // namespace cofs
