#include "cofs/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cofs/geometry.hpp"
#include "cofs/rng.hpp"

namespace cofs {

ClassSchema GrammarConfig::schema() const { return ClassSchema{{labels.begin(), labels.end()}}; }

void GrammarConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("grammar config: " + m); };
  auto check_range = [&](const Range& r, const std::string& what) {
    if (!(r.lo > 0.0) || !(r.hi >= r.lo)) fail(what + " must satisfy 0 < lo <= hi");
  };
  for (std::size_t c = 0; c < kGrammarClasses; ++c) {
    check_range(sizes[c].ex, labels[c] + ".ex");
    check_range(sizes[c].ey, labels[c] + ".ey");
    check_range(sizes[c].ez, labels[c] + ".ez");
  }
  check_range(room_width, "room.width");
  check_range(room_depth, "room.depth");
  if (!(l_cut.lo > 0.0) || !(l_cut.hi >= l_cut.lo) || !(l_cut.hi < 0.5)) fail("room.l_cut must lie in (0, 0.5)");
  for (double p : {l_shape_prob, wardrobe_prob, table_prob, lamp_prob})
    if (!(p >= 0.0 && p <= 1.0)) fail("probabilities must lie in [0, 1]");
  double s = 0.0;
  for (double p : nightstand_probs) {
    if (!(p >= 0.0)) fail("nightstand_probs must be nonnegative");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) fail("nightstand_probs must sum to 1");
  if (chairs_min < 1 || chairs_max > 4 || chairs_min > chairs_max) fail("chairs must satisfy 1 <= min <= max <= 4");
  if (!(cell > 0.0) || raster_side < 16 || raster_side % 2 != 0) fail("raster must be an even side >= 16");
  if (max_attempts == 0) fail("max_attempts must be positive");
  // Rooms must fit the raster under any rotation about their center.
  const double half_diag = 0.5 * std::hypot(room_width.hi + cell, room_depth.hi + cell);
  if (half_diag > 0.5 * static_cast<double>(raster_side) * cell) fail("largest room does not fit the raster under rotation");
}

namespace {

Range parse_range(const std::string& text, const std::string& key) {
  std::istringstream ss(text);
  Range r;
  std::string rest;
  if (!(ss >> r.lo >> r.hi) || (ss >> rest)) throw std::invalid_argument("grammar config: '" + key + "' needs 'lo hi'");
  return r;
}

template <typename T>
T get(const boost::property_tree::ptree& node, const std::string& key) {
  try {
    return node.get_value<T>();
  } catch (const boost::property_tree::ptree_bad_data&) {
    throw std::invalid_argument("grammar config: bad value for '" + key + "'");
  }
}

}  // namespace

GrammarConfig parse_grammar_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("grammar config: ") + e.what());
  }
  GrammarConfig c;
  for (const auto& [section, node] : tree) {
    if (node.empty()) {
      if (section == "seed") c.seed = get<std::uint64_t>(node, section);
      else throw std::invalid_argument("grammar config: unknown key '" + section + "'");
      continue;
    }
    if (section == "room") {
      for (const auto& [key, v] : node) {
        const std::string full = "room." + key;
        if (key == "width") c.room_width = parse_range(v.data(), full);
        else if (key == "depth") c.room_depth = parse_range(v.data(), full);
        else if (key == "l_shape_prob") c.l_shape_prob = get<double>(v, full);
        else if (key == "l_cut") c.l_cut = parse_range(v.data(), full);
        else if (key == "raster_side") c.raster_side = get<std::size_t>(v, full);
        else if (key == "cell") c.cell = get<double>(v, full);
        else throw std::invalid_argument("grammar config: unknown key '" + full + "'");
      }
    } else if (section == "rules") {
      for (const auto& [key, v] : node) {
        const std::string full = "rules." + key;
        if (key == "nightstand_probs") {
          std::istringstream ss(v.data());
          for (double& p : c.nightstand_probs)
            if (!(ss >> p)) throw std::invalid_argument("grammar config: '" + full + "' needs three numbers");
        } else if (key == "nightstand_gap") c.nightstand_gap = get<double>(v, full);
        else if (key == "wardrobe_prob") c.wardrobe_prob = get<double>(v, full);
        else if (key == "table_prob") c.table_prob = get<double>(v, full);
        else if (key == "chairs_min") c.chairs_min = get<std::size_t>(v, full);
        else if (key == "chairs_max") c.chairs_max = get<std::size_t>(v, full);
        else if (key == "lamp_prob") c.lamp_prob = get<double>(v, full);
        else if (key == "wall_gap") c.wall_gap = get<double>(v, full);
        else if (key == "max_attempts") c.max_attempts = get<std::size_t>(v, full);
        else throw std::invalid_argument("grammar config: unknown key '" + full + "'");
      }
    } else {
      auto it = std::find(c.labels.begin(), c.labels.end(), section);
      if (it == c.labels.end()) throw std::invalid_argument("grammar config: unknown section [" + section + "]");
      SizeRule& rule = c.sizes[static_cast<std::size_t>(it - c.labels.begin())];
      for (const auto& [key, v] : node) {
        const std::string full = section + "." + key;
        if (key == "ex") rule.ex = parse_range(v.data(), full);
        else if (key == "ey") rule.ey = parse_range(v.data(), full);
        else if (key == "ez") rule.ez = parse_range(v.data(), full);
        else throw std::invalid_argument("grammar config: unknown key '" + full + "'");
      }
    }
  }
  c.validate();
  return c;
}

GrammarConfig read_grammar_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grammar config " + path);
  return parse_grammar_config(in);
}

namespace {

constexpr double kPi = std::numbers::pi;
// Rotation that puts a box's back (local -z) against wall 0..3 = -z, +x, +z, -x.
constexpr std::array<double, 4> kWallRotation = {0.0, kPi / 2, -kPi, -kPi / 2};

struct Room {
  double width = 0.0, depth = 0.0;
  bool l_shape = false;
  double notch_x = 0.0, notch_z = 0.0;  // notch size
  int corner_x = 1, corner_z = 1;       // notch corner signs

  bool contains(double x, double z) const {
    if (std::abs(x) > 0.5 * width || std::abs(z) > 0.5 * depth) return false;
    if (!l_shape) return true;
    const bool in_x = corner_x > 0 ? x > 0.5 * width - notch_x : x < -0.5 * width + notch_x;
    const bool in_z = corner_z > 0 ? z > 0.5 * depth - notch_z : z < -0.5 * depth + notch_z;
    return !(in_x && in_z);
  }
};

double snap(double v, double step) { return step * std::round(v / step); }

double draw(Rng& rng, const Range& r) { return r.lo == r.hi ? r.lo : rng.uniform(r.lo, r.hi); }

std::array<double, 2> rotate(double r, double a, double b) {
  const double c = std::cos(r), s = std::sin(r);
  return {c * a - s * b, s * a + c * b};
}

class Builder {
 public:
  Builder(const GrammarConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  Room make_room() {
    Room room;
    // Sides snapped to two cells so walls fall on pixel edges.
    const double step = 2.0 * cfg_.cell;
    room.width = snap(draw(rng_, cfg_.room_width), step);
    room.depth = snap(draw(rng_, cfg_.room_depth), step);
    room.l_shape = rng_.bernoulli(cfg_.l_shape_prob);
    if (room.l_shape) {
      room.notch_x = snap(draw(rng_, cfg_.l_cut) * room.width, cfg_.cell);
      room.notch_z = snap(draw(rng_, cfg_.l_cut) * room.depth, cfg_.cell);
      room.corner_x = rng_.bernoulli(0.5) ? 1 : -1;
      room.corner_z = rng_.bernoulli(0.5) ? 1 : -1;
    }
    return room;
  }

  BoundaryRaster rasterize(const Room& room) const {
    const std::size_t side = cfg_.raster_side;
    BoundaryRaster b(side, side, cfg_.cell);
    const double half = 0.5 * static_cast<double>(side);
    for (std::size_t row = 0; row < side; ++row) {
      for (std::size_t col = 0; col < side; ++col) {
        const double x = (static_cast<double>(col) + 0.5 - half) * cfg_.cell;
        const double z = (static_cast<double>(row) + 0.5 - half) * cfg_.cell;
        b.set(col, row, room.contains(x, z));
      }
    }
    return b;
  }

  BoundingBox sized(std::size_t cls) {
    BoundingBox box;
    box.cls = cls;
    const SizeRule& s = cfg_.sizes[cls];
    box.e = {draw(rng_, s.ex), draw(rng_, s.ey), draw(rng_, s.ez)};
    box.t[1] = 0.5 * box.e[1];
    return box;
  }

  // Back of the box against `wall`, at a uniform position along it.
  // `reserve` keeps that much extra room free on both sides along the wall.
  bool against_wall(BoundingBox& box, std::size_t wall, const Room& room, double reserve = 0.0) {
    const double r = kWallRotation[wall];
    const bool along_x = wall % 2 == 0;
    const double half_along = 0.5 * (along_x ? room.width : room.depth);
    const double half_across = 0.5 * (along_x ? room.depth : room.width);
    const double slack = half_along - 0.5 * box.e[0] - reserve - cfg_.wall_gap;
    if (slack < 0.0) return false;
    const double u = rng_.uniform(-slack, slack);
    const auto c = rotate(r, u, -(half_across - cfg_.wall_gap - 0.5 * box.e[2]));
    box.t[0] = c[0];
    box.t[2] = c[1];
    box.r = r;
    return true;
  }

  bool fits(const BoundingBox& box, const BoundaryRaster& raster, const std::vector<BoundingBox>& placed) const {
    if (!footprint_inside(box, raster)) return false;
    for (const auto& other : placed)
      if (footprint_overlap_area(box, other) > 0.0) return false;
    return true;
  }

  // Tries to place a box `tries` times with a fresh position each time.
  template <typename Place>
  bool place(std::size_t cls, const BoundaryRaster& raster, std::vector<BoundingBox>& placed, Place&& position,
             std::size_t tries = 30) {
    for (std::size_t i = 0; i < tries; ++i) {
      BoundingBox box = sized(cls);
      if (position(box) && fits(box, raster, placed)) {
        placed.push_back(box);
        return true;
      }
    }
    return false;
  }

  bool build(Layout& out) {
    const Room room = make_room();
    out.boundary = rasterize(room);
    out.boxes.clear();
    auto& boxes = out.boxes;

    // Bed and nightstands are placed as one group so the drawn nightstand
    // count is always realized.
    const std::size_t nightstands = rng_.discrete(cfg_.nightstand_probs);
    const double reserve = nightstands ? cfg_.nightstand_gap + cfg_.sizes[kNightstand].ex.hi : 0.0;
    std::size_t bed_wall = 0;
    if (!place_bed_group(room, out.boundary, boxes, nightstands, reserve, bed_wall)) return false;

    if (rng_.bernoulli(cfg_.wardrobe_prob)) {
      place(kWardrobe, out.boundary, boxes, [&](BoundingBox& b) {
        const std::size_t wall = (bed_wall + 1 + rng_.uniform_index(3)) % 4;
        return against_wall(b, wall, room);
      });
    }

    if (rng_.bernoulli(cfg_.table_prob)) place_table_group(room, out.boundary, boxes);

    if (rng_.bernoulli(cfg_.lamp_prob)) {
      place(kLamp, out.boundary, boxes, [&](BoundingBox& b) {
        b.t[0] = rng_.uniform(-0.5 * room.width, 0.5 * room.width);
        b.t[2] = rng_.uniform(-0.5 * room.depth, 0.5 * room.depth);
        b.r = 0.0;
        return true;
      });
    }
    return true;
  }

  bool place_bed_group(const Room& room, const BoundaryRaster& raster, std::vector<BoundingBox>& boxes,
                       std::size_t nightstands, double reserve, std::size_t& bed_wall) {
    for (std::size_t attempt = 0; attempt < 30; ++attempt) {
      BoundingBox bed = sized(kBed);
      bed_wall = rng_.uniform_index(4);
      std::array<int, 2> sides = {-1, 1};
      if (nightstands == 1 && rng_.bernoulli(0.5)) std::swap(sides[0], sides[1]);
      if (!against_wall(bed, bed_wall, room, reserve) || !fits(bed, raster, boxes)) continue;
      std::vector<BoundingBox> group = boxes;
      group.push_back(bed);
      bool ok = true;
      for (std::size_t i = 0; i < nightstands && ok; ++i) {
        BoundingBox b = sized(kNightstand);
        const double u = sides[i] * (0.5 * bed.e[0] + cfg_.nightstand_gap + 0.5 * b.e[0]);
        const auto c = rotate(bed.r, u, -0.5 * bed.e[2] + 0.5 * b.e[2]);
        b.t[0] = bed.t[0] + c[0];
        b.t[2] = bed.t[2] + c[1];
        b.r = bed.r;
        ok = fits(b, raster, group);
        if (ok) group.push_back(b);
      }
      if (ok) {
        boxes = std::move(group);
        return true;
      }
    }
    return false;
  }

  void place_table_group(const Room& room, const BoundaryRaster& raster, std::vector<BoundingBox>& boxes) {
    // Chair k sits on table side k (+z, -z, +x, -x in the table frame) facing it.
    constexpr std::array<std::array<double, 2>, 4> dir = {{{0, 1}, {0, -1}, {1, 0}, {-1, 0}}};
    constexpr std::array<double, 4> facing = {-kPi, 0.0, kPi / 2, -kPi / 2};
    constexpr double chair_gap = 0.1;
    for (std::size_t attempt = 0; attempt < 30; ++attempt) {
      BoundingBox table = sized(kTable);
      table.t[0] = rng_.uniform(-0.25 * room.width, 0.25 * room.width);
      table.t[2] = rng_.uniform(-0.25 * room.depth, 0.25 * room.depth);
      table.r = rng_.bernoulli(0.5) ? 0.0 : kPi / 2;
      const std::size_t count = cfg_.chairs_min + rng_.uniform_index(cfg_.chairs_max - cfg_.chairs_min + 1);
      std::vector<std::size_t> order = rng_.permutation(4);
      if (!fits(table, raster, boxes)) continue;
      std::vector<BoundingBox> group = boxes;
      group.push_back(table);
      bool ok = true;
      for (std::size_t i = 0; i < count && ok; ++i) {
        const std::size_t k = order[i];
        BoundingBox chair = sized(kChair);
        const double reach = k < 2 ? 0.5 * table.e[2] : 0.5 * table.e[0];
        const double offset = reach + chair_gap + 0.5 * chair.e[2];
        const auto c = rotate(table.r, dir[k][0] * offset, dir[k][1] * offset);
        chair.t[0] = table.t[0] + c[0];
        chair.t[2] = table.t[2] + c[1];
        chair.r = wrap_angle(table.r + facing[k]);
        ok = fits(chair, raster, group);
        if (ok) group.push_back(chair);
      }
      if (ok) {
        boxes = std::move(group);
        return;
      }
    }
  }

 private:
  const GrammarConfig& cfg_;
  Rng& rng_;
};

}  // namespace

Layout generate_layout(const GrammarConfig& cfg, std::uint64_t index) {
  Rng rng = Rng::derive(cfg.seed, index);
  Builder builder(cfg, rng);
  Layout layout;
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    if (builder.build(layout)) return layout;
  }
  throw std::runtime_error("grammar: could not place a bed in layout " + std::to_string(index) + " after " +
                           std::to_string(cfg.max_attempts) + " rooms");
}

std::vector<Layout> generate_dataset(const GrammarConfig& cfg, std::size_t n) {
  if (n == 0) throw std::invalid_argument("generate_dataset: count must be positive");
  cfg.validate();
  std::vector<Layout> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_layout(cfg, i));
  return out;
}

SplitIndices split_dataset(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: fractions must be nonnegative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  Rng rng(seed);
  const std::vector<std::size_t> order = rng.permutation(n);
  const auto count = [&](double f) { return static_cast<std::size_t>(std::llround(f * static_cast<double>(n))); };
  const std::size_t n_val = std::min(n, count(fractions[1]));
  const std::size_t n_test = std::min(n - n_val, count(fractions[2]));
  const std::size_t n_train = n - n_val - n_test;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

constexpr std::array<const char*, 8> kPalette = {"#d1495b", "#edae49", "#00798c", "#30638e",
                                                 "#6a4c93", "#8ac926", "#ff924c", "#52a675"};

}  // namespace

std::string render_svg(const Layout& layout, const ClassSchema* schema, double ppm) {
  const BoundaryRaster& b = layout.boundary;
  const double w = static_cast<double>(b.width) * b.cell * ppm;
  const double h = static_cast<double>(b.height) * b.cell * ppm;
  const double ox = 0.5 * w, oz = 0.5 * h;
  const double px = b.cell * ppm;
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
      << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h) << "\" style=\"background:#ffffff\">\n";

  // Outline: every pixel edge between an interior and an exterior pixel.
  auto inside = [&](long col, long row) {
    return col >= 0 && row >= 0 && col < static_cast<long>(b.width) && row < static_cast<long>(b.height) &&
           b.at(static_cast<std::size_t>(col), static_cast<std::size_t>(row));
  };
  std::ostringstream path;
  for (long row = 0; row <= static_cast<long>(b.height); ++row) {
    for (long col = 0; col <= static_cast<long>(b.width); ++col) {
      if (inside(col, row) != inside(col, row - 1) && col < static_cast<long>(b.width)) {
        path << 'M' << num(col * px) << ' ' << num(row * px) << 'H' << num((col + 1) * px);
      }
      if (inside(col, row) != inside(col - 1, row) && row < static_cast<long>(b.height)) {
        path << 'M' << num(col * px) << ' ' << num(row * px) << 'V' << num((row + 1) * px);
      }
    }
  }
  svg << "<path class=\"boundary\" d=\"" << path.str() << "\" fill=\"none\" stroke=\"#222222\" stroke-width=\"2\"/>\n";

  for (std::size_t i = 0; i < layout.boxes.size(); ++i) {
    const BoundingBox& box = layout.boxes[i];
    const double cx = ox + box.t[0] * ppm, cy = oz + box.t[2] * ppm;
    const double bw = box.e[0] * ppm, bh = box.e[2] * ppm;
    const std::string label = schema && box.cls < schema->size() ? schema->label(box.cls) : std::to_string(box.cls);
    const std::string deg = num(box.r * 180.0 / std::numbers::pi);
    svg << "<rect class=\"box\" data-slot=\"" << i << "\" x=\"" << num(cx - 0.5 * bw) << "\" y=\"" << num(cy - 0.5 * bh)
        << "\" width=\"" << num(bw) << "\" height=\"" << num(bh) << "\" transform=\"rotate(" << deg << ' ' << num(cx)
        << ' ' << num(cy) << ")\" fill=\"" << kPalette[box.cls % kPalette.size()]
        << "\" fill-opacity=\"0.6\" stroke=\"#000000\"/>\n";
    svg << "<text x=\"" << num(cx) << "\" y=\"" << num(cy) << "\" font-size=\"12\" text-anchor=\"middle\">"
        << escape_xml(label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace cofs
