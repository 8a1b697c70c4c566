#include "cofs/layout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "cofs/io.hpp"

namespace cofs {

namespace {

constexpr double kMinExtent = 1e-6;

}  // namespace

std::size_t attr_index(std::string_view name) {
  for (std::size_t i = 0; i < kAttrCount; ++i)
    if (kAttrNames[i] == name) return i;
  throw std::invalid_argument("unknown attribute name '" + std::string(name) + "'");
}

const std::string& ClassSchema::label(std::size_t id) const {
  if (id >= labels.size()) throw std::invalid_argument("class id " + std::to_string(id) + " out of range");
  return labels[id];
}

std::size_t ClassSchema::id(std::string_view label) const {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) return i;
  throw std::invalid_argument("unknown class label '" + std::string(label) + "'");
}

void write_class_schema(std::ostream& out, const ClassSchema& schema) {
  for (std::size_t i = 0; i < schema.size(); ++i) out << i << ' ' << schema.labels[i] << '\n';
}

ClassSchema read_class_schema(std::istream& in) {
  ClassSchema schema;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id;
    std::string label;
    if (!(ls >> id >> label) || id != schema.labels.size()) {
      throw ParseError("class schema: expected '" + std::to_string(schema.labels.size()) + " <label>'", lineno);
    }
    schema.labels.push_back(label);
  }
  if (schema.labels.empty()) throw ParseError("class schema: no classes", lineno);
  return schema;
}

double wrap_angle(double radians) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  if (radians >= -std::numbers::pi && radians < std::numbers::pi) return radians;
  double a = std::fmod(radians + std::numbers::pi, two_pi);
  if (a < 0.0) a += two_pi;
  a -= std::numbers::pi;
  // fmod can land exactly on +pi after the shift back.
  if (a >= std::numbers::pi) a -= two_pi;
  return a;
}

std::array<std::array<double, 2>, 4> footprint(const BoundingBox& box) {
  const double hx = 0.5 * box.e[0], hz = 0.5 * box.e[2];
  const double c = std::cos(box.r), s = std::sin(box.r);
  const std::array<std::array<double, 2>, 4> local = {{{-hx, -hz}, {hx, -hz}, {hx, hz}, {-hx, hz}}};
  std::array<std::array<double, 2>, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i][0] = box.t[0] + c * local[i][0] - s * local[i][1];
    out[i][1] = box.t[2] + s * local[i][0] + c * local[i][1];
  }
  return out;
}

BoundaryRaster::BoundaryRaster(std::size_t w, std::size_t h, double cell_size)
    : width(w), height(h), cell(cell_size), bits(w * h, 0) {}

std::size_t BoundaryRaster::interior_count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

bool BoundaryRaster::contains(double x, double z) const {
  const double col = std::floor(x / cell + 0.5 * static_cast<double>(width));
  const double row = std::floor(z / cell + 0.5 * static_cast<double>(height));
  if (col < 0.0 || row < 0.0 || col >= static_cast<double>(width) || row >= static_cast<double>(height)) return false;
  return at(static_cast<std::size_t>(col), static_cast<std::size_t>(row));
}

void BoundaryRaster::validate() const {
  if (width == 0 || height == 0 || bits.size() != width * height) {
    throw std::invalid_argument("boundary raster: dimensions do not match bit count");
  }
  if (!(cell > 0.0)) throw std::invalid_argument("boundary raster: cell size must be positive");
  if (interior_count() == 0) throw std::invalid_argument("boundary raster: no interior pixel");
}

void TokenSequence::validate() const {
  const std::size_t n = tokens.size();
  if (obj.size() != n || attr.size() != n || pos.size() != n) {
    throw std::invalid_argument("token sequence: stream lengths differ");
  }
  if (n < 2 || (n - 2) % kAttrCount != 0) throw std::invalid_argument("token sequence: length is not 2 + 8k");
  if (tokens.front().kind != TokenKind::Sos || tokens.back().kind != TokenKind::Eos) {
    throw std::invalid_argument("token sequence: must start with SOS and end with EOS");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (pos[i] != i) throw std::invalid_argument("token sequence: absolute index stream out of order");
    if (!is_attribute(i)) continue;
    const std::size_t a = (i - 1) % kAttrCount;
    if (attr[i] != a) throw std::invalid_argument("token sequence: attribute stream out of order");
    const TokenKind k = tokens[i].kind;
    const bool ok = k == TokenKind::Mask || (a == kClass ? k == TokenKind::Class : k == TokenKind::Scalar);
    if (!ok) throw std::invalid_argument("token sequence: token kind does not match attribute at " + std::to_string(i));
  }
}

AttributeNormalizer::AttributeNormalizer() {
  lo_.fill(-1.0);
  hi_.fill(1.0);
  lo_[6] = -std::numbers::pi;
  hi_[6] = std::numbers::pi;
}

AttributeNormalizer::AttributeNormalizer(std::array<double, kScalarChannels> lo, std::array<double, kScalarChannels> hi)
    : lo_(lo), hi_(hi) {
  for (std::size_t c = 0; c < kScalarChannels; ++c) {
    if (!(hi_[c] > lo_[c])) throw std::invalid_argument("normalizer: max must exceed min on every channel");
  }
}

AttributeNormalizer AttributeNormalizer::fit(std::span<const Layout> layouts, bool rotation_envelope) {
  std::array<double, kScalarChannels> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  double radius = 0.0;
  bool any = false;
  for (const auto& layout : layouts) {
    for (const auto& box : layout.boxes) {
      any = true;
      for (std::size_t c = 0; c < kScalarChannels; ++c) {
        const double v = box_scalar(box, c + 1);
        lo[c] = std::min(lo[c], v);
        hi[c] = std::max(hi[c], v);
      }
      radius = std::max(radius, std::hypot(box.t[0], box.t[2]));
    }
  }
  if (!any) return AttributeNormalizer();
  if (rotation_envelope) {
    for (std::size_t c : {std::size_t{0}, std::size_t{2}}) {
      lo[c] = -radius;
      hi[c] = radius;
    }
    lo[6] = -std::numbers::pi;
    hi[6] = std::numbers::pi;
  }
  for (std::size_t c = 0; c < kScalarChannels; ++c) {
    if (!(hi[c] > lo[c])) {
      lo[c] -= 0.5;
      hi[c] += 0.5;
    }
  }
  return AttributeNormalizer(lo, hi);
}

double AttributeNormalizer::normalize(std::size_t channel, double value) const {
  return 2.0 * (value - lo_.at(channel)) / (hi_[channel] - lo_[channel]) - 1.0;
}

double AttributeNormalizer::denormalize(std::size_t channel, double normalized) const {
  return lo_.at(channel) + 0.5 * (normalized + 1.0) * (hi_[channel] - lo_[channel]);
}

double box_scalar(const BoundingBox& box, std::size_t attr) {
  switch (attr) {
    case kTx: return box.t[0];
    case kTy: return box.t[1];
    case kTz: return box.t[2];
    case kEx: return box.e[0];
    case kEy: return box.e[1];
    case kEz: return box.e[2];
    case kRot: return box.r;
    default: throw std::invalid_argument("box_scalar: attribute " + std::to_string(attr) + " is not a scalar");
  }
}

void set_box_scalar(BoundingBox& box, std::size_t attr, double value) {
  switch (attr) {
    case kTx: box.t[0] = value; break;
    case kTy: box.t[1] = value; break;
    case kTz: box.t[2] = value; break;
    case kEx: box.e[0] = value; break;
    case kEy: box.e[1] = value; break;
    case kEz: box.e[2] = value; break;
    case kRot: box.r = value; break;
    default: throw std::invalid_argument("set_box_scalar: attribute " + std::to_string(attr) + " is not a scalar");
  }
}

TokenSequence flatten(const Layout& layout, std::span<const std::size_t> permutation,
                      const AttributeNormalizer& normalizer, std::size_t max_objects) {
  const std::size_t k = layout.boxes.size();
  if (k > max_objects) {
    throw std::invalid_argument("flatten: " + std::to_string(k) + " objects exceed capacity " +
                                std::to_string(max_objects));
  }
  if (permutation.size() != k) throw std::invalid_argument("flatten: permutation length differs from object count");
  std::vector<bool> used(k, false);
  for (std::size_t p : permutation) {
    if (p >= k || used[p]) throw std::invalid_argument("flatten: permutation is not a bijection");
    used[p] = true;
  }

  const std::size_t n = sequence_length(k);
  TokenSequence s;
  s.tokens.reserve(n);
  s.obj.reserve(n);
  s.attr.reserve(n);
  s.pos.reserve(n);
  auto push = [&](TokenValue v, std::size_t o, std::size_t a) {
    s.pos.push_back(s.tokens.size());
    s.tokens.push_back(v);
    s.obj.push_back(o);
    s.attr.push_back(a);
  };
  push(TokenValue::sos(), 0, 0);
  for (std::size_t slot = 0; slot < k; ++slot) {
    const BoundingBox& box = layout.boxes[permutation[slot]];
    push(TokenValue::of_class(box.cls), slot, kClass);
    for (std::size_t a = 1; a < kAttrCount; ++a) {
      push(TokenValue::of_scalar(normalizer.normalize(a - 1, box_scalar(box, a))), slot, a);
    }
  }
  push(TokenValue::eos(), 0, 0);
  return s;
}

TokenSequence flatten(const Layout& layout, const AttributeNormalizer& normalizer, std::size_t max_objects) {
  std::vector<std::size_t> identity(layout.boxes.size());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  return flatten(layout, identity, normalizer, max_objects);
}

Layout unflatten(const TokenSequence& seq, const BoundaryRaster& boundary, const AttributeNormalizer& normalizer,
                 bool clip) {
  seq.validate();
  Layout out;
  out.boundary = boundary;
  const std::size_t k = seq.object_count();
  out.boxes.reserve(k);
  for (std::size_t slot = 0; slot < k; ++slot) {
    BoundingBox box;
    const TokenValue& cls = seq.tokens[token_position(slot, kClass)];
    if (cls.kind != TokenKind::Class) throw std::invalid_argument("unflatten: masked class token");
    box.cls = cls.cls;
    for (std::size_t a = 1; a < kAttrCount; ++a) {
      const TokenValue& tok = seq.tokens[token_position(slot, a)];
      if (tok.kind != TokenKind::Scalar) throw std::invalid_argument("unflatten: masked scalar token");
      const double b = clip ? std::clamp(tok.scalar, -1.0, 1.0) : tok.scalar;
      set_box_scalar(box, a, normalizer.denormalize(a - 1, b));
    }
    for (double& e : box.e) e = std::max(e, kMinExtent);
    box.r = wrap_angle(box.r);
    out.boxes.push_back(box);
  }
  return out;
}

TokenSequence build_condition(const TokenSequence& seq, std::span<const std::size_t> positions) {
  TokenSequence c = seq;
  for (std::size_t p : positions) {
    if (p >= seq.size()) throw std::invalid_argument("build_condition: position " + std::to_string(p) + " out of range");
    if (!seq.is_attribute(p)) throw std::invalid_argument("build_condition: cannot mask SOS/EOS");
    c.tokens[p] = TokenValue::mask();
  }
  return c;
}

TokenSequence build_condition(const TokenSequence& seq, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("build_condition: ratio outside [0, 1]");
  const std::size_t attrs = seq.size() >= 2 ? seq.size() - 2 : 0;
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(attrs)));
  std::vector<std::size_t> order = rng.permutation(attrs);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  for (std::size_t& p : chosen) p += 1;
  return build_condition(seq, chosen);
}

Layout rotate_augment(const Layout& layout, double angle) {
  Layout out;
  const double c = std::cos(angle), s = std::sin(angle);
  const BoundaryRaster& in = layout.boundary;
  out.boundary = BoundaryRaster(in.width, in.height, in.cell);
  const double half_w = 0.5 * static_cast<double>(in.width), half_h = 0.5 * static_cast<double>(in.height);
  // Inverse-map every output pixel center into the source grid.
  for (std::size_t row = 0; row < in.height; ++row) {
    for (std::size_t col = 0; col < in.width; ++col) {
      const double x = static_cast<double>(col) + 0.5 - half_w;
      const double z = static_cast<double>(row) + 0.5 - half_h;
      const double sx = c * x + s * z;
      const double sz = -s * x + c * z;
      const double scol = std::floor(sx + half_w), srow = std::floor(sz + half_h);
      if (scol < 0.0 || srow < 0.0 || scol >= static_cast<double>(in.width) || srow >= static_cast<double>(in.height))
        continue;
      out.boundary.set(col, row, in.at(static_cast<std::size_t>(scol), static_cast<std::size_t>(srow)));
    }
  }
  out.boxes.reserve(layout.boxes.size());
  for (const auto& box : layout.boxes) {
    BoundingBox b = box;
    b.t[0] = c * box.t[0] - s * box.t[2];
    b.t[2] = s * box.t[0] + c * box.t[2];
    b.r = wrap_angle(box.r + angle);
    out.boxes.push_back(b);
  }
  return out;
}

nlohmann::json box_to_json(const BoundingBox& box) {
  return {{"class", box.cls}, {"t", box.t}, {"e", box.e}, {"r", box.r}};
}

nlohmann::json boundary_to_json(const BoundaryRaster& b) {
  std::string bits(b.bits.size(), '0');
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (b.bits[i]) bits[i] = '1';
  return {{"w", b.width}, {"h", b.height}, {"cell", b.cell}, {"bits", bits}};
}

nlohmann::json layout_to_json(const Layout& layout) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& box : layout.boxes) boxes.push_back(box_to_json(box));
  return {{"boundary", boundary_to_json(layout.boundary)}, {"boxes", std::move(boxes)}};
}

namespace {

const nlohmann::json& field(const nlohmann::json& j, const char* name, const char* context) {
  if (!j.is_object()) throw ParseError(std::string(context) + ": expected an object", 0);
  auto it = j.find(name);
  if (it == j.end()) throw ParseError(std::string(context) + ": missing field '" + name + "'", 0);
  return *it;
}

double number(const nlohmann::json& j, const char* context) {
  if (!j.is_number()) throw ParseError(std::string(context) + ": expected a number", 0);
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ParseError(std::string(context) + ": non-finite number", 0);
  return v;
}

std::array<double, 3> triple(const nlohmann::json& j, const char* context) {
  if (!j.is_array() || j.size() != 3) throw ParseError(std::string(context) + ": expected 3 numbers", 0);
  return {number(j[0], context), number(j[1], context), number(j[2], context)};
}

}  // namespace

BoundingBox box_from_json(const nlohmann::json& j) {
  BoundingBox box;
  const auto& cls = field(j, "class", "box");
  if (!cls.is_number_unsigned()) throw ParseError("box.class: expected a nonnegative integer", 0);
  box.cls = cls.get<std::size_t>();
  box.t = triple(field(j, "t", "box"), "box.t");
  box.e = triple(field(j, "e", "box"), "box.e");
  box.r = number(field(j, "r", "box"), "box.r");
  for (double e : box.e)
    if (!(e > 0.0)) throw ParseError("box.e: sizes must be positive", 0);
  return box;
}

BoundaryRaster boundary_from_json(const nlohmann::json& j) {
  const auto& w = field(j, "w", "boundary");
  const auto& h = field(j, "h", "boundary");
  if (!w.is_number_unsigned() || !h.is_number_unsigned()) throw ParseError("boundary: w/h must be integers", 0);
  double cell = 0.1;
  if (j.contains("cell")) cell = number(j["cell"], "boundary.cell");
  BoundaryRaster b(w.get<std::size_t>(), h.get<std::size_t>(), cell);
  const auto& bits = field(j, "bits", "boundary");
  if (!bits.is_string()) throw ParseError("boundary.bits: expected a 0/1 string", 0);
  const auto& str = bits.get_ref<const std::string&>();
  if (str.size() != b.bits.size()) throw ParseError("boundary.bits: length does not equal w*h", 0);
  for (std::size_t i = 0; i < str.size(); ++i) {
    if (str[i] != '0' && str[i] != '1') throw ParseError("boundary.bits: invalid character", i);
    b.bits[i] = str[i] == '1' ? 1 : 0;
  }
  try {
    b.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what(), 0);
  }
  return b;
}

Layout layout_from_json(const nlohmann::json& j) {
  Layout layout;
  layout.boundary = boundary_from_json(field(j, "boundary", "layout"));
  const auto& boxes = field(j, "boxes", "layout");
  if (!boxes.is_array()) throw ParseError("layout.boxes: expected an array", 0);
  for (const auto& b : boxes) layout.boxes.push_back(box_from_json(b));
  return layout;
}

std::string serialize(const Layout& layout) { return layout_to_json(layout).dump(); }

Layout parse_layout(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed layout record: ") + e.what(), e.byte);
  }
  return layout_from_json(j);
}

void write_layouts(std::ostream& out, std::span<const Layout> layouts) {
  for (const auto& l : layouts) out << serialize(l) << '\n';
}

std::vector<Layout> read_layouts(std::istream& in) {
  std::vector<Layout> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse_layout(line));
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

std::vector<Layout> read_layouts_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return read_layouts(in);
}

void write_layouts_file(const std::string& path, std::span<const Layout> layouts) {
  std::ostringstream os;
  write_layouts(os, layouts);
  write_file_atomic(path, os.str());
}

}  // namespace cofs
