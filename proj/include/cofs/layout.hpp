// Layout data model: bounding boxes, boundary rasters, and their flattening
// into token sequences with object / attribute / absolute index streams.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cofs/rng.hpp"

namespace cofs {

// Attribute order inside one object's block of tokens.
enum Attr : std::size_t { kClass = 0, kTx, kTy, kTz, kEx, kEy, kEz, kRot };
inline constexpr std::size_t kAttrCount = 8;
inline constexpr std::size_t kScalarChannels = 7;
inline constexpr std::array<std::string_view, kAttrCount> kAttrNames = {"class", "tx", "ty", "tz",
                                                                         "ex",    "ey", "ez", "r"};

// Returns the attribute index for a name from kAttrNames; throws on unknown names.
std::size_t attr_index(std::string_view name);

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (at " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

struct ClassSchema {
  std::vector<std::string> labels;

  std::size_t size() const { return labels.size(); }
  const std::string& label(std::size_t id) const;
  // Throws std::invalid_argument for unknown labels.
  std::size_t id(std::string_view label) const;
  bool operator==(const ClassSchema&) const = default;
};

// Schema file: one "id label" pair per line, ids dense from 0.
void write_class_schema(std::ostream& out, const ClassSchema& schema);
ClassSchema read_class_schema(std::istream& in);

// Wraps an angle into [-pi, pi).
double wrap_angle(double radians);

struct BoundingBox {
  std::size_t cls = 0;
  std::array<double, 3> t{};  // center
  std::array<double, 3> e{};  // full extents along the box's local axes
  double r = 0.0;             // yaw about +y, radians

  bool operator==(const BoundingBox&) const = default;
};

// The four footprint corners on the (x, z) floor plane, counter-clockwise in
// local coordinates: (-,-), (+,-), (+,+), (-,+) half-extents rotated by r.
std::array<std::array<double, 2>, 4> footprint(const BoundingBox& box);

// Binary top-down occupancy image. Pixel (col, row) covers the floor cell
// centered at x = (col + 0.5 - width/2) * cell, z = (row + 0.5 - height/2) * cell,
// so the room center sits at the world origin.
struct BoundaryRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  double cell = 0.1;
  std::vector<std::uint8_t> bits;  // row-major, 1 = inside

  BoundaryRaster() = default;
  BoundaryRaster(std::size_t w, std::size_t h, double cell_size);

  bool at(std::size_t col, std::size_t row) const { return bits[row * width + col] != 0; }
  void set(std::size_t col, std::size_t row, bool inside) { bits[row * width + col] = inside ? 1 : 0; }
  std::size_t interior_count() const;
  // True if the world point falls on an interior pixel of the grid.
  bool contains(double x, double z) const;
  // Throws std::invalid_argument unless dimensions match and some pixel is inside.
  void validate() const;

  bool operator==(const BoundaryRaster&) const = default;
};

struct Layout {
  BoundaryRaster boundary;
  std::vector<BoundingBox> boxes;

  bool operator==(const Layout&) const = default;
};

enum class TokenKind : std::uint8_t { Sos, Eos, Mask, Class, Scalar };

struct TokenValue {
  TokenKind kind = TokenKind::Mask;
  std::size_t cls = 0;
  double scalar = 0.0;

  static TokenValue sos() { return {TokenKind::Sos, 0, 0.0}; }
  static TokenValue eos() { return {TokenKind::Eos, 0, 0.0}; }
  static TokenValue mask() { return {TokenKind::Mask, 0, 0.0}; }
  static TokenValue of_class(std::size_t id) { return {TokenKind::Class, id, 0.0}; }
  static TokenValue of_scalar(double v) { return {TokenKind::Scalar, 0, v}; }

  bool is_mask() const { return kind == TokenKind::Mask; }
  bool operator==(const TokenValue&) const = default;
};

// A flattened layout (or condition). SOS and EOS carry obj = attr = 0; the
// embedding code skips the object/attribute tables for them.
struct TokenSequence {
  std::vector<TokenValue> tokens;
  std::vector<std::size_t> obj;   // permuted object slot of each token
  std::vector<std::size_t> attr;  // 0..7 within the object
  std::vector<std::size_t> pos;   // absolute position

  std::size_t size() const { return tokens.size(); }
  std::size_t object_count() const { return tokens.size() < 2 ? 0 : (tokens.size() - 2) / kAttrCount; }
  bool is_attribute(std::size_t i) const { return i > 0 && i + 1 < tokens.size(); }
  // Throws std::invalid_argument if streams are inconsistent.
  void validate() const;

  bool operator==(const TokenSequence&) const = default;
};

// Position of attribute `attr` of object slot `slot` in a flattened sequence.
constexpr std::size_t token_position(std::size_t slot, std::size_t attr) { return 1 + slot * kAttrCount + attr; }
inline std::size_t sequence_length(std::size_t objects) { return 2 + kAttrCount * objects; }

// Per-channel affine map of (tx, ty, tz, ex, ey, ez, r) onto [-1, 1].
class AttributeNormalizer {
 public:
  AttributeNormalizer();
  AttributeNormalizer(std::array<double, kScalarChannels> lo, std::array<double, kScalarChannels> hi);

  // Channel extrema over the given layouts. With `rotation_envelope`, the
  // horizontal translation channels cover every rotation of the data about
  // the room center (needed when training with rotation augmentation), and
  // the rotation channel is fixed to [-pi, pi].
  static AttributeNormalizer fit(std::span<const Layout> layouts, bool rotation_envelope);

  // channel is 0..6 for (tx, ty, tz, ex, ey, ez, r).
  double normalize(std::size_t channel, double value) const;
  double denormalize(std::size_t channel, double normalized) const;

  const std::array<double, kScalarChannels>& lo() const { return lo_; }
  const std::array<double, kScalarChannels>& hi() const { return hi_; }
  bool operator==(const AttributeNormalizer&) const = default;

 private:
  std::array<double, kScalarChannels> lo_;
  std::array<double, kScalarChannels> hi_;
};

// Scalar value of attribute a (1..7) of a box, in world units.
double box_scalar(const BoundingBox& box, std::size_t attr);
void set_box_scalar(BoundingBox& box, std::size_t attr, double value);

// Flattens `layout` with objects in `permutation` order: SOS, then per object
// (class, tx, ty, tz, ex, ey, ez, r), then EOS.
TokenSequence flatten(const Layout& layout, std::span<const std::size_t> permutation,
                      const AttributeNormalizer& normalizer, std::size_t max_objects);
TokenSequence flatten(const Layout& layout, const AttributeNormalizer& normalizer, std::size_t max_objects);

// Inverse of flatten for a sequence without MASK tokens. Boxes are emitted in
// sequence order. Scalars are clipped to [-1, 1] first when `clip` is set.
// Sizes are floored at a small positive value so the box invariant holds.
Layout unflatten(const TokenSequence& seq, const BoundaryRaster& boundary, const AttributeNormalizer& normalizer,
                 bool clip = false);

// Copy of `seq` with the given positions replaced by MASK.
TokenSequence build_condition(const TokenSequence& seq, std::span<const std::size_t> positions);
// Copy of `seq` with exactly round(ratio * attribute_count) attribute tokens
// masked, chosen uniformly without replacement.
TokenSequence build_condition(const TokenSequence& seq, double ratio, Rng& rng);

// Rotates boundary and boxes about the room center (world origin).
Layout rotate_augment(const Layout& layout, double angle);

// One-line JSON record:
//   {"boundary":{"w":W,"h":H,"cell":c,"bits":"0110..."},
//    "boxes":[{"class":id,"t":[x,y,z],"e":[x,y,z],"r":r}, ...]}
std::string serialize(const Layout& layout);
Layout parse_layout(std::string_view text);

nlohmann::json layout_to_json(const Layout& layout);
// Throws ParseError (position 0) on schema violations.
Layout layout_from_json(const nlohmann::json& j);
nlohmann::json box_to_json(const BoundingBox& box);
BoundingBox box_from_json(const nlohmann::json& j);
nlohmann::json boundary_to_json(const BoundaryRaster& boundary);
BoundaryRaster boundary_from_json(const nlohmann::json& j);

// Dataset file: newline-delimited records. Parse errors report the line.
void write_layouts(std::ostream& out, std::span<const Layout> layouts);
std::vector<Layout> read_layouts(std::istream& in);
std::vector<Layout> read_layouts_file(const std::string& path);
// Writes via a temporary file and rename so failures leave no partial output.
void write_layouts_file(const std::string& path, std::span<const Layout> layouts);

}  // namespace cofs
