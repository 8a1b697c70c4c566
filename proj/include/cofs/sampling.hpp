// Generation and scoring on a trained model.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cofs/layout.hpp"
#include "cofs/model.hpp"
#include "cofs/rng.hpp"

namespace cofs {

struct Constraint {
  std::size_t slot = 0;
  std::size_t attr = 0;
  TokenValue value;  // class id, or a normalized scalar

  bool operator==(const Constraint&) const = default;
};

// Object count plus fixed tokens; every other attribute slot is MASK.
struct ConstraintSpec {
  std::size_t object_count = 0;
  std::vector<Constraint> fixed;

  // Later entries for the same (slot, attr) replace earlier ones.
  void set(std::size_t slot, std::size_t attr, TokenValue value);
  // Throws std::invalid_argument for bad slots, attributes or token kinds and
  // CapacityError when object_count exceeds max_objects.
  void validate(std::size_t num_classes, std::size_t max_objects) const;
};

class CapacityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Constraint on a world-unit value (or class id for attr 0).
Constraint world_constraint(const AttributeNormalizer& normalizer, std::size_t slot, std::size_t attr, double value);

// The condition sequence C of length 2 + 8k for a spec.
TokenSequence condition_from_spec(const ConstraintSpec& spec);

struct SampleOptions {
  double temperature = 1.0;  // on class logits and mixture weight logits; 0 = greedy
  // Skip the network for constrained positions; their token is copied either
  // way, so outputs are identical.
  bool fast = true;
};

struct SampleResult {
  TokenSequence sequence;  // raw tokens, constrained ones verbatim
  Layout layout;           // denormalized; only sampled scalars are clipped
  bool truncated = false;  // standard sampling hit max_len without an end symbol
};

// Denormalizes a complete sequence; scalars at `clip` positions are clamped to
// [-1, 1] first.
Layout decode_layout(const TokenSequence& seq, const std::vector<bool>& clip, const BoundaryRaster& boundary,
                     const AttributeNormalizer& normalizer);

// Fixed-length sampling: each MASK slot of C is replaced by a sampled token
// left to right, re-encoding the updated C before every draw. The end symbol
// is never drawn.
SampleResult sample_cofs(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                         const ConstraintSpec& spec, Rng& rng, const SampleOptions& options = {});

// Baseline: C is encoded once; tokens are drawn until the end symbol or until
// the sequence holds max_len tokens, in which case the output is cut back to
// the last complete object and `truncated` is set.
SampleResult sample_standard(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                             const TokenSequence& condition, Rng& rng, std::size_t max_len,
                             const SampleOptions& options = {});

// Existing boxes become fully constrained leading slots, followed by n_new
// free slots.
SampleResult complete_scene(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                            std::span<const BoundingBox> existing, std::size_t n_new, Rng& rng,
                            const SampleOptions& options = {});

struct ObjectScore {
  std::size_t slot = 0;
  std::array<double, kAttrCount> token_log_probs{};
  double total = 0.0;
};

// Pseudo-likelihood of every object: for each attribute token, the model
// sees the full condition with only that token masked and scores the true
// token under teacher forcing. One entry per object, in layout order.
std::vector<ObjectScore> score_tokens(const Model& model, const AttributeNormalizer& normalizer, const Layout& layout,
                                      std::size_t chunk = 32);

// Ascending by total; ties keep the lower slot first.
std::vector<ObjectScore> rank_by_score(std::vector<ObjectScore> scores);

// Redraws object `slot`: the other objects and its `keep` attributes are
// constrained, and the object is moved last in the sequence so only its
// free tokens are sampled. The returned layout keeps the original order.
SampleResult resample_object(const Model& model, const AttributeNormalizer& normalizer, const Layout& layout,
                             std::size_t slot, std::span<const std::size_t> keep, Rng& rng,
                             const SampleOptions& options = {});

// The spec and permutation resample_object builds (exposed for testing).
struct ResamplePlan {
  std::vector<std::size_t> permutation;  // sequence slot -> layout index
  ConstraintSpec spec;
};
ResamplePlan plan_resample(const AttributeNormalizer& normalizer, const Layout& layout, std::size_t slot,
                           std::span<const std::size_t> keep, std::size_t max_objects);

}  // namespace cofs
