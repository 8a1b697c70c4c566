#include "cofs/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cofs/distributions.hpp"

namespace cofs {

void ConstraintSpec::set(std::size_t slot, std::size_t attr, TokenValue value) {
  for (auto& c : fixed) {
    if (c.slot == slot && c.attr == attr) {
      c.value = value;
      return;
    }
  }
  fixed.push_back({slot, attr, value});
}

void ConstraintSpec::validate(std::size_t num_classes, std::size_t max_objects) const {
  if (object_count > max_objects) {
    throw CapacityError("constraint spec: " + std::to_string(object_count) + " objects exceed capacity " +
                        std::to_string(max_objects));
  }
  for (const auto& c : fixed) {
    const std::string where = "constraint (" + std::to_string(c.slot) + ", " + std::to_string(c.attr) + ")";
    if (c.slot >= object_count) throw std::invalid_argument(where + ": slot out of range");
    if (c.attr >= kAttrCount) throw std::invalid_argument(where + ": attribute out of range");
    if (c.attr == kClass) {
      if (c.value.kind != TokenKind::Class) throw std::invalid_argument(where + ": class slot needs a class token");
      if (c.value.cls >= num_classes) throw std::invalid_argument(where + ": class id out of range");
    } else {
      if (c.value.kind != TokenKind::Scalar) throw std::invalid_argument(where + ": scalar slot needs a scalar token");
      if (!std::isfinite(c.value.scalar)) throw std::invalid_argument(where + ": non-finite value");
    }
  }
}

Constraint world_constraint(const AttributeNormalizer& normalizer, std::size_t slot, std::size_t attr, double value) {
  if (attr >= kAttrCount) throw std::invalid_argument("constraint: attribute out of range");
  if (attr == kClass) {
    if (!(value >= 0.0) || value != std::floor(value)) throw std::invalid_argument("constraint: class must be an id");
    return {slot, attr, TokenValue::of_class(static_cast<std::size_t>(value))};
  }
  return {slot, attr, TokenValue::of_scalar(normalizer.normalize(attr - 1, value))};
}

TokenSequence condition_from_spec(const ConstraintSpec& spec) {
  const std::size_t n = sequence_length(spec.object_count);
  TokenSequence c;
  c.tokens.assign(n, TokenValue::mask());
  c.obj.assign(n, 0);
  c.attr.assign(n, 0);
  c.pos.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.pos[i] = i;
    if (i > 0 && i + 1 < n) {
      c.obj[i] = (i - 1) / kAttrCount;
      c.attr[i] = (i - 1) % kAttrCount;
    }
  }
  c.tokens.front() = TokenValue::sos();
  c.tokens.back() = TokenValue::eos();
  for (const auto& f : spec.fixed) c.tokens[token_position(f.slot, f.attr)] = f.value;
  return c;
}

Layout decode_layout(const TokenSequence& seq, const std::vector<bool>& clip, const BoundaryRaster& boundary,
                     const AttributeNormalizer& normalizer) {
  TokenSequence s = seq;
  for (std::size_t i = 0; i < s.size() && i < clip.size(); ++i) {
    if (clip[i] && s.tokens[i].kind == TokenKind::Scalar) s.tokens[i].scalar = std::clamp(s.tokens[i].scalar, -1.0, 1.0);
  }
  return unflatten(s, boundary, normalizer, false);
}

namespace {

// Hidden state that predicts token `position` given tokens [0, position).
Tensor next_hidden(const Model& model, const Tensor& memory, const TokenSequence& seq, std::size_t position) {
  Tensor h = model.decode(seq, position, memory);
  return slice_rows(h, position - 1, 1);
}

TokenValue draw_token(const Model& model, const Tensor& hidden, std::size_t attr, bool allow_end, Rng& rng,
                      double temperature, bool& ended) {
  ended = false;
  if (attr == kClass) {
    Tensor logits = model.class_head(hidden);
    const std::size_t n = model.config().num_classes;
    CategoricalParams p;
    p.logits.assign(logits.values().begin(), logits.values().begin() + static_cast<std::ptrdiff_t>(allow_end ? n + 1 : n));
    const std::size_t id = categorical_sample(p, rng, temperature);
    if (id == n) {
      ended = true;
      return TokenValue::eos();
    }
    return TokenValue::of_class(id);
  }
  Tensor raw = model.mixture_head(hidden);
  return TokenValue::of_scalar(logistic_mixture_sample(LogisticMixtureParams::from_raw(raw.values()), rng, temperature));
}

}  // namespace

SampleResult sample_cofs(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                         const ConstraintSpec& spec, Rng& rng, const SampleOptions& options) {
  spec.validate(model.config().num_classes, model.config().max_objects);
  NoGradGuard no_grad;
  // C and the decoder prefix S agree on every position already visited, so
  // one sequence serves as both.
  TokenSequence c = condition_from_spec(spec);
  std::vector<bool> sampled(c.size(), false);
  Tensor memory;
  bool stale = true;
  for (std::size_t i = 1; i + 1 < c.size(); ++i) {
    const bool masked = c.tokens[i].is_mask();
    if (!masked && options.fast) continue;
    if (stale) {
      memory = model.encode(boundary, c);
      stale = false;
    }
    Tensor h = next_hidden(model, memory, c, i);
    if (!masked) continue;
    bool ended = false;
    c.tokens[i] = draw_token(model, h, c.attr[i], false, rng, options.temperature, ended);
    sampled[i] = true;
    stale = true;
  }
  SampleResult out;
  out.layout = decode_layout(c, sampled, boundary, normalizer);
  out.sequence = std::move(c);
  return out;
}

SampleResult sample_standard(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                             const TokenSequence& condition, Rng& rng, std::size_t max_len,
                             const SampleOptions& options) {
  condition.validate();
  NoGradGuard no_grad;
  const std::size_t limit = std::min(max_len, model.config().capacity());
  if (limit < 2) throw std::invalid_argument("sample_standard: max_len must allow SOS and EOS");
  const Tensor memory = model.encode(boundary, condition);

  TokenSequence s;
  auto push = [&](TokenValue v) {
    const std::size_t i = s.tokens.size();
    s.tokens.push_back(v);
    s.pos.push_back(i);
    s.obj.push_back(i == 0 ? 0 : (i - 1) / kAttrCount);
    s.attr.push_back(i == 0 ? 0 : (i - 1) % kAttrCount);
  };
  push(TokenValue::sos());
  SampleResult out;
  bool ended = false;
  // Leave room for the closing EOS.
  while (s.size() < limit) {
    const std::size_t i = s.size();
    const std::size_t attr = (i - 1) % kAttrCount;
    Tensor h = next_hidden(model, memory, s, i);
    TokenValue t = draw_token(model, h, attr, true, rng, options.temperature, ended);
    if (ended) break;
    push(t);
  }
  if (!ended) {
    out.truncated = true;
    const std::size_t complete = (s.size() - 1) / kAttrCount;
    const std::size_t keep = 1 + kAttrCount * complete;
    for (auto* v : {&s.obj, &s.attr, &s.pos}) v->resize(keep);
    s.tokens.resize(keep);
  }
  push(TokenValue::eos());
  s.obj.back() = 0;
  s.attr.back() = 0;
  std::vector<bool> clip(s.size(), true);
  out.layout = decode_layout(s, clip, boundary, normalizer);
  out.sequence = std::move(s);
  return out;
}

SampleResult complete_scene(const Model& model, const AttributeNormalizer& normalizer, const BoundaryRaster& boundary,
                            std::span<const BoundingBox> existing, std::size_t n_new, Rng& rng,
                            const SampleOptions& options) {
  const std::size_t k = existing.size() + n_new;
  if (k > model.config().max_objects) {
    throw CapacityError("complete: " + std::to_string(k) + " objects exceed capacity " +
                        std::to_string(model.config().max_objects));
  }
  ConstraintSpec spec;
  spec.object_count = k;
  for (std::size_t slot = 0; slot < existing.size(); ++slot) {
    spec.fixed.push_back({slot, kClass, TokenValue::of_class(existing[slot].cls)});
    for (std::size_t a = 1; a < kAttrCount; ++a) {
      spec.fixed.push_back(world_constraint(normalizer, slot, a, box_scalar(existing[slot], a)));
    }
  }
  return sample_cofs(model, normalizer, boundary, spec, rng, options);
}

std::vector<ObjectScore> score_tokens(const Model& model, const AttributeNormalizer& normalizer, const Layout& layout,
                                      std::size_t chunk) {
  const std::size_t k = layout.boxes.size();
  std::vector<ObjectScore> scores(k);
  for (std::size_t slot = 0; slot < k; ++slot) scores[slot].slot = slot;
  if (k == 0) return scores;
  NoGradGuard no_grad;
  const TokenSequence s = flatten(layout, normalizer, model.config().max_objects);
  const std::size_t variants = kAttrCount * k;
  const std::size_t n = model.config().num_classes;
  if (chunk == 0) chunk = variants;

  for (std::size_t begin = 0; begin < variants; begin += chunk) {
    const std::size_t count = std::min(chunk, variants - begin);
    std::vector<TokenSequence> conds;
    conds.reserve(count);
    std::vector<ForwardItem> items;
    for (std::size_t v = 0; v < count; ++v) {
      const std::size_t p = 1 + begin + v;
      const std::size_t pos[] = {p};
      conds.push_back(build_condition(s, pos));
    }
    for (std::size_t v = 0; v < count; ++v) items.push_back({&layout.boundary, &conds[v], &s, 1 + begin + v});
    const DecodedBatch out = model.forward(items);

    std::vector<std::size_t> class_rows, class_pos, scalar_rows, scalar_pos;
    for (std::size_t v = 0; v < count; ++v) {
      const std::size_t p = 1 + begin + v;
      const std::size_t row = out.row_offset[v] + p - 1;
      if (s.attr[p] == kClass) {
        class_rows.push_back(row);
        class_pos.push_back(p);
      } else {
        scalar_rows.push_back(row);
        scalar_pos.push_back(p);
      }
    }
    auto record = [&](std::size_t p, double lp) {
      ObjectScore& o = scores[s.obj[p]];
      o.token_log_probs[s.attr[p]] = lp;
    };
    if (!class_rows.empty()) {
      Tensor logits = model.class_head(gather_rows(out.hidden, class_rows));
      for (std::size_t r = 0; r < class_rows.size(); ++r) {
        CategoricalParams cp;
        cp.logits.assign(logits.values().begin() + static_cast<std::ptrdiff_t>(r * (n + 1)),
                         logits.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * (n + 1)));
        record(class_pos[r], categorical_log_prob(s.tokens[class_pos[r]].cls, cp));
      }
    }
    if (!scalar_rows.empty()) {
      Tensor raw = model.mixture_head(gather_rows(out.hidden, scalar_rows));
      const std::size_t w = raw.cols();
      for (std::size_t r = 0; r < scalar_rows.size(); ++r) {
        auto mp = LogisticMixtureParams::from_raw(raw.values().subspan(r * w, w));
        record(scalar_pos[r], logistic_mixture_log_prob(s.tokens[scalar_pos[r]].scalar, mp));
      }
    }
  }
  for (auto& o : scores) {
    o.total = 0.0;
    for (double lp : o.token_log_probs) o.total += lp;
  }
  return scores;
}

std::vector<ObjectScore> rank_by_score(std::vector<ObjectScore> scores) {
  std::stable_sort(scores.begin(), scores.end(), [](const ObjectScore& a, const ObjectScore& b) {
    return a.total < b.total || (a.total == b.total && a.slot < b.slot);
  });
  return scores;
}

ResamplePlan plan_resample(const AttributeNormalizer& normalizer, const Layout& layout, std::size_t slot,
                           std::span<const std::size_t> keep, std::size_t max_objects) {
  const std::size_t k = layout.boxes.size();
  if (slot >= k) throw std::invalid_argument("resample: slot " + std::to_string(slot) + " out of range");
  if (k > max_objects) throw CapacityError("resample: layout exceeds capacity");
  ResamplePlan plan;
  for (std::size_t i = 0; i < k; ++i)
    if (i != slot) plan.permutation.push_back(i);
  plan.permutation.push_back(slot);
  const TokenSequence s = flatten(layout, plan.permutation, normalizer, max_objects);
  plan.spec.object_count = k;
  for (std::size_t j = 0; j + 1 < k; ++j)
    for (std::size_t a = 0; a < kAttrCount; ++a) plan.spec.fixed.push_back({j, a, s.tokens[token_position(j, a)]});
  for (std::size_t a : keep) {
    if (a >= kAttrCount) throw std::invalid_argument("resample: attribute out of range");
    plan.spec.set(k - 1, a, s.tokens[token_position(k - 1, a)]);
  }
  return plan;
}

SampleResult resample_object(const Model& model, const AttributeNormalizer& normalizer, const Layout& layout,
                             std::size_t slot, std::span<const std::size_t> keep, Rng& rng,
                             const SampleOptions& options) {
  const ResamplePlan plan = plan_resample(normalizer, layout, slot, keep, model.config().max_objects);
  SampleResult r = sample_cofs(model, normalizer, layout.boundary, plan.spec, rng, options);
  // Other objects go back verbatim rather than through a normalize round trip.
  Layout out = layout;
  out.boxes[slot] = r.layout.boxes.back();
  for (std::size_t a : keep) {
    if (a == kClass) continue;
    set_box_scalar(out.boxes[slot], a, box_scalar(layout.boxes[slot], a));
  }
  r.layout = std::move(out);
  return r;
}

}  // namespace cofs
