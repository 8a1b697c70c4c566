#include <gtest/gtest.h>

#include <cmath>

#include "cofs/distributions.hpp"
#include "cofs/sampling.hpp"
#include "fixtures.hpp"

using namespace cofs;
using namespace cofs::testing;

namespace {

Tensor param_named(const Model& m, const std::string& name) {
  for (auto& [n, t] : m.named_parameters())
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

void bias_end_symbol(const Model& m, double value) {
  Tensor b = param_named(m, "head.class.b");
  b.mutable_values()[m.config().num_classes] = value;
}

bool same_token(const TokenValue& a, const TokenValue& b) {
  return a.kind == b.kind && a.cls == b.cls && a.scalar == b.scalar;
}

ConstraintSpec random_spec(Rng& rng, std::size_t k, std::size_t classes) {
  ConstraintSpec spec;
  spec.object_count = k;
  for (std::size_t slot = 0; slot < k; ++slot) {
    for (std::size_t a = 0; a < kAttrCount; ++a) {
      if (rng.uniform() < 0.5) continue;
      if (a == kClass)
        spec.set(slot, a, TokenValue::of_class(rng.uniform_index(classes)));
      else
        spec.set(slot, a, TokenValue::of_scalar(rng.uniform(-1.0, 1.0)));
    }
  }
  return spec;
}

}  // namespace

TEST(ConstraintSpec, ValidateRejectsBadEntries) {
  ConstraintSpec spec;
  spec.object_count = 2;
  spec.fixed = {{0, kClass, TokenValue::of_class(1)}};
  EXPECT_NO_THROW(spec.validate(3, 4));
  spec.fixed = {{2, kClass, TokenValue::of_class(1)}};
  EXPECT_THROW(spec.validate(3, 4), std::invalid_argument);
  spec.fixed = {{0, kClass, TokenValue::of_class(3)}};
  EXPECT_THROW(spec.validate(3, 4), std::invalid_argument);
  spec.fixed = {{0, 1, TokenValue::of_class(0)}};
  EXPECT_THROW(spec.validate(3, 4), std::invalid_argument);
  spec.fixed = {{0, 8, TokenValue::of_scalar(0.0)}};
  EXPECT_THROW(spec.validate(3, 4), std::invalid_argument);
  spec.fixed = {{0, 2, TokenValue::of_scalar(std::nan(""))}};
  EXPECT_THROW(spec.validate(3, 4), std::invalid_argument);
  spec.fixed.clear();
  spec.object_count = 5;
  EXPECT_THROW(spec.validate(3, 4), CapacityError);
}

TEST(ConstraintSpec, SetReplacesExisting) {
  ConstraintSpec spec;
  spec.object_count = 1;
  spec.set(0, 2, TokenValue::of_scalar(0.1));
  spec.set(0, 2, TokenValue::of_scalar(0.3));
  ASSERT_EQ(spec.fixed.size(), 1u);
  EXPECT_EQ(spec.fixed[0].value.scalar, 0.3);
}

TEST(ConstraintSpec, WorldConstraintNormalizes) {
  const auto norm = unit_normalizer();
  const Constraint c = world_constraint(norm, 1, 1, 0.75);
  EXPECT_EQ(c.slot, 1u);
  EXPECT_EQ(c.value.kind, TokenKind::Scalar);
  EXPECT_NEAR(c.value.scalar, 0.5, 1e-12);  // 0.75 on [-1.5, 1.5]
  EXPECT_EQ(world_constraint(norm, 0, kClass, 2.0).value.cls, 2u);
  EXPECT_THROW(world_constraint(norm, 0, kClass, 1.5), std::invalid_argument);
}

TEST(ConditionFromSpec, LayoutOfStreams) {
  ConstraintSpec spec;
  spec.object_count = 2;
  spec.set(1, 3, TokenValue::of_scalar(-0.25));
  const TokenSequence c = condition_from_spec(spec);
  ASSERT_EQ(c.size(), 18u);
  EXPECT_EQ(c.tokens[0].kind, TokenKind::Sos);
  EXPECT_EQ(c.tokens[17].kind, TokenKind::Eos);
  std::size_t masks = 0;
  for (std::size_t i = 1; i < 17; ++i) {
    EXPECT_EQ(c.obj[i], (i - 1) / 8);
    EXPECT_EQ(c.attr[i], (i - 1) % 8);
    EXPECT_EQ(c.pos[i], i);
    masks += c.tokens[i].is_mask();
  }
  EXPECT_EQ(masks, 15u);
  EXPECT_EQ(c.tokens[token_position(1, 3)].scalar, -0.25);
  EXPECT_NO_THROW(c.validate());
}

TEST(SampleCofs, ConstrainedTokensCopiedVerbatim) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 11);
  const auto norm = unit_normalizer();
  const BoundaryRaster room = room_raster(cfg.raster_side, 2);
  Rng spec_rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const ConstraintSpec spec = random_spec(spec_rng, 1 + spec_rng.uniform_index(4), 3);
    Rng rng(100 + trial);
    const SampleResult r = sample_cofs(model, norm, room, spec, rng);
    ASSERT_EQ(r.sequence.size(), sequence_length(spec.object_count));
    ASSERT_EQ(r.layout.boxes.size(), spec.object_count);
    for (const auto& c : spec.fixed) {
      EXPECT_TRUE(same_token(r.sequence.tokens[token_position(c.slot, c.attr)], c.value));
    }
    for (std::size_t i = 1; i + 1 < r.sequence.size(); ++i) EXPECT_FALSE(r.sequence.tokens[i].is_mask());
  }
}

TEST(SampleCofs, FastPathMatchesFullPath) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 12);
  const auto norm = unit_normalizer();
  const BoundaryRaster room = room_raster(cfg.raster_side, 3);
  Rng spec_rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const ConstraintSpec spec = random_spec(spec_rng, 3, 3);
    Rng a(trial), b(trial);
    const SampleResult fast = sample_cofs(model, norm, room, spec, a, {1.0, true});
    const SampleResult full = sample_cofs(model, norm, room, spec, b, {1.0, false});
    for (std::size_t i = 0; i < fast.sequence.size(); ++i)
      EXPECT_TRUE(same_token(fast.sequence.tokens[i], full.sequence.tokens[i])) << i;
  }
}

TEST(SampleCofs, DeterministicForSeed) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 13);
  const auto norm = unit_normalizer();
  const BoundaryRaster room = room_raster(cfg.raster_side, 2);
  ConstraintSpec spec;
  spec.object_count = 3;
  Rng a(77), b(77), c(78);
  const auto ra = sample_cofs(model, norm, room, spec, a);
  const auto rb = sample_cofs(model, norm, room, spec, b);
  const auto rc = sample_cofs(model, norm, room, spec, c);
  bool differs = false;
  for (std::size_t i = 0; i < ra.sequence.size(); ++i) {
    EXPECT_TRUE(same_token(ra.sequence.tokens[i], rb.sequence.tokens[i]));
    differs |= !same_token(ra.sequence.tokens[i], rc.sequence.tokens[i]);
  }
  EXPECT_TRUE(differs);
}

TEST(SampleCofs, NeverDrawsEndSymbol) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 14);
  bias_end_symbol(model, 50.0);
  ConstraintSpec spec;
  spec.object_count = 4;
  Rng rng(1);
  const auto r = sample_cofs(model, unit_normalizer(), room_raster(cfg.raster_side, 2), spec, rng);
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const auto& t = r.sequence.tokens[token_position(slot, kClass)];
    EXPECT_EQ(t.kind, TokenKind::Class);
    EXPECT_LT(t.cls, 3u);
  }
}

TEST(SampleCofs, SampledScalarsClippedConstrainedKept) {
  const auto cfg = tiny_config(3, 2);
  Model model(cfg, 15);
  // Large mixture offsets push samples far outside [-1, 1].
  Tensor b = param_named(model, "head.mix3.b");
  const std::size_t t = cfg.mixture_components;
  for (std::size_t i = 0; i < t; ++i) b.mutable_values()[t + i] = 40.0;
  const auto norm = unit_normalizer();
  ConstraintSpec spec;
  spec.object_count = 2;
  spec.set(0, 1, TokenValue::of_scalar(1.4));
  Rng rng(3);
  const auto r = sample_cofs(model, norm, room_raster(cfg.raster_side, 2), spec, rng);
  EXPECT_NEAR(r.layout.boxes[0].t[0], norm.denormalize(0, 1.4), 1e-12);
  EXPECT_NEAR(r.layout.boxes[1].t[0], 1.5, 1e-12);
  EXPECT_NEAR(r.layout.boxes[0].t[2], 1.5, 1e-12);
}

TEST(SampleCofs, CapacityError) {
  const auto cfg = tiny_config(3, 2);
  Model model(cfg, 16);
  ConstraintSpec spec;
  spec.object_count = 3;
  Rng rng(1);
  EXPECT_THROW(sample_cofs(model, unit_normalizer(), room_raster(cfg.raster_side, 2), spec, rng), CapacityError);
}

TEST(SampleStandard, StopsAtEndSymbol) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 17);
  bias_end_symbol(model, 60.0);
  ConstraintSpec empty;
  Rng rng(2);
  const auto r = sample_standard(model, unit_normalizer(), room_raster(cfg.raster_side, 2), condition_from_spec(empty),
                                 rng, cfg.capacity());
  EXPECT_FALSE(r.truncated);
  EXPECT_EQ(r.sequence.size(), 2u);
  EXPECT_TRUE(r.layout.boxes.empty());
}

TEST(SampleStandard, TruncatesAtMaxLen) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 18);
  bias_end_symbol(model, -60.0);
  ConstraintSpec empty;
  Rng rng(2);
  const auto room = room_raster(cfg.raster_side, 2);
  const auto cond = condition_from_spec(empty);
  const auto full = sample_standard(model, unit_normalizer(), room, cond, rng, 1000);
  EXPECT_TRUE(full.truncated);
  EXPECT_EQ(full.layout.boxes.size(), 4u);
  EXPECT_NO_THROW(full.sequence.validate());
  const auto cut = sample_standard(model, unit_normalizer(), room, cond, rng, 12);
  EXPECT_TRUE(cut.truncated);
  EXPECT_EQ(cut.layout.boxes.size(), 1u);
  EXPECT_EQ(cut.sequence.size(), 10u);
}

TEST(CompleteScene, KeepsExistingObjects) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 19);
  const auto norm = unit_normalizer();
  Rng lrng(4);
  const Layout base = random_room(lrng, 2, 3, cfg.raster_side);
  Rng rng(5);
  const auto r = complete_scene(model, norm, base.boundary, base.boxes, 2, rng);
  ASSERT_EQ(r.layout.boxes.size(), 4u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(r.layout.boxes[i].cls, base.boxes[i].cls);
    for (std::size_t a = 1; a < kAttrCount; ++a)
      EXPECT_NEAR(box_scalar(r.layout.boxes[i], a), box_scalar(base.boxes[i], a), 1e-9);
  }
  EXPECT_THROW(complete_scene(model, norm, base.boundary, base.boxes, 3, rng), CapacityError);
}

TEST(ScoreTokens, MatchesSingleItemOracle) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 20);
  const auto norm = unit_normalizer();
  Rng lrng(6);
  const Layout layout = random_room(lrng, 3, 3, cfg.raster_side);
  const auto scores = score_tokens(model, norm, layout, 5);
  ASSERT_EQ(scores.size(), 3u);

  const TokenSequence s = flatten(layout, norm, cfg.max_objects);
  for (std::size_t slot = 0; slot < 3; ++slot) {
    double total = 0.0;
    for (std::size_t a = 0; a < kAttrCount; ++a) {
      const std::size_t p = token_position(slot, a);
      TokenSequence c = s;
      c.tokens[p] = TokenValue::mask();
      const Tensor memory = model.encode(layout.boundary, c);
      const Tensor h = slice_rows(model.decode(s, p, memory), p - 1, 1);
      double expected;
      if (a == kClass) {
        const Tensor logits = model.class_head(h);
        double mx = -1e300;
        for (double v : logits.values()) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : logits.values()) z += std::exp(v - mx);
        expected = logits.at(s.tokens[p].cls) - mx - std::log(z);
      } else {
        const Tensor raw = model.mixture_head(h);
        expected = logistic_mixture_log_prob(s.tokens[p].scalar, LogisticMixtureParams::from_raw(raw.values()));
      }
      EXPECT_NEAR(scores[slot].token_log_probs[a], expected, 1e-9) << slot << "," << a;
      total += expected;
    }
    EXPECT_NEAR(scores[slot].total, total, 1e-8);
  }
}

TEST(ScoreTokens, ChunkSizeDoesNotMatter) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 21);
  Rng lrng(7);
  const Layout layout = random_room(lrng, 4, 3, cfg.raster_side);
  const auto a = score_tokens(model, unit_normalizer(), layout, 1);
  const auto b = score_tokens(model, unit_normalizer(), layout, 100);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i].total, b[i].total, 1e-9);
  Layout empty;
  empty.boundary = layout.boundary;
  EXPECT_TRUE(score_tokens(model, unit_normalizer(), empty).empty());
}

TEST(RankByScore, AscendingStableOnTies) {
  std::vector<ObjectScore> s(4);
  const double totals[] = {-1.0, -5.0, -1.0, 2.0};
  for (std::size_t i = 0; i < 4; ++i) {
    s[i].slot = i;
    s[i].total = totals[i];
  }
  const auto r = rank_by_score(s);
  EXPECT_EQ(r[0].slot, 1u);
  EXPECT_EQ(r[1].slot, 0u);
  EXPECT_EQ(r[2].slot, 2u);
  EXPECT_EQ(r[3].slot, 3u);
}

TEST(Resample, PlanMovesTargetLast) {
  const auto norm = unit_normalizer();
  Rng lrng(8);
  const Layout layout = random_room(lrng, 3, 3, 16);
  const std::size_t keep[] = {kClass, 7};
  const auto plan = plan_resample(norm, layout, 0, keep, 4);
  EXPECT_EQ(plan.permutation, (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(plan.spec.object_count, 3u);
  EXPECT_EQ(plan.spec.fixed.size(), 18u);
  EXPECT_THROW(plan_resample(norm, layout, 3, keep, 4), std::invalid_argument);
}

TEST(Resample, OthersAndKeptAttributesUnchanged) {
  const auto cfg = tiny_config(3, 4);
  Model model(cfg, 22);
  const auto norm = unit_normalizer();
  Rng lrng(9);
  const Layout layout = random_room(lrng, 3, 3, cfg.raster_side);
  const std::size_t keep[] = {kClass, 5};
  Rng rng(10);
  const auto r = resample_object(model, norm, layout, 1, keep, rng);
  ASSERT_EQ(r.layout.boxes.size(), 3u);
  for (std::size_t i : {0u, 2u}) {
    EXPECT_EQ(r.layout.boxes[i].cls, layout.boxes[i].cls);
    EXPECT_EQ(r.layout.boxes[i].t, layout.boxes[i].t);
    EXPECT_EQ(r.layout.boxes[i].e, layout.boxes[i].e);
    EXPECT_EQ(r.layout.boxes[i].r, layout.boxes[i].r);
  }
  EXPECT_EQ(r.layout.boxes[1].cls, layout.boxes[1].cls);
  EXPECT_EQ(r.layout.boxes[1].e[1], layout.boxes[1].e[1]);
  EXPECT_NE(r.layout.boxes[1].t[0], layout.boxes[1].t[0]);
}
