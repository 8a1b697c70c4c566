#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "cofs/distributions.hpp"
#include "cofs/model.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace cofs;
using namespace cofs::testing;

namespace {

Tensor param_named(const Model& m, const std::string& name) {
  for (auto& [n, t] : m.named_parameters())
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

double max_row_diff(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a.at(ra, j) - b.at(rb, j)));
  return m;
}

struct Sample {
  Layout layout;
  TokenSequence seq;
  TokenSequence cond;
};

Sample make_sample(std::uint64_t seed, std::size_t k, const ModelConfig& cfg) {
  Rng rng(seed);
  Sample s;
  s.layout = random_room(rng, k, cfg.num_classes, cfg.raster_side);
  s.seq = flatten(s.layout, unit_normalizer(), cfg.max_objects);
  s.cond = build_condition(s.seq, 0.5, rng);
  return s;
}

}  // namespace

TEST(Gamma, ScalarZeroIsSinCosPattern) {
  Model m(tiny_config(), 1);
  Tensor g = m.gamma(TokenValue::of_scalar(0.0));
  ASSERT_EQ(g.shape(), (Shape{1, 16}));
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(g.at(j), j % 2 == 0 ? 0.0 : 1.0);
}

TEST(Gamma, Parity) {
  Model m(tiny_config(), 1);
  Tensor a = m.gamma(TokenValue::of_scalar(0.37)), b = m.gamma(TokenValue::of_scalar(-0.37));
  for (std::size_t j = 0; j < 16; ++j) {
    if (j % 2 == 0) EXPECT_EQ(a.at(j), -b.at(j));
    else EXPECT_EQ(a.at(j), b.at(j));
  }
}

TEST(Gamma, MaskIsLearnedRow) {
  Model m(tiny_config(), 1);
  Tensor table = param_named(m, "embed.class");
  Tensor g = m.gamma(TokenValue::mask());
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(g.at(j), table.at(3, j));
}

TEST(EmbedEncoder, ShapeAndAdditivity) {
  auto cfg = tiny_config();
  Model m(cfg, 2);
  Sample s = make_sample(1, 3, cfg);
  Tensor x = m.embed_encoder(s.seq);
  EXPECT_EQ(x.shape(), (Shape{2 + 8 * 3, 16}));

  TokenSequence dup = s.seq;
  dup.tokens[token_position(1, kTx)] = dup.tokens[token_position(0, kTx)];
  dup.obj[token_position(1, kTx)] = 0;
  Tensor y = m.embed_encoder(dup);
  EXPECT_EQ(max_row_diff(y, token_position(0, kTx), y, token_position(1, kTx)), 0.0);

  TokenSequence moved = s.seq;
  const std::size_t p = token_position(1, kEz);
  moved.obj[p] = 3;
  Tensor z = m.embed_encoder(moved);
  Tensor eo = param_named(m, "embed.object");
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_NEAR(z.at(p, j) - x.at(p, j), eo.at(3, j) - eo.at(1, j), 1e-15);
  }
}

TEST(EmbedEncoder, SpecialTokensSkipObjectAndAttributeRows) {
  auto cfg = tiny_config();
  Model m(cfg, 2);
  Sample s = make_sample(2, 1, cfg);
  Tensor x = m.embed_encoder(s.seq);
  Tensor special = param_named(m, "embed.special");
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_EQ(x.at(0, j), special.at(0, j));
    EXPECT_EQ(x.at(9, j), special.at(1, j));
  }
}

TEST(EmbedEncoder, RejectsInconsistentStreams) {
  auto cfg = tiny_config();
  Model m(cfg, 2);
  Sample s = make_sample(3, 2, cfg);
  s.seq.obj.pop_back();
  EXPECT_THROW(m.embed_encoder(s.seq), std::invalid_argument);
}

TEST(EmbedDecoder, ShapeAndPositionAdditivity) {
  auto cfg = tiny_config();
  Model m(cfg, 3);
  Sample s = make_sample(4, 2, cfg);
  Tensor x = m.embed_decoder(s.seq, 7);
  EXPECT_EQ(x.shape(), (Shape{7, 16}));
  EXPECT_EQ(m.embed_decoder(s.seq, s.seq.size()).rows(), 18u);

  TokenSequence same = s.seq;
  same.tokens[2] = same.tokens[1];
  same.pos[2] = same.pos[1];
  same.attr[2] = same.attr[1];
  Tensor y = m.embed_decoder(same, 3);
  EXPECT_EQ(max_row_diff(y, 1, y, 2), 0.0);

  TokenSequence shifted = s.seq;
  shifted.pos[3] = 10;
  Tensor z = m.embed_decoder(shifted, 7);
  Tensor ep = param_named(m, "embed.position");
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(z.at(3, j) - x.at(3, j), ep.at(10, j) - ep.at(3, j), 1e-15);
}

TEST(BoundaryEncoder, NonDegenerateShapedDeterministic) {
  auto cfg = tiny_config();
  Model m(cfg, 4), m2(cfg, 4);
  BoundaryRaster zeros(16, 16, 0.25), ones(16, 16, 0.25);
  std::fill(ones.bits.begin(), ones.bits.end(), 1);
  Tensor a = m.boundary_encode(zeros), b = m.boundary_encode(ones);
  EXPECT_EQ(a.shape(), (Shape{1, 16}));
  EXPECT_GT(max_row_diff(a, 0, b, 0), 1e-6);
  Tensor c = m2.boundary_encode(ones);
  EXPECT_EQ(max_row_diff(b, 0, c, 0), 0.0);
  EXPECT_THROW(m.boundary_encode(BoundaryRaster(8, 8, 0.25)), std::invalid_argument);
}

TEST(Encoder, ObjectPermutationEquivariance) {
  auto cfg = tiny_config();
  Model m(cfg, 5);
  Sample s = make_sample(5, 3, cfg);
  const std::vector<std::size_t> id = {0, 1, 2}, perm = {2, 0, 1};
  TokenSequence c1 = build_condition(flatten(s.layout, id, unit_normalizer(), 4), std::vector<std::size_t>{3, 12});
  // Same objects in a different order, keeping each object's O label.
  TokenSequence c2 = flatten(s.layout, perm, unit_normalizer(), 4);
  for (std::size_t slot = 0; slot < 3; ++slot) {
    for (std::size_t a = 0; a < 8; ++a) {
      const std::size_t p = token_position(slot, a);
      c2.obj[p] = perm[slot];
      if (c1.tokens[token_position(perm[slot], a)].is_mask()) c2.tokens[p] = TokenValue::mask();
    }
  }
  Tensor e1 = m.encode(s.layout.boundary, c1), e2 = m.encode(s.layout.boundary, c2);
  ASSERT_EQ(e1.rows(), 1 + c1.size());
  double worst = max_row_diff(e1, 0, e2, 0);
  worst = std::max(worst, max_row_diff(e1, 1, e2, 1));
  worst = std::max(worst, max_row_diff(e1, c1.size(), e2, c2.size()));
  for (std::size_t slot = 0; slot < 3; ++slot)
    for (std::size_t a = 0; a < 8; ++a)
      worst = std::max(worst, max_row_diff(e1, 1 + token_position(perm[slot], a), e2, 1 + token_position(slot, a)));
  EXPECT_LE(worst, 1e-6);
}

TEST(Encoder, SensitiveToConditionTokens) {
  auto cfg = tiny_config();
  Model m(cfg, 6);
  Sample s = make_sample(6, 2, cfg);
  Tensor a = m.encode(s.layout.boundary, s.seq);
  TokenSequence changed = s.seq;
  changed.tokens[token_position(1, kTz)].scalar += 0.3;
  Tensor b = m.encode(s.layout.boundary, changed);
  double worst = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) worst = std::max(worst, max_row_diff(a, r, b, r));
  EXPECT_GT(worst, 1e-6);
}

TEST(Decoder, Causality) {
  auto cfg = tiny_config();
  Model m(cfg, 7);
  Sample s = make_sample(7, 3, cfg);
  Tensor mem = m.encode(s.layout.boundary, s.cond);
  Tensor h1 = m.decode(s.seq, s.seq.size(), mem);
  for (std::size_t j : {5u, 13u, 20u}) {
    TokenSequence alt = s.seq;
    if (alt.tokens[j].kind == TokenKind::Scalar) alt.tokens[j].scalar = -alt.tokens[j].scalar + 0.1;
    else alt.tokens[j].cls = (alt.tokens[j].cls + 1) % 3;
    Tensor h2 = m.decode(alt, alt.size(), mem);
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < j; ++i) before = std::max(before, max_row_diff(h1, i, h2, i));
    for (std::size_t i = j; i < alt.size(); ++i) after = std::max(after, max_row_diff(h1, i, h2, i));
    EXPECT_LE(before, 1e-12);
    EXPECT_GT(after, 0.0);
  }
  // A shorter prefix reproduces the same rows.
  Tensor h3 = m.decode(s.seq, 6, mem);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_LE(max_row_diff(h1, i, h3, i), 1e-12);
}

TEST(Decoder, FirstPositionSeesWholeCondition) {
  auto cfg = tiny_config();
  Model m(cfg, 8);
  Sample s = make_sample(8, 3, cfg);
  Tensor base = m.decode(s.seq, 1, m.encode(s.layout.boundary, s.seq));
  TokenSequence alt = s.seq;
  alt.tokens[token_position(2, kRot)] = TokenValue::mask();
  Tensor changed = m.decode(s.seq, 1, m.encode(s.layout.boundary, alt));
  EXPECT_GT(max_row_diff(base, 0, changed, 0), 1e-9);
}

TEST(Heads, Arity) {
  auto cfg = tiny_config();
  Model m(cfg, 9);
  Sample s = make_sample(9, 2, cfg);
  Tensor h = m.decode(s.seq, 4, m.encode(s.layout.boundary, s.cond));
  EXPECT_EQ(m.class_head(h).shape(), (Shape{4, cfg.num_classes + 1}));
  EXPECT_EQ(m.mixture_head(h).shape(), (Shape{4, 3 * cfg.mixture_components}));
}

TEST(Batch, PackedMatchesIndividual) {
  auto cfg = tiny_config();
  Model m(cfg, 10);
  Sample a = make_sample(10, 2, cfg), b = make_sample(11, 3, cfg);
  std::vector<ForwardItem> items = {{&a.layout.boundary, &a.cond, &a.seq, 9},
                                    {&b.layout.boundary, &b.cond, &b.seq, b.seq.size()}};
  DecodedBatch out = m.forward(items);
  Tensor ha = m.decode(a.seq, 9, m.encode(a.layout.boundary, a.cond));
  Tensor hb = m.decode(b.seq, b.seq.size(), m.encode(b.layout.boundary, b.cond));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_LE(max_row_diff(out.hidden, i, ha, i), 1e-12);
  for (std::size_t i = 0; i < hb.rows(); ++i) EXPECT_LE(max_row_diff(out.hidden, out.row_offset[1] + i, hb, i), 1e-12);
}

TEST(Model, EndToEndGradcheck) {
  auto cfg = tiny_config();
  Model m(cfg, 11);
  Sample s = make_sample(12, 2, cfg);
  auto loss = [&] {
    Tensor h = m.decode(s.seq, s.seq.size() - 1, m.encode(s.layout.boundary, s.cond));
    std::vector<std::size_t> class_rows, class_targets, scalar_rows;
    std::vector<double> scalar_targets;
    for (std::size_t i = 0; i + 1 < s.seq.size(); ++i) {
      const TokenValue& next = s.seq.tokens[i + 1];
      if (next.kind == TokenKind::Scalar) {
        scalar_rows.push_back(i);
        scalar_targets.push_back(next.scalar);
      } else {
        class_rows.push_back(i);
        class_targets.push_back(next.kind == TokenKind::Class ? next.cls : cfg.end_symbol());
      }
    }
    Tensor ce = cross_entropy_sum(m.class_head(gather_rows(h, class_rows)), class_targets);
    Tensor nll = logistic_mixture_nll_sum(m.mixture_head(gather_rows(h, scalar_rows)), scalar_targets);
    return add(ce, nll);
  };
  // Ten parameter entries drawn across the network.
  Rng pick(3);
  auto params = m.named_parameters();
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    Tensor p = params[pick.uniform_index(params.size())].second;
    worst = std::max(worst, gradcheck(loss, {p}, 1e-6, 1, 100 + i).max_rel_error);
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Model, ParameterCounts) {
  Model full(ModelConfig::full_scale(6), 0);
  Model desk(ModelConfig::desk(6), 0);
  EXPECT_GT(full.parameter_count(), desk.parameter_count());
  std::size_t named = 0;
  for (auto& [n, t] : desk.named_parameters()) named += t.numel();
  EXPECT_EQ(named, desk.parameter_count());
}

TEST(Model, ConfigValidation) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(Model(cfg, 0), std::invalid_argument);
}

TEST(Checkpoint, RoundTripReproducesLogits) {
  auto cfg = tiny_config();
  Model a(cfg, 12), b(cfg, 99);
  std::stringstream ss;
  a.save_weights(ss);
  b.load_weights(ss);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i].second.values(), vb = pb[i].second.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end())) << pa[i].first;
  }
  Sample s = make_sample(13, 2, cfg);
  Tensor la = a.class_head(a.decode(s.seq, 5, a.encode(s.layout.boundary, s.cond)));
  Tensor lb = b.class_head(b.decode(s.seq, 5, b.encode(s.layout.boundary, s.cond)));
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la.at(i), lb.at(i));
}

TEST(Checkpoint, CorruptionAndMismatchAreErrors) {
  auto cfg = tiny_config();
  Model a(cfg, 1);
  std::stringstream ss;
  a.save_weights(ss);
  const std::string bytes = ss.str();

  Model target(cfg, 2);
  const auto before = param_named(target, "head.class.w").at(0);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(target.load_weights(truncated), std::runtime_error);
  EXPECT_EQ(param_named(target, "head.class.w").at(0), before);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream bm(bad_magic);
  EXPECT_THROW(target.load_weights(bm), std::runtime_error);

  std::string bad_version = bytes;
  bad_version[8] = 9;
  std::stringstream bv(bad_version);
  EXPECT_THROW(target.load_weights(bv), std::runtime_error);

  auto other = cfg;
  other.num_classes = 4;
  Model wrong(other, 1);
  std::stringstream again(bytes);
  EXPECT_THROW(wrong.load_weights(again), std::runtime_error);
}

TEST(Checkpoint, BundleRoundTrip) {
  auto cfg = tiny_config();
  ModelBundle bundle{Model(cfg, 3), ClassSchema{{"a", "b", "c"}}, unit_normalizer()};
  const auto path = (std::filesystem::temp_directory_path() / "cofs_bundle_test.bin").string();
  save_bundle(path, bundle);
  ModelBundle back = load_bundle(path);
  EXPECT_EQ(back.model.config(), cfg);
  EXPECT_EQ(back.schema, bundle.schema);
  EXPECT_EQ(back.normalizer, bundle.normalizer);
  std::filesystem::remove(path);
}

TEST(Model, CloneIsIndependent) {
  Model a(tiny_config(), 4);
  Model b = a.clone();
  param_named(b, "head.class.w").mutable_values()[0] += 1.0;
  EXPECT_NE(param_named(a, "head.class.w").at(0), param_named(b, "head.class.w").at(0));
}
