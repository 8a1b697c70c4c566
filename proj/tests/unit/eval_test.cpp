#include <gtest/gtest.h>

#include <cmath>

#include <json.hpp>

#include "cofs/eval.hpp"
#include "cofs/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cofs;
using namespace cofs::testing;

namespace {

BoundingBox box_at(std::size_t cls, double x, double z, double ex, double ez, double r = 0.0) {
  BoundingBox b;
  b.cls = cls;
  b.t = {x, 0.5, z};
  b.e = {ex, 1.0, ez};
  b.r = r;
  return b;
}

ClassHistogram random_histogram(Rng& rng, std::size_t n) {
  ClassHistogram h{std::vector<double>(n)};
  double s = 0.0;
  for (auto& p : h.probs) {
    // Some exact zeros to exercise the epsilon floor.
    p = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    s += p;
  }
  if (s == 0.0) h.probs[0] = s = 1.0;
  for (auto& p : h.probs) p /= s;
  return h;
}

}  // namespace

TEST(ClassKl, HandValue) {
  const ClassHistogram gt{{1.0, 0.0}}, gen{{0.5, 0.5}};
  const long double expected = std::log(1.000001L / 0.500001L);
  EXPECT_NEAR(class_kl(gt, gen), static_cast<double>(expected), 1e-9);
  EXPECT_NEAR(class_kl(gt, gen), 0.693146, 1e-6);
}

TEST(ClassKl, MatchesLongDoubleOracle) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + rng.uniform_index(20);
    const auto a = random_histogram(rng, n), b = random_histogram(rng, n);
    long double kl = 0.0L;
    for (std::size_t j = 0; j < n; ++j) {
      const long double g = a.probs[j], q = b.probs[j];
      kl += g * std::log((g + 1e-6L) / (q + 1e-6L));
    }
    EXPECT_NEAR(class_kl(a, b), static_cast<double>(kl), 1e-9);
  }
}

TEST(ClassKl, ZeroOnIdenticalAndBoundedBelow) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 2 + rng.uniform_index(30);
    const auto a = random_histogram(rng, n), b = random_histogram(rng, n);
    EXPECT_NEAR(class_kl(a, a), 0.0, 1e-12);
    // Log-sum inequality on the shifted histograms leaves only the
    // -eps * sum ln(...) remainder, each term at most ln((1 + eps) / eps).
    const double floor = -static_cast<double>(n) * kKlEpsilon * std::log((1.0 + kKlEpsilon) / kKlEpsilon);
    EXPECT_GE(class_kl(a, b), floor);
  }
}

TEST(ClassKl, SchemaMismatchThrows) {
  EXPECT_THROW(class_kl(ClassHistogram{{1.0}}, ClassHistogram{{0.5, 0.5}}), std::invalid_argument);
}

TEST(Histogram, PooledOverObjects) {
  Layout a, b;
  a.boxes = {box_at(0, 0, 0, 1, 1), box_at(0, 0, 0, 1, 1), box_at(1, 0, 0, 1, 1)};
  b.boxes = {box_at(2, 0, 0, 1, 1)};
  const std::vector<Layout> set{a, b};
  const auto h = class_histogram(set, 3);
  EXPECT_DOUBLE_EQ(h.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(h.probs[1], 0.25);
  EXPECT_DOUBLE_EQ(h.probs[2], 0.25);
  EXPECT_EQ(class_histogram({}, 3).probs, std::vector<double>(3, 0.0));
  EXPECT_THROW(class_histogram(set, 2), std::invalid_argument);
}

TEST(Diagnostics, HandCases) {
  Layout same;
  same.boundary = room_raster(16, 2);
  same.boxes = {box_at(0, 0.2, 0.2, 0.5, 0.5), box_at(0, 0.2, 0.2, 0.5, 0.5)};
  EXPECT_TRUE(has_overlap(same));

  Layout touching = same;
  touching.boxes[1].t[0] = 0.7;
  EXPECT_FALSE(has_overlap(touching));

  Layout outside = touching;
  outside.boxes[1].t[0] = 1.6;
  EXPECT_TRUE(has_center_outside(outside));
  EXPECT_FALSE(has_center_outside(touching));

  const std::vector<Layout> set{same, touching, outside, touching};
  const Diagnostics d = diagnostics(set);
  EXPECT_DOUBLE_EQ(d.overlap_rate, 0.25);
  EXPECT_DOUBLE_EQ(d.out_of_boundary_rate, 0.25);
  EXPECT_DOUBLE_EQ(d.mean_objects, 2.0);
  EXPECT_EQ(diagnostics({}).mean_objects, 0.0);
}

TEST(Diagnostics, AgreesWithSatOracle) {
  Rng rng(3);
  std::size_t overlapping = 0;
  for (int i = 0; i < 100; ++i) {
    Layout l = random_room(rng, 2 + rng.uniform_index(5), 3);
    bool expected = false;
    for (std::size_t a = 0; a < l.boxes.size(); ++a)
      for (std::size_t b = a + 1; b < l.boxes.size(); ++b) expected |= sat_overlap(l.boxes[a], l.boxes[b]);
    EXPECT_EQ(has_overlap(l), expected) << i;
    overlapping += expected;

    bool out = false;
    for (const auto& b : l.boxes) {
      const auto& r = l.boundary;
      const double col = b.t[0] / r.cell + 0.5 * static_cast<double>(r.width);
      const double row = b.t[2] / r.cell + 0.5 * static_cast<double>(r.height);
      out |= col < 0 || row < 0 || col >= r.width || row >= r.height ||
             !r.at(static_cast<std::size_t>(col), static_cast<std::size_t>(row));
    }
    EXPECT_EQ(has_center_outside(l), out) << i;
  }
  EXPECT_GT(overlapping, 10u);
}

TEST(Diagnostics, GrammarDataIsClean) {
  GrammarConfig cfg;
  cfg.seed = 4;
  const auto data = generate_dataset(cfg, 1000);
  const Diagnostics d = diagnostics(data);
  EXPECT_EQ(d.overlap_rate, 0.0);
  EXPECT_EQ(d.out_of_boundary_rate, 0.0);
  EXPECT_GT(d.mean_objects, 1.0);
  const Diagnostics again = diagnostics(data);
  EXPECT_EQ(d.mean_objects, again.mean_objects);
}

TEST(Report, SingleJsonRecord) {
  GrammarConfig cfg;
  const auto data = generate_dataset(cfg, 50);
  const std::span<const Layout> all(data);
  const std::string text = evaluation_report(all.subspan(0, 25), all.subspan(25), cfg.schema());
  EXPECT_EQ(text.find('\n'), std::string::npos);
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j["generated"], 25);
  EXPECT_EQ(j["reference"], 25);
  EXPECT_GE(j["classKL"].get<double>(), 0.0);
  EXPECT_EQ(j["overlapRate"], 0.0);
  EXPECT_TRUE(j["histogramGenerated"].contains("bed"));
  EXPECT_TRUE(j["histogramReference"].contains("lamp"));
  EXPECT_TRUE(j.contains("meanObjectsPerLayout"));
  EXPECT_TRUE(j.contains("outOfBoundaryRate"));
}
