#include <gtest/gtest.h>

#include <json.hpp>

#include "cofs/api.hpp"
#include "fixtures.hpp"

using namespace cofs;
using namespace cofs::testing;
using nlohmann::json;

namespace {

ModelBundle tiny_bundle(std::size_t labels = 3) {
  ClassSchema schema;
  for (std::size_t i = 0; i < labels; ++i) schema.labels.push_back("c" + std::to_string(i));
  return {Model(tiny_config(3, 4), 31), schema, unit_normalizer()};
}

json room_json() { return boundary_to_json(room_raster(16, 2)); }

json sample_request(std::uint64_t seed) {
  return {{"boundary", room_json()},
          {"objectCount", 3},
          {"seed", seed},
          {"constraints",
           {{{"slot", 0}, {"attr", "class"}, {"value", "c2"}},
            {{"slot", 1}, {"attr", "tx"}, {"value", 0.123456789}},
            {{"slot", 2}, {"attr", "r"}, {"value", -0.5}}}}};
}

struct Fixture : ::testing::Test {
  ModelBundle bundle = tiny_bundle();
  Api api{bundle, "m1"};

  ApiResponse post(const std::string& path, const json& body) const { return api.handle("POST", path, body.dump()); }
};

}  // namespace

TEST_F(Fixture, Health) {
  const auto r = api.handle("GET", "/v1/health", "");
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(json::parse(r.body), json({{"status", "ok"}}));
}

TEST_F(Fixture, ModelInfo) {
  const auto j = json::parse(api.handle("GET", "/v1/model", "").body);
  EXPECT_EQ(j["modelId"], "m1");
  EXPECT_EQ(j["classes"], json({"c0", "c1", "c2"}));
  EXPECT_EQ(j["config"]["maxObjects"], 4);
  EXPECT_EQ(j["attributes"].size(), 8u);
  EXPECT_EQ(j["normalizer"]["lo"].size(), 7u);
}

TEST_F(Fixture, RoutingErrors) {
  EXPECT_EQ(api.handle("GET", "/v1/nope", "").status, 404);
  EXPECT_EQ(api.handle("GET", "/v1/sample", "").status, 405);
  EXPECT_EQ(api.handle("POST", "/v1/health", "{}").status, 405);
  const auto j = json::parse(api.handle("GET", "/v1/nope", "").body);
  EXPECT_EQ(j["code"], "not_found");
  EXPECT_TRUE(j.contains("message"));
}

TEST_F(Fixture, SampleIsDeterministicAndEchoesSeed) {
  const auto a = post("/v1/sample", sample_request(5));
  const auto b = post("/v1/sample", sample_request(5));
  const auto c = post("/v1/sample", sample_request(6));
  ASSERT_EQ(a.status, 200) << a.body;
  EXPECT_EQ(a.body, b.body);
  EXPECT_NE(a.body, c.body);
  const auto j = json::parse(a.body);
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["modelId"], "m1");
  EXPECT_EQ(j["layout"]["boxes"].size(), 3u);
}

TEST_F(Fixture, SampleShowsConstraintsVerbatim) {
  const auto j = json::parse(post("/v1/sample", sample_request(9)).body);
  const auto& boxes = j["layout"]["boxes"];
  EXPECT_EQ(boxes[0]["class"], 2);
  EXPECT_EQ(boxes[1]["t"][0].get<double>(), 0.123456789);
  EXPECT_EQ(boxes[2]["r"].get<double>(), -0.5);
  std::size_t constrained = 0;
  for (const auto& t : j["tokens"]) {
    if (!t["constrained"].get<bool>()) continue;
    ++constrained;
    const std::size_t slot = t["slot"];
    const std::string attr = t["attr"];
    EXPECT_TRUE((slot == 0 && attr == "class") || (slot == 1 && attr == "tx") || (slot == 2 && attr == "r"));
  }
  EXPECT_EQ(constrained, 3u);
  EXPECT_EQ(j["tokens"].size(), 24u);
  EXPECT_EQ(j["tokens"][0]["label"], "c2");
}

TEST_F(Fixture, SampleBadRequests) {
  auto expect_400 = [&](const std::string& body) {
    const auto r = api.handle("POST", "/v1/sample", body);
    EXPECT_EQ(r.status, 400) << body << " -> " << r.body;
    const auto j = json::parse(r.body);
    EXPECT_TRUE(j.contains("code"));
    EXPECT_TRUE(j.contains("message"));
  };
  expect_400("{not json");
  expect_400("[1, 2]");
  expect_400(json{{"boundary", room_json()}}.dump());
  json r = sample_request(1);
  r["constraints"][0]["attr"] = "colour";
  expect_400(r.dump());
  r = sample_request(1);
  r["constraints"][0]["value"] = "sofa";
  expect_400(r.dump());
  r = sample_request(1);
  r["constraints"][1]["slot"] = 3;
  expect_400(r.dump());
  r = sample_request(1);
  r["constraints"][1]["value"] = "wide";
  expect_400(r.dump());
  r = sample_request(1);
  r["seed"] = -4;
  expect_400(r.dump());
  r = sample_request(1);
  r["temperature"] = -1;
  expect_400(r.dump());
  r = sample_request(1);
  r["boundary"] = boundary_to_json(room_raster(32, 2));
  expect_400(r.dump());
  r = sample_request(1);
  r["modelId"] = "other";
  const auto wrong = post("/v1/sample", r);
  EXPECT_EQ(wrong.status, 400);
  EXPECT_EQ(json::parse(wrong.body)["code"], "unknown_model");
}

TEST_F(Fixture, CapacityConflict) {
  json r = sample_request(11);
  r["objectCount"] = 5;
  const auto res = post("/v1/sample", r);
  EXPECT_EQ(res.status, 409);
  const auto j = json::parse(res.body);
  EXPECT_EQ(j["code"], "capacity_exceeded");
  EXPECT_EQ(j["seed"], 11);
}

TEST_F(Fixture, CompleteKeepsExisting) {
  Rng rng(3);
  const Layout base = random_room(rng, 2, 3);
  const json req = {{"layout", layout_to_json(base)}, {"count", 2}, {"seed", 4}};
  const auto r = post("/v1/complete", req);
  ASSERT_EQ(r.status, 200) << r.body;
  const auto j = json::parse(r.body);
  ASSERT_EQ(j["layout"]["boxes"].size(), 4u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(j["layout"]["boxes"][i], box_to_json(base.boxes[i]));
  EXPECT_EQ(post("/v1/complete", req).body, r.body);
  json big = req;
  big["count"] = 3;
  EXPECT_EQ(post("/v1/complete", big).status, 409);
}

TEST_F(Fixture, ScoreSortedAscending) {
  Rng rng(5);
  const Layout layout = random_room(rng, 4, 3);
  const auto r = post("/v1/score", {{"layout", layout_to_json(layout)}, {"seed", 2}});
  ASSERT_EQ(r.status, 200) << r.body;
  const auto j = json::parse(r.body);
  EXPECT_EQ(j["seed"], 2);
  const auto& scores = j["scores"];
  ASSERT_EQ(scores.size(), 4u);
  const auto direct = score_tokens(bundle.model, bundle.normalizer, layout);
  double prev = -1e300;
  for (const auto& s : scores) {
    const double total = s["total"];
    EXPECT_GE(total, prev);
    prev = total;
    double sum = 0.0;
    for (auto& [k, v] : s["tokens"].items()) sum += v.get<double>();
    EXPECT_NEAR(sum, total, 1e-9);
    EXPECT_NEAR(total, direct[s["slot"].get<std::size_t>()].total, 1e-12);
  }
  json bad = layout_to_json(layout);
  bad["boxes"][0]["class"] = 7;
  EXPECT_EQ(post("/v1/score", {{"layout", bad}}).status, 400);
}

TEST(ApiInternal, UnexpectedFailureIsOpaque500) {
  // The schema lists fewer classes than the model can emit.
  ModelBundle bundle = tiny_bundle(2);
  for (auto& [name, t] : bundle.model.named_parameters())
    if (name == "head.class.b") t.mutable_values()[2] = 50.0;
  std::ostringstream log;
  const Api api(bundle, "m", &log);
  const auto r = api.handle("POST", "/v1/sample", json{{"boundary", room_json()}, {"objectCount", 1}, {"seed", 3}}.dump());
  EXPECT_EQ(r.status, 500);
  const auto j = json::parse(r.body);
  EXPECT_EQ(j["code"], "internal");
  EXPECT_EQ(j["seed"], 3);
  ASSERT_TRUE(j.contains("id"));
  EXPECT_NE(log.str().find(j["id"].get<std::string>()), std::string::npos);
  EXPECT_EQ(j["message"], "internal error");
}
