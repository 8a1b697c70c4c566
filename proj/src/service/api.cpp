#include "cofs/api.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>

namespace cofs {

namespace {

using nlohmann::json;

[[noreturn]] void bad_request(const std::string& message) { throw ApiError(400, "bad_request", message); }

const json& require(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) bad_request(std::string("missing field '") + name + "'");
  return *it;
}

std::size_t unsigned_field(const json& j, const char* name) {
  if (!j.is_number_unsigned()) bad_request(std::string("'") + name + "' must be a nonnegative integer");
  return j.get<std::size_t>();
}

std::uint64_t read_seed(const json& req) {
  auto it = req.find("seed");
  if (it == req.end()) return 0;
  if (!it->is_number_unsigned()) bad_request("'seed' must be a nonnegative integer");
  return it->get<std::uint64_t>();
}

SampleOptions read_options(const json& req) {
  SampleOptions o;
  auto it = req.find("temperature");
  if (it != req.end()) {
    if (!it->is_number()) bad_request("'temperature' must be a number");
    o.temperature = it->get<double>();
    if (!(o.temperature >= 0.0) || !std::isfinite(o.temperature)) bad_request("'temperature' must be >= 0");
  }
  return o;
}

std::size_t read_attr(const json& j) {
  if (j.is_string()) {
    try {
      return attr_index(j.get<std::string>());
    } catch (const std::invalid_argument&) {
      bad_request("unknown attribute '" + j.get<std::string>() + "'");
    }
  }
  if (j.is_number_unsigned() && j.get<std::size_t>() < kAttrCount) return j.get<std::size_t>();
  bad_request("'attr' must be one of class, tx, ty, tz, ex, ey, ez, r");
}

std::size_t read_class(const json& j, const ClassSchema& schema) {
  if (j.is_string()) {
    try {
      return schema.id(j.get<std::string>());
    } catch (const std::invalid_argument&) {
      bad_request("unknown class '" + j.get<std::string>() + "'");
    }
  }
  if (j.is_number_unsigned() && j.get<std::size_t>() < schema.size()) return j.get<std::size_t>();
  bad_request("class value must be a known label or id");
}

Layout read_layout(const json& j, const ModelBundle& bundle) {
  Layout l;
  try {
    l = layout_from_json(j);
  } catch (const ParseError& e) {
    bad_request(e.what());
  }
  for (const auto& b : l.boxes)
    if (b.cls >= bundle.schema.size()) bad_request("box class id " + std::to_string(b.cls) + " is not in the schema");
  return l;
}

void check_raster(const BoundaryRaster& b, const ModelConfig& cfg) {
  if (b.width != cfg.raster_side || b.height != cfg.raster_side) {
    bad_request("boundary must be " + std::to_string(cfg.raster_side) + "x" + std::to_string(cfg.raster_side));
  }
}

void check_capacity(std::size_t k, const ModelConfig& cfg) {
  if (k > cfg.max_objects) {
    throw ApiError(409, "capacity_exceeded",
                   std::to_string(k) + " objects exceed the model capacity of " + std::to_string(cfg.max_objects));
  }
}

json error_body(const std::string& code, const std::string& message) { return {{"code", code}, {"message", message}}; }

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json tokens_json(const Layout& layout, const WorldSpec* spec, const ClassSchema& schema) {
  json out = json::array();
  for (std::size_t slot = 0; slot < layout.boxes.size(); ++slot) {
    const BoundingBox& b = layout.boxes[slot];
    for (std::size_t a = 0; a < kAttrCount; ++a) {
      bool constrained = false;
      if (spec)
        for (const auto& c : spec->spec.fixed) constrained |= c.slot == slot && c.attr == a;
      json t = {{"slot", slot}, {"attr", kAttrNames[a]}};
      if (a == kClass) {
        t["value"] = b.cls;
        t["label"] = schema.label(b.cls);
      } else {
        t["value"] = box_scalar(b, a);
      }
      t["constrained"] = constrained;
      out.push_back(std::move(t));
    }
  }
  return out;
}

}  // namespace

WorldSpec spec_from_json(const json& objects, const json& constraints, const ModelBundle& bundle) {
  WorldSpec ws;
  ws.spec.object_count = unsigned_field(objects, "objectCount");
  if (constraints.is_null()) return ws;
  if (!constraints.is_array()) bad_request("'constraints' must be an array");
  for (const auto& c : constraints) {
    if (!c.is_object()) bad_request("each constraint must be an object {slot, attr, value}");
    const std::size_t slot = unsigned_field(require(c, "slot"), "slot");
    const std::size_t attr = read_attr(require(c, "attr"));
    const json& value = require(c, "value");
    Constraint k;
    double world = 0.0;
    if (attr == kClass) {
      k = {slot, attr, TokenValue::of_class(read_class(value, bundle.schema))};
      world = static_cast<double>(k.value.cls);
    } else {
      if (!value.is_number() || !std::isfinite(value.get<double>())) bad_request("scalar constraint needs a finite number");
      world = value.get<double>();
      k = world_constraint(bundle.normalizer, slot, attr, world);
    }
    ws.spec.set(k.slot, k.attr, k.value);
    auto it = std::find_if(ws.world.begin(), ws.world.end(),
                           [&](const auto& p) { return p.first.slot == slot && p.first.attr == attr; });
    if (it != ws.world.end())
      *it = {k, world};
    else
      ws.world.emplace_back(k, world);
  }
  return ws;
}

void restore_constrained(Layout& layout, const WorldSpec& spec) {
  for (const auto& [c, world] : spec.world) {
    if (c.slot >= layout.boxes.size()) continue;
    if (c.attr == kClass)
      layout.boxes[c.slot].cls = c.value.cls;
    else
      set_box_scalar(layout.boxes[c.slot], c.attr, world);
  }
}

json scores_to_json(const std::vector<ObjectScore>& ranked, const Layout& layout, const ClassSchema& schema) {
  json out = json::array();
  for (const auto& s : ranked) {
    json tokens;
    for (std::size_t a = 0; a < kAttrCount; ++a) tokens[std::string(kAttrNames[a])] = s.token_log_probs[a];
    const std::size_t cls = layout.boxes[s.slot].cls;
    out.push_back({{"slot", s.slot}, {"class", cls}, {"label", schema.label(cls)}, {"total", s.total}, {"tokens", tokens}});
  }
  return out;
}

std::string model_id_for_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex16(fnv1a(bytes));
}

Api::Api(const ModelBundle& bundle, std::string model_id, std::ostream* log)
    : bundle_(bundle), model_id_(std::move(model_id)), log_(log) {}

ApiResponse Api::handle(std::string_view method, std::string_view path, std::string_view body) const {
  json seed_echo;
  try {
    auto parse_body = [&] {
      json req;
      try {
        req = json::parse(body.begin(), body.end());
      } catch (const json::parse_error& e) {
        bad_request(std::string("malformed JSON: ") + e.what());
      }
      if (!req.is_object()) bad_request("request body must be a JSON object");
      if (auto it = req.find("seed"); it != req.end() && it->is_number_unsigned()) seed_echo = *it;
      if (auto it = req.find("modelId"); it != req.end() && (!it->is_string() || it->get<std::string>() != model_id_)) {
        throw ApiError(400, "unknown_model", "this service serves model " + model_id_);
      }
      return req;
    };
    const bool get = method == "GET", post = method == "POST";
    json out;
    if (path == "/v1/health") {
      if (!get) throw ApiError(405, "method_not_allowed", "use GET");
      out = {{"status", "ok"}};
    } else if (path == "/v1/model") {
      if (!get) throw ApiError(405, "method_not_allowed", "use GET");
      out = model_info();
    } else if (path == "/v1/sample" || path == "/v1/complete" || path == "/v1/score") {
      if (!post) throw ApiError(405, "method_not_allowed", "use POST");
      const json req = parse_body();
      out = path == "/v1/sample" ? sample(req) : path == "/v1/complete" ? complete(req) : score(req);
    } else {
      throw ApiError(404, "not_found", "no route " + std::string(path));
    }
    return {200, out.dump()};
  } catch (const ApiError& e) {
    json err = error_body(e.code(), e.what());
    if (!seed_echo.is_null()) err["seed"] = seed_echo;
    return {e.status(), err.dump()};
  } catch (const CapacityError& e) {
    json err = error_body("capacity_exceeded", e.what());
    if (!seed_echo.is_null()) err["seed"] = seed_echo;
    return {409, err.dump()};
  } catch (const std::exception& e) {
    const auto now = static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
    const std::string id = hex16(fnv1a(std::to_string(now) + ":" + std::to_string(failures_++)));
    if (log_) *log_ << "error " << id << ": " << e.what() << std::endl;
    json err = {{"code", "internal"}, {"message", "internal error"}, {"id", id}};
    if (!seed_echo.is_null()) err["seed"] = seed_echo;
    return {500, err.dump()};
  }
}

nlohmann::json Api::sample(const json& req) const {
  const std::uint64_t seed = read_seed(req);
  const SampleOptions opts = read_options(req);
  BoundaryRaster boundary;
  try {
    boundary = boundary_from_json(require(req, "boundary"));
  } catch (const ParseError& e) {
    bad_request(e.what());
  }
  check_raster(boundary, bundle_.model.config());
  const json constraints = req.contains("constraints") ? req["constraints"] : json();
  const WorldSpec ws = spec_from_json(require(req, "objectCount"), constraints, bundle_);
  check_capacity(ws.spec.object_count, bundle_.model.config());
  try {
    ws.spec.validate(bundle_.model.config().num_classes, bundle_.model.config().max_objects);
  } catch (const std::invalid_argument& e) {
    bad_request(e.what());
  }
  Rng rng(seed);
  SampleResult r = sample_cofs(bundle_.model, bundle_.normalizer, boundary, ws.spec, rng, opts);
  restore_constrained(r.layout, ws);
  return {{"seed", seed},
          {"modelId", model_id_},
          {"temperature", opts.temperature},
          {"layout", layout_to_json(r.layout)},
          {"tokens", tokens_json(r.layout, &ws, bundle_.schema)}};
}

nlohmann::json Api::complete(const json& req) const {
  const std::uint64_t seed = read_seed(req);
  const SampleOptions opts = read_options(req);
  const Layout existing = read_layout(require(req, "layout"), bundle_);
  check_raster(existing.boundary, bundle_.model.config());
  const std::size_t n_new = unsigned_field(require(req, "count"), "count");
  check_capacity(existing.boxes.size() + n_new, bundle_.model.config());
  Rng rng(seed);
  SampleResult r = complete_scene(bundle_.model, bundle_.normalizer, existing.boundary, existing.boxes, n_new, rng, opts);
  for (std::size_t i = 0; i < existing.boxes.size(); ++i) r.layout.boxes[i] = existing.boxes[i];
  WorldSpec fixed;
  for (std::size_t i = 0; i < existing.boxes.size(); ++i)
    for (std::size_t a = 0; a < kAttrCount; ++a) fixed.spec.fixed.push_back({i, a, TokenValue::mask()});
  return {{"seed", seed},
          {"modelId", model_id_},
          {"temperature", opts.temperature},
          {"layout", layout_to_json(r.layout)},
          {"tokens", tokens_json(r.layout, &fixed, bundle_.schema)}};
}

nlohmann::json Api::score(const json& req) const {
  const std::uint64_t seed = read_seed(req);
  const Layout layout = read_layout(require(req, "layout"), bundle_);
  check_raster(layout.boundary, bundle_.model.config());
  check_capacity(layout.boxes.size(), bundle_.model.config());
  const auto ranked = rank_by_score(score_tokens(bundle_.model, bundle_.normalizer, layout));
  return {{"seed", seed}, {"modelId", model_id_}, {"scores", scores_to_json(ranked, layout, bundle_.schema)}};
}

nlohmann::json Api::model_info() const {
  const ModelConfig& c = bundle_.model.config();
  json config = {{"encoderLayers", c.encoder_layers},
                 {"decoderLayers", c.decoder_layers},
                 {"dModel", c.d_model},
                 {"heads", c.heads},
                 {"ffnHidden", c.ffn_hidden},
                 {"mixtureComponents", c.mixture_components},
                 {"numClasses", c.num_classes},
                 {"maxObjects", c.max_objects},
                 {"rasterSide", c.raster_side}};
  json attrs = json::array();
  for (auto a : kAttrNames) attrs.push_back(a);
  return {{"modelId", model_id_},
          {"config", config},
          {"classes", bundle_.schema.labels},
          {"attributes", attrs},
          {"normalizer", {{"lo", bundle_.normalizer.lo()}, {"hi", bundle_.normalizer.hi()}}},
          {"parameters", bundle_.model.parameter_count()}};
}

}  // namespace cofs
