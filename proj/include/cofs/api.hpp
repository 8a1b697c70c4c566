// JSON request handling for the inference service, independent of transport.
//
//   POST /v1/sample    {boundary, objectCount, constraints[], seed, temperature}
//   POST /v1/complete  {layout, count, seed, temperature}
//   POST /v1/score     {layout, seed}
//   GET  /v1/model
//   GET  /v1/health
//
// Errors are {code, message} with status 400, 404, 405, 409 or 500; a 500
// also carries an opaque id that is logged next to the real cause.
#pragma once

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cofs/model.hpp"
#include "cofs/sampling.hpp"

namespace cofs {

class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ApiResponse {
  int status = 200;
  std::string body;
};

// A constraint spec as sent by clients: {slot, attr, value} triples with
// attribute names, class labels or ids, and world-unit scalars.
struct WorldSpec {
  ConstraintSpec spec;
  std::vector<std::pair<Constraint, double>> world;  // normalized constraint + original value
};
WorldSpec spec_from_json(const nlohmann::json& objects, const nlohmann::json& constraints, const ModelBundle& bundle);

// Overwrites constrained attributes with the exact world values they were
// given in, so the payload shows them verbatim.
void restore_constrained(Layout& layout, const WorldSpec& spec);

nlohmann::json scores_to_json(const std::vector<ObjectScore>& ranked, const Layout& layout, const ClassSchema& schema);

// FNV-1a of a file's bytes, as 16 hex digits.
std::string model_id_for_file(const std::string& path);

class Api {
 public:
  Api(const ModelBundle& bundle, std::string model_id, std::ostream* log = nullptr);

  ApiResponse handle(std::string_view method, std::string_view path, std::string_view body) const;

  nlohmann::json sample(const nlohmann::json& req) const;
  nlohmann::json complete(const nlohmann::json& req) const;
  nlohmann::json score(const nlohmann::json& req) const;
  nlohmann::json model_info() const;

 private:
  const ModelBundle& bundle_;
  std::string model_id_;
  std::ostream* log_;
  mutable std::atomic<std::uint64_t> failures_{0};
};

}  // namespace cofs
