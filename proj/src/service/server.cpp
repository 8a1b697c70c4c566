#include "cofs/server.hpp"

#include <httplib.h>

#include "cofs/api.hpp"

namespace cofs {

void mount(httplib::Server& server, const Api& api, const ServerOptions& options) {
  server.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  auto forward = [&api](const httplib::Request& req, httplib::Response& res) {
    const ApiResponse r = api.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get(R"(/v1/.*)", forward);
  server.Post(R"(/v1/.*)", forward);
  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

}  // namespace cofs
