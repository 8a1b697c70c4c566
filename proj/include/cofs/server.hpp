// HTTP front end for Api.
#pragma once

#include <string>

namespace httplib {
class Server;
}

namespace cofs {

class Api;

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string cors_origin = "*";
};

// Registers the /v1 routes, CORS headers and preflight handling.
void mount(httplib::Server& server, const Api& api, const ServerOptions& options);

}  // namespace cofs
