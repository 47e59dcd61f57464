#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "edgeloc/bundle.hpp"

namespace edgeloc {

/// HTTP/1.1 model server. Endpoints:
///   GET  /v1/health          -> 200 "ok"
///   GET  /v1/model/manifest  -> manifest JSON
///   GET  /v1/model/weights   -> weights blob (application/octet-stream)
///   POST /v1/model           -> install a new bundle (container bytes);
///                               400 malformed, 409 stale version
/// The served bundle is an immutable snapshot swapped atomically: in-flight
/// downloads finish on the version they started with.
class EdgeServer {
 public:
  explicit EdgeServer(const ModelBundle& initial);
  ~EdgeServer();

  EdgeServer(const EdgeServer&) = delete;
  EdgeServer& operator=(const EdgeServer&) = delete;

  /// Serve until stop(); returns false if the bind fails.
  bool listen(const std::string& host, int port);

  /// Background-thread variant for tests; port 0 binds an ephemeral port.
  /// Returns the bound port, or -1 on failure.
  int start(const std::string& host, int port);
  void stop();

  std::int64_t current_version() const;

  /// Validates and installs a bundle; returns (http status, body).
  std::pair<int, std::string> install(const std::uint8_t* data, std::size_t size);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace edgeloc
