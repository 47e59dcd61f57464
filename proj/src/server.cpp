#include "edgeloc/server.hpp"

#include <atomic>
#include <mutex>
#include <thread>

#include <httplib.h>

namespace edgeloc {

namespace {

struct Served {
  std::string manifest;
  std::string blob;
  std::int64_t version = 0;
};

std::shared_ptr<const Served> prepare(const ModelBundle& bundle) {
  auto served = std::make_shared<Served>();
  served->manifest = bundle.manifest_json().dump();
  const std::vector<std::uint8_t> blob = serialize_weights(bundle.weights);
  served->blob.assign(reinterpret_cast<const char*>(blob.data()), blob.size());
  served->version = bundle.model_version;
  return served;
}

}  // namespace

struct EdgeServer::Impl {
  httplib::Server http;
  mutable std::mutex swap_mutex;
  std::shared_ptr<const Served> current;
  std::mutex upload_mutex;  // serializes POST /v1/model
  std::thread thread;

  std::shared_ptr<const Served> snapshot() const {
    std::lock_guard lock(swap_mutex);
    return current;
  }

  void swap(std::shared_ptr<const Served> next) {
    std::lock_guard lock(swap_mutex);
    current = std::move(next);
  }
};

EdgeServer::EdgeServer(const ModelBundle& initial) : impl_(std::make_unique<Impl>()) {
  impl_->current = prepare(initial);

  impl_->http.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
  impl_->http.Get("/v1/model/manifest", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(impl_->snapshot()->manifest, "application/json");
  });
  impl_->http.Get("/v1/model/weights", [this](const httplib::Request&, httplib::Response& res) {
    // The snapshot keeps the blob alive for the whole response.
    res.set_content(impl_->snapshot()->blob, "application/octet-stream");
  });
  impl_->http.Post("/v1/model", [this](const httplib::Request& req, httplib::Response& res) {
    const auto [status, body] =
        install(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
    res.status = status;
    res.set_content(body, "application/json");
  });
}

EdgeServer::~EdgeServer() { stop(); }

std::pair<int, std::string> EdgeServer::install(const std::uint8_t* data, std::size_t size) {
  std::lock_guard uploads(impl_->upload_mutex);
  ModelBundle bundle;
  try {
    bundle = deserialize_bundle(data, size);
  } catch (const std::exception& e) {
    return {400, std::string(R"({"error":")") + e.what() + R"("})"};
  }
  const std::int64_t current = impl_->snapshot()->version;
  if (bundle.model_version <= current) {
    return {409, R"({"error":"stale model_version )" + std::to_string(bundle.model_version) +
                     R"(, current is )" + std::to_string(current) + R"("})"};
  }
  impl_->swap(prepare(bundle));
  return {200, R"({"model_version":)" + std::to_string(bundle.model_version) + "}"};
}

bool EdgeServer::listen(const std::string& host, int port) {
  return impl_->http.listen(host, port);
}

int EdgeServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->http.bind_to_any_port(host);
    if (bound < 0) return -1;
  } else if (!impl_->http.bind_to_port(host, port)) {
    return -1;
  }
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return bound;
}

void EdgeServer::stop() {
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::int64_t EdgeServer::current_version() const { return impl_->snapshot()->version; }

}  // namespace edgeloc
