#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include <httplib.h>

#include "edgeloc/bundle.hpp"
#include "edgeloc/client.hpp"
#include "edgeloc/datasets.hpp"
#include "edgeloc/eval.hpp"
#include "edgeloc/rng.hpp"
#include "edgeloc/server.hpp"
#include "oracles.hpp"

using namespace edgeloc;
namespace fs = std::filesystem;

namespace {

CapsNetConfig small_config() {
  CapsNetConfig cfg;
  cfg.n_aps = 6;
  cfg.num_grids = 4;
  cfg.conv1.n_filters = 4;
  cfg.primary.n_channels = 2;
  cfg.primary.dim_capsule = 4;
  return cfg;
}

ModelBundle test_bundle(std::uint64_t seed, std::int64_t version) {
  const CapsNetConfig cfg = small_config();
  return make_bundle(CapsNetParams::init(cfg, seed), cfg, GridMap(SiteRect{0, 0, 3.2, 3.2}, 1.6),
                     {"AP00", "AP01", "AP02", "AP03", "AP04", "AP05"}, -104.0, version,
                     "2024-01-01T00:00:00Z");
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("edgeloc_proto_" + tag + "_" + std::to_string(::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("manifest and weights agree; uploads bump the version") {
  EdgeServer server(test_bundle(1, 1));
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client http("127.0.0.1", port);

  auto health = http.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->body == "ok");

  auto manifest_res = http.Get("/v1/model/manifest");
  REQUIRE(manifest_res);
  const nlohmann::json manifest = nlohmann::json::parse(manifest_res->body);
  auto weights_res = http.Get("/v1/model/weights");
  REQUIRE(weights_res);
  CHECK(weights_res->get_header_value("Content-Length") ==
        std::to_string(weights_res->body.size()));
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(weights_res->body.data());
  CHECK(manifest["weights_sha256"] == sha256_hex(bytes, weights_res->body.size()));
  CHECK(manifest["model_version"] == 1);

  // Two sequential uploads, v2 then v3: manifest reports 3.
  for (std::int64_t v : {2, 3}) {
    const std::vector<std::uint8_t> body = serialize_bundle(test_bundle(10 + static_cast<std::uint64_t>(v), v));
    auto res = http.Post("/v1/model", reinterpret_cast<const char*>(body.data()), body.size(),
                         "application/octet-stream");
    REQUIRE(res);
    CHECK(res->status == 200);
  }
  auto after = http.Get("/v1/model/manifest");
  REQUIRE(after);
  CHECK(nlohmann::json::parse(after->body)["model_version"] == 3);

  // Stale version -> 409 and the current bundle is untouched.
  const std::vector<std::uint8_t> stale = serialize_bundle(test_bundle(99, 2));
  auto conflict = http.Post("/v1/model", reinterpret_cast<const char*>(stale.data()), stale.size(),
                            "application/octet-stream");
  REQUIRE(conflict);
  CHECK(conflict->status == 409);
  CHECK(server.current_version() == 3);

  // Malformed upload -> 400, never replaces the current bundle.
  std::vector<std::uint8_t> garbage = serialize_bundle(test_bundle(5, 10));
  garbage[garbage.size() / 2] ^= 0x40;
  auto bad = http.Post("/v1/model", reinterpret_cast<const char*>(garbage.data()), garbage.size(),
                       "application/octet-stream");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(server.current_version() == 3);

  server.stop();
}

TEST_CASE("concurrent downloads during uploads never observe torn state") {
  EdgeServer server(test_bundle(1, 1));
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);

  // Every version's blob hash, including ones installed mid-flight.
  std::map<std::string, std::int64_t> known_hashes;
  for (std::int64_t v = 1; v <= 6; ++v) {
    const ModelBundle b = test_bundle(static_cast<std::uint64_t>(v), v);
    const std::vector<std::uint8_t> blob = serialize_weights(b.weights);
    known_hashes[sha256_hex(blob.data(), blob.size())] = v;
  }

  std::atomic<bool> done{false};
  std::atomic<int> failures{0};
  auto reader = [&] {
    httplib::Client http("127.0.0.1", port);
    while (!done.load()) {
      auto res = http.Get("/v1/model/weights");
      if (!res || res->status != 200) {
        ++failures;
        continue;
      }
      const auto* bytes = reinterpret_cast<const std::uint8_t*>(res->body.data());
      const std::string hash = sha256_hex(bytes, res->body.size());
      if (!known_hashes.count(hash)) {
        ++failures;  // torn read: blob matches no installed version
      }
      try {
        deserialize_weights(bytes, res->body.size());
      } catch (const BundleError&) {
        ++failures;
      }
    }
  };

  std::vector<std::thread> readers;
  for (int i = 0; i < 16; ++i) readers.emplace_back(reader);

  httplib::Client uploader("127.0.0.1", port);
  for (std::int64_t v = 2; v <= 6; ++v) {
    const std::vector<std::uint8_t> body =
        serialize_bundle(test_bundle(static_cast<std::uint64_t>(v), v));
    auto res = uploader.Post("/v1/model", reinterpret_cast<const char*>(body.data()), body.size(),
                             "application/octet-stream");
    REQUIRE(res);
    REQUIRE(res->status == 200);
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  done = true;
  for (auto& t : readers) t.join();
  CHECK(failures.load() == 0);
  CHECK(server.current_version() == 6);
  server.stop();
}

TEST_CASE("client sync: download, manifest-only refresh, cache fallback") {
  TempDir cache("sync");
  EdgeServer server(test_bundle(3, 5));
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);

  const SyncResult first = client_sync("127.0.0.1", port, cache.path.string());
  CHECK(first.downloaded);
  CHECK_FALSE(first.from_cache);
  CHECK(first.bundle.model_version == 5);

  // Unchanged server: second sync transfers only the manifest.
  const SyncResult second = client_sync("127.0.0.1", port, cache.path.string());
  CHECK_FALSE(second.downloaded);
  CHECK_FALSE(second.from_cache);
  CHECK(second.bundle.model_version == 5);

  // New version on the server: re-download.
  const std::vector<std::uint8_t> body = serialize_bundle(test_bundle(4, 6));
  httplib::Client http("127.0.0.1", port);
  REQUIRE(http.Post("/v1/model", reinterpret_cast<const char*>(body.data()), body.size(),
                    "application/octet-stream"));
  const SyncResult third = client_sync("127.0.0.1", port, cache.path.string());
  CHECK(third.downloaded);
  CHECK(third.bundle.model_version == 6);

  server.stop();

  // Server gone: cache fallback with a staleness warning.
  const SyncResult offline = client_sync("127.0.0.1", port, cache.path.string());
  CHECK(offline.from_cache);
  CHECK(offline.bundle.model_version == 6);
  REQUIRE_FALSE(offline.warnings.empty());
  CHECK(offline.warnings[0].find("stale") != std::string::npos);

  // No cache at all: failure.
  TempDir empty("empty");
  CHECK_THROWS_AS(client_sync("127.0.0.1", port, empty.path.string()), std::runtime_error);
}

TEST_CASE("EDGELOC_CACHE_DIR overrides the default cache location") {
  CHECK(resolve_cache_dir("explicit") == "explicit");
  ::setenv("EDGELOC_CACHE_DIR", "/tmp/edgeloc_env_cache", 1);
  CHECK(resolve_cache_dir("") == "/tmp/edgeloc_env_cache");
  ::unsetenv("EDGELOC_CACHE_DIR");
  CHECK(resolve_cache_dir("") == "edgeloc-cache");
}

TEST_CASE("device locate equals the server-side forward pass") {
  // Train-free equivalence: random params, 100 random samples.
  const CapsNetConfig cfg = small_config();
  const CapsNetParams params = CapsNetParams::init(cfg, 11);
  const GridMap grid(SiteRect{0, 0, 3.2, 3.2}, 1.6);
  const std::vector<std::string> roster = {"AP00", "AP01", "AP02", "AP03", "AP04", "AP05"};
  const double min_rss = -104.0;
  const ModelBundle bundle =
      make_bundle(params, cfg, grid, roster, min_rss, 1, "2024-01-01T00:00:00Z");

  CapsNetLocalizer server_side(params, cfg, grid, roster, min_rss, 1);
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    RssSample sample;
    sample.x = rng.uniform(0.0, 3.2);
    sample.y = rng.uniform(0.0, 3.2);
    std::map<std::string, double> scan;
    for (const std::string& ap : roster) {
      if (rng.uniform() < 0.85) {
        const double rss = -104.0 + rng.uniform(0.0, 64.0);
        sample.readings.push_back(rss);
        scan[ap] = rss;
      } else {
        sample.readings.push_back(std::nullopt);
      }
    }
    const Tensor lengths = server_side.lengths({&sample});
    const LocateResult located = client_locate(bundle, scan);
    // Single- vs double-precision path: lengths agree within 1e-6.
    REQUIRE(located.lengths.size() == lengths.size());
    std::size_t server_cell = 0;
    for (std::size_t k = 0; k < lengths.size(); ++k) {
      CHECK(std::abs(located.lengths[k] - lengths[k]) < 1e-6);
      if (lengths[k] > lengths[server_cell]) server_cell = k;
    }
    CHECK(located.grid_index == server_cell);
    CHECK(located.center_x == grid.cell(located.grid_index).center_x);
    CHECK(located.elapsed_ms >= 0.0);
    CHECK(located.warnings.empty());
  }
}

TEST_CASE("locate projects the scan onto the roster") {
  const ModelBundle bundle = test_bundle(21, 1);
  std::map<std::string, double> scan = {{"AP00", -50.0}, {"UNKNOWN_AP", -40.0}};
  const LocateResult res = client_locate(bundle, scan);
  REQUIRE(res.warnings.size() == 1);
  CHECK(res.warnings[0].find("UNKNOWN_AP") != std::string::npos);

  // A reading below the bundle's min_rss is clamped with a warning rather
  // than rejected.
  std::map<std::string, double> weak = {{"AP00", -150.0}};
  const LocateResult clamped = client_locate(bundle, weak);
  REQUIRE(clamped.warnings.size() == 1);
  CHECK(clamped.warnings[0].find("clamped") != std::string::npos);
}

TEST_CASE("sync then locate end to end over HTTP") {
  TempDir cache("e2e");
  EdgeServer server(test_bundle(31, 2));
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  const SyncResult sync = client_sync("127.0.0.1", port, cache.path.string());
  server.stop();

  std::map<std::string, double> scan = {{"AP00", -45.0}, {"AP01", -60.0}, {"AP02", -70.0},
                                        {"AP03", -80.0}, {"AP04", -90.0}, {"AP05", -95.0}};
  const LocateResult res = client_locate(sync.bundle, scan);
  CHECK(res.grid_index < 4);
  CHECK(res.lengths.size() == 4);
}
