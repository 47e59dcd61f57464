#include "edgeloc/client.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <httplib.h>

#include "edgeloc/capsnet.hpp"
#include "edgeloc/fingerprint.hpp"

namespace edgeloc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string manifest_path(const std::string& dir) { return dir + "/manifest.json"; }
std::string blob_path(const std::string& dir) { return dir + "/weights.blob"; }

void write_file_atomic(const std::string& path, const std::string& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("client: cannot write " + tmp);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("client: short write to " + tmp);
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("client: cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

ModelBundle bundle_from_cache(const std::string& cache_dir) {
  const json manifest = json::parse(read_file(manifest_path(cache_dir)));
  const std::string blob = read_file(blob_path(cache_dir));
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(blob.data());
  ModelBundle bundle = bundle_from_manifest(manifest, deserialize_weights(bytes, blob.size()));
  if (bundle.weights_sha256 != sha256_hex(bytes, blob.size())) {
    throw BundleError(BundleErrorKind::kBadChecksum, "client: cached blob does not match manifest");
  }
  return bundle;
}

}  // namespace

std::string resolve_cache_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("EDGELOC_CACHE_DIR"); env && *env) return env;
  return "edgeloc-cache";
}

SyncResult client_sync(const std::string& host, int port, const std::string& cache_dir) {
  SyncResult result;
  fs::create_directories(cache_dir);

  httplib::Client http(host, port);
  http.set_connection_timeout(2, 0);
  http.set_read_timeout(30, 0);

  auto manifest_res = http.Get("/v1/model/manifest");
  if (!manifest_res || manifest_res->status != 200) {
    if (fs::exists(manifest_path(cache_dir)) && fs::exists(blob_path(cache_dir))) {
      result.warnings.push_back("server unreachable; using cached bundle (may be stale)");
      result.bundle = bundle_from_cache(cache_dir);
      result.from_cache = true;
      return result;
    }
    throw std::runtime_error("client: server unreachable and no cached bundle at " + cache_dir);
  }
  const json manifest = json::parse(manifest_res->body);
  const auto server_version = manifest.at("model_version").get<std::int64_t>();
  const std::string server_sha = manifest.at("weights_sha256");

  if (fs::exists(manifest_path(cache_dir)) && fs::exists(blob_path(cache_dir))) {
    try {
      const json cached = json::parse(read_file(manifest_path(cache_dir)));
      if (cached.at("model_version").get<std::int64_t>() == server_version &&
          cached.at("weights_sha256").get<std::string>() == server_sha) {
        result.bundle = bundle_from_cache(cache_dir);
        return result;  // manifest-only transfer
      }
    } catch (const std::exception&) {
      result.warnings.push_back("cache unreadable; re-downloading");
    }
  }

  auto weights_res = http.Get("/v1/model/weights");
  if (!weights_res || weights_res->status != 200) {
    throw std::runtime_error("client: weights download failed");
  }
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(weights_res->body.data());
  if (sha256_hex(bytes, weights_res->body.size()) != server_sha) {
    throw BundleError(BundleErrorKind::kBadChecksum,
                      "client: downloaded blob does not match the manifest hash");
  }
  result.bundle =
      bundle_from_manifest(manifest, deserialize_weights(bytes, weights_res->body.size()));
  write_file_atomic(blob_path(cache_dir), weights_res->body);
  write_file_atomic(manifest_path(cache_dir), manifest.dump());
  result.downloaded = true;
  return result;
}

LocateResult client_locate(const ModelBundle& bundle,
                           const std::map<std::string, double>& readings) {
  LocateResult result;
  for (const auto& [ap, rss] : readings) {
    bool known = false;
    for (const std::string& roster_ap : bundle.ap_roster) {
      if (roster_ap == ap) {
        known = true;
        break;
      }
    }
    if (!known) {
      result.warnings.push_back("reading for unknown AP " + ap + " ignored");
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  RssSample sample;
  sample.readings.reserve(bundle.ap_roster.size());
  for (const std::string& ap : bundle.ap_roster) {
    auto it = readings.find(ap);
    if (it == readings.end()) {
      sample.readings.push_back(std::nullopt);  // missing APs treated as not detected
    } else if (it->second < bundle.min_rss) {
      result.warnings.push_back("reading for " + ap + " below bundle min_rss; clamped");
      sample.readings.push_back(bundle.min_rss);
    } else {
      sample.readings.push_back(it->second);
    }
  }
  const CapsNetParams params = bundle.to_params();
  const FeatureMatrix fm =
      difference_matrix(normalize(sample, bundle.min_rss), bundle.ap_roster);
  const Tensor lengths = forward_batch({fm.to_tensor()}, params, bundle.config, 1);
  const Tensor row = lengths.reshaped({lengths.size()});
  result.grid_index = predict_grid(row);
  result.lengths.assign(row.data(), row.data() + row.size());
  const GridMap grid = bundle.grid();
  result.center_x = grid.cell(result.grid_index).center_x;
  result.center_y = grid.cell(result.grid_index).center_y;
  result.elapsed_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace edgeloc
