#pragma once

#include <map>
#include <string>
#include <vector>

#include "edgeloc/bundle.hpp"

namespace edgeloc {

struct SyncResult {
  ModelBundle bundle;
  bool downloaded = false;  // false when the cached blob was reused
  bool from_cache = false;  // true when the server was unreachable
  std::vector<std::string> warnings;
};

/// Poll the server for the current bundle. Skips the weights download when
/// the cached version matches the server's manifest; falls back to the cache
/// with a staleness warning when the server is unreachable.
SyncResult client_sync(const std::string& host, int port, const std::string& cache_dir);

/// Cache directory resolution: explicit flag value, then EDGELOC_CACHE_DIR,
/// then "./edgeloc-cache".
std::string resolve_cache_dir(const std::string& flag_value);

struct LocateResult {
  std::size_t grid_index = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  double elapsed_ms = 0.0;
  std::vector<double> lengths;
  std::vector<std::string> warnings;
};

/// Run the full pipeline locally on a raw scan (AP id -> dBm): roster
/// projection (missing APs not detected, unknown APs ignored with a
/// warning), normalize with the bundle's min_rss, difference matrix,
/// forward, argmax. Elapsed wall time covers the pipeline.
LocateResult client_locate(const ModelBundle& bundle,
                           const std::map<std::string, double>& readings);

}  // namespace edgeloc
