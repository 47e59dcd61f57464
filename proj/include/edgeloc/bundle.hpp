#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgeloc/capsnet.hpp"
#include "edgeloc/fingerprint.hpp"

namespace edgeloc {

// CapsNetConfig <-> JSON (manifest "config" object, CLI config files).
void to_json(nlohmann::json& j, const CapsNetConfig& config);
void from_json(const nlohmann::json& j, CapsNetConfig& config);

enum class BundleErrorKind {
  kBadMagic,
  kBadVersion,
  kTruncated,
  kBadChecksum,
  kBadManifest,
  kBadShape,
};

class BundleError : public std::runtime_error {
 public:
  BundleError(BundleErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  BundleErrorKind kind() const { return kind_; }

 private:
  BundleErrorKind kind_;
};

std::string sha256_hex(const std::uint8_t* data, std::size_t size);
std::vector<std::uint8_t> sha256_bytes(const std::uint8_t* data, std::size_t size);

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;  // single precision, row-major
};

/// Weights blob, bit-exact:
///   "CAPS" | format u16 LE | tensor count u32 LE |
///   per tensor: name len u16 LE, name UTF-8, rank u8, extents u32 LE each,
///               payload IEEE-754 single LE row-major |
///   SHA-256 (32 bytes) over all preceding bytes.
std::vector<std::uint8_t> serialize_weights(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> deserialize_weights(const std::uint8_t* data, std::size_t size);

constexpr std::uint16_t kWeightFormatVersion = 1;

/// Versioned, checksummed unit shipped from the edge server to devices;
/// self-sufficient for inference (config, grid, roster, min_rss included).
struct ModelBundle {
  int format_version = kWeightFormatVersion;
  std::int64_t model_version = 1;
  CapsNetConfig config;
  SiteRect grid_site;
  double grid_cell_size = 1.6;
  std::vector<std::string> ap_roster;
  double min_rss = 0.0;
  std::string weights_sha256;  // hex of the weights blob
  std::string created_at;      // ISO-8601 UTC
  std::vector<NamedTensor> weights;

  GridMap grid() const { return GridMap(grid_site, grid_cell_size); }
  /// Widen to double-precision params; shape-checks against config.
  CapsNetParams to_params() const;
  nlohmann::json manifest_json() const;
};

ModelBundle make_bundle(const CapsNetParams& params, const CapsNetConfig& config,
                        const GridMap& grid, std::vector<std::string> ap_roster, double min_rss,
                        std::int64_t model_version, std::string created_at);

ModelBundle bundle_from_manifest(const nlohmann::json& manifest,
                                 std::vector<NamedTensor> weights);

/// Container bytes for files and uploads:
///   "CAPB" | container u16 LE | manifest len u32 LE | manifest JSON |
///   weights blob | SHA-256 (32 bytes) over all preceding bytes.
/// The outer hash makes any single-bit corruption detectable, including in
/// the manifest region.
std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle);
ModelBundle deserialize_bundle(const std::uint8_t* data, std::size_t size);

void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

std::string iso8601_now();

}  // namespace edgeloc
