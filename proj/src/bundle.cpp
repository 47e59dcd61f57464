#include "edgeloc/bundle.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>

#include <openssl/evp.h>

namespace edgeloc {

using nlohmann::json;

void to_json(json& j, const CapsNetConfig& config) {
  j = json{{"n_aps", config.n_aps},
           {"num_grids", config.num_grids},
           {"conv1",
            {{"kernel", config.conv1.kernel},
             {"stride", config.conv1.stride},
             {"n_filters", config.conv1.n_filters}}},
           {"primary",
            {{"kernel", config.primary.kernel},
             {"stride", config.primary.stride},
             {"n_channels", config.primary.n_channels},
             {"dim_capsule", config.primary.dim_capsule}}},
           {"routing_iterations", config.routing_iterations},
           {"margin",
            {{"m_plus", config.margin.m_plus},
             {"m_minus", config.margin.m_minus},
             {"lambda", config.margin.lambda}}}};
}

void from_json(const json& j, CapsNetConfig& config) {
  config.n_aps = j.at("n_aps");
  config.num_grids = j.at("num_grids");
  config.conv1.kernel = j.at("conv1").at("kernel");
  config.conv1.stride = j.at("conv1").at("stride");
  config.conv1.n_filters = j.at("conv1").at("n_filters");
  config.primary.kernel = j.at("primary").at("kernel");
  config.primary.stride = j.at("primary").at("stride");
  config.primary.n_channels = j.at("primary").at("n_channels");
  config.primary.dim_capsule = j.at("primary").at("dim_capsule");
  config.routing_iterations = j.at("routing_iterations");
  config.margin.m_plus = j.at("margin").at("m_plus");
  config.margin.m_minus = j.at("margin").at("m_minus");
  config.margin.lambda = j.at("margin").at("lambda");
}

std::vector<std::uint8_t> sha256_bytes(const std::uint8_t* data, std::size_t size) {
  std::vector<std::uint8_t> digest(32);
  unsigned int len = 32;
  EVP_Digest(data, size, digest.data(), &len, EVP_sha256(), nullptr);
  return digest;
}

std::string sha256_hex(const std::uint8_t* data, std::size_t size) {
  static const char* hex = "0123456789abcdef";
  const std::vector<std::uint8_t> digest = sha256_bytes(data, size);
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : digest) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0xF]);
  }
  return out;
}

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::size_t remaining() const { return size_ - pos_; }
  std::size_t pos() const { return pos_; }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw BundleError(BundleErrorKind::kTruncated,
                        std::string("bundle: truncated while reading ") + what);
    }
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::uint16_t u16(const char* what) {
    const std::uint8_t* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const char* what) {
    const std::uint8_t* p = take(4, what);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

constexpr char kWeightsMagic[4] = {'C', 'A', 'P', 'S'};
constexpr char kContainerMagic[4] = {'C', 'A', 'P', 'B'};
constexpr std::uint16_t kContainerVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_weights(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kWeightsMagic, kWeightsMagic + 4);
  put_u16(out, kWeightFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    std::size_t count = 1;
    for (std::size_t e : t.shape) {
      put_u32(out, static_cast<std::uint32_t>(e));
      count *= e;
    }
    if (count != t.values.size()) {
      throw BundleError(BundleErrorKind::kBadShape, "bundle: tensor " + t.name + " shape " +
                                                        shape_str(t.shape) + " does not hold " +
                                                        std::to_string(t.values.size()) +
                                                        " values");
    }
    for (float v : t.values) put_f32(out, v);
  }
  const std::vector<std::uint8_t> digest = sha256_bytes(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

std::vector<NamedTensor> deserialize_weights(const std::uint8_t* data, std::size_t size) {
  if (size < 4 + 2 + 4 + 32) {
    throw BundleError(BundleErrorKind::kTruncated, "bundle: weights blob too short");
  }
  // Trailing hash covers everything before it.
  const std::size_t body = size - 32;
  const std::vector<std::uint8_t> digest = sha256_bytes(data, body);
  if (std::memcmp(digest.data(), data + body, 32) != 0) {
    throw BundleError(BundleErrorKind::kBadChecksum, "bundle: weights checksum mismatch");
  }
  ByteReader in(data, body);
  if (std::memcmp(in.take(4, "magic"), kWeightsMagic, 4) != 0) {
    throw BundleError(BundleErrorKind::kBadMagic, "bundle: bad weights magic");
  }
  const std::uint16_t version = in.u16("format version");
  if (version != kWeightFormatVersion) {
    throw BundleError(BundleErrorKind::kBadVersion,
                      "bundle: unsupported weights format " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("tensor count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const std::uint16_t name_len = in.u16("name length");
    const std::uint8_t* name = in.take(name_len, "name");
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::uint8_t rank = *in.take(1, "rank");
    std::size_t n = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const std::uint32_t e = in.u32("extent");
      if (e == 0) {
        throw BundleError(BundleErrorKind::kBadShape, "bundle: zero extent in " + t.name);
      }
      t.shape.push_back(e);
      n *= e;
    }
    t.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i) t.values.push_back(in.f32("payload"));
    tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) {
    throw BundleError(BundleErrorKind::kTruncated, "bundle: trailing bytes after tensors");
  }
  return tensors;
}

CapsNetParams ModelBundle::to_params() const {
  CapsNetParams params;
  auto slots = params.named();
  if (weights.size() != slots.size()) {
    throw BundleError(BundleErrorKind::kBadShape,
                      "bundle: expected " + std::to_string(slots.size()) + " tensors, got " +
                          std::to_string(weights.size()));
  }
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const NamedTensor& t = weights[k];
    if (t.name != slots[k].first) {
      throw BundleError(BundleErrorKind::kBadShape,
                        "bundle: tensor " + std::to_string(k) + " named " + t.name + ", expected " +
                            slots[k].first);
    }
    std::vector<double> wide(t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (!std::isfinite(t.values[i])) {
        throw BundleError(BundleErrorKind::kBadShape, "bundle: non-finite value in " + t.name);
      }
      wide[i] = static_cast<double>(t.values[i]);
    }
    *slots[k].second = Tensor(t.shape, std::move(wide));
  }
  try {
    params.validate_shapes(config);
  } catch (const std::invalid_argument& e) {
    throw BundleError(BundleErrorKind::kBadShape, e.what());
  }
  return params;
}

json ModelBundle::manifest_json() const {
  return json{{"format_version", format_version},
              {"model_version", model_version},
              {"config", config},
              {"grid",
               {{"cell_size", grid_cell_size},
                {"x0", grid_site.x0},
                {"y0", grid_site.y0},
                {"width", grid_site.width},
                {"height", grid_site.height}}},
              {"ap_roster", ap_roster},
              {"min_rss", min_rss},
              {"weights_sha256", weights_sha256},
              {"created_at", created_at}};
}

ModelBundle make_bundle(const CapsNetParams& params, const CapsNetConfig& config,
                        const GridMap& grid, std::vector<std::string> ap_roster, double min_rss,
                        std::int64_t model_version, std::string created_at) {
  params.validate_shapes(config);
  ModelBundle bundle;
  bundle.model_version = model_version;
  bundle.config = config;
  bundle.grid_site = grid.site();
  bundle.grid_cell_size = grid.cell_size();
  bundle.ap_roster = std::move(ap_roster);
  bundle.min_rss = min_rss;
  bundle.created_at = std::move(created_at);
  for (const auto& [name, tensor] : params.named()) {
    NamedTensor t;
    t.name = name;
    t.shape = tensor->shape();
    t.values.reserve(tensor->size());
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      t.values.push_back(static_cast<float>((*tensor)[i]));
    }
    bundle.weights.push_back(std::move(t));
  }
  const std::vector<std::uint8_t> blob = serialize_weights(bundle.weights);
  bundle.weights_sha256 = sha256_hex(blob.data(), blob.size());
  return bundle;
}

ModelBundle bundle_from_manifest(const json& manifest, std::vector<NamedTensor> weights) {
  ModelBundle bundle;
  try {
    bundle.format_version = manifest.at("format_version");
    bundle.model_version = manifest.at("model_version");
    bundle.config = manifest.at("config").get<CapsNetConfig>();
    const json& grid = manifest.at("grid");
    bundle.grid_cell_size = grid.at("cell_size");
    bundle.grid_site =
        SiteRect{grid.at("x0"), grid.at("y0"), grid.at("width"), grid.at("height")};
    bundle.ap_roster = manifest.at("ap_roster").get<std::vector<std::string>>();
    bundle.min_rss = manifest.at("min_rss");
    bundle.weights_sha256 = manifest.at("weights_sha256");
    bundle.created_at = manifest.at("created_at");
  } catch (const json::exception& e) {
    throw BundleError(BundleErrorKind::kBadManifest, std::string("bundle: bad manifest: ") +
                                                         e.what());
  }
  bundle.weights = std::move(weights);
  return bundle;
}

std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle) {
  const std::string manifest = bundle.manifest_json().dump();
  const std::vector<std::uint8_t> blob = serialize_weights(bundle.weights);
  std::vector<std::uint8_t> out;
  out.reserve(4 + 2 + 4 + manifest.size() + blob.size() + 32);
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  put_u16(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.insert(out.end(), blob.begin(), blob.end());
  const std::vector<std::uint8_t> digest = sha256_bytes(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

ModelBundle deserialize_bundle(const std::uint8_t* data, std::size_t size) {
  if (size < 4 + 2 + 4 + 32) {
    throw BundleError(BundleErrorKind::kTruncated, "bundle: container too short");
  }
  const std::size_t body = size - 32;
  const std::vector<std::uint8_t> digest = sha256_bytes(data, body);
  if (std::memcmp(digest.data(), data + body, 32) != 0) {
    throw BundleError(BundleErrorKind::kBadChecksum, "bundle: container checksum mismatch");
  }
  ByteReader in(data, body);
  if (std::memcmp(in.take(4, "container magic"), kContainerMagic, 4) != 0) {
    throw BundleError(BundleErrorKind::kBadMagic, "bundle: bad container magic");
  }
  const std::uint16_t version = in.u16("container version");
  if (version != kContainerVersion) {
    throw BundleError(BundleErrorKind::kBadVersion,
                      "bundle: unsupported container version " + std::to_string(version));
  }
  const std::uint32_t manifest_len = in.u32("manifest length");
  const std::uint8_t* manifest_bytes = in.take(manifest_len, "manifest");
  json manifest;
  try {
    manifest = json::parse(manifest_bytes, manifest_bytes + manifest_len);
  } catch (const json::exception& e) {
    throw BundleError(BundleErrorKind::kBadManifest, std::string("bundle: manifest parse: ") +
                                                         e.what());
  }
  const std::size_t blob_size = in.remaining();
  const std::uint8_t* blob = in.take(blob_size, "weights blob");
  std::vector<NamedTensor> weights = deserialize_weights(blob, blob_size);
  ModelBundle bundle = bundle_from_manifest(manifest, std::move(weights));
  if (bundle.weights_sha256 != sha256_hex(blob, blob_size)) {
    throw BundleError(BundleErrorKind::kBadChecksum,
                      "bundle: manifest weights_sha256 does not match the blob");
  }
  bundle.to_params();  // shape-check against config
  return bundle;
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
  const std::vector<std::uint8_t> bytes = serialize_bundle(bundle);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("bundle: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("bundle: short write to " + path);
}

ModelBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("bundle: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_bundle(bytes.data(), bytes.size());
}

std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace edgeloc
