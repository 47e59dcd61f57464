#include "edgeloc/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "edgeloc/rng.hpp"

namespace edgeloc {

using nlohmann::json;

SyntheticSiteConfig SyntheticSiteConfig::desk(std::uint64_t seed) {
  SyntheticSiteConfig cfg;
  cfg.site = SiteRect{0.0, 0.0, 12.8, 6.4};
  // Loose ring around the floor, placed so the mean signal level is nearly
  // flat across the site: the location information lives in the pairwise
  // differences, which is the representation the network consumes.
  cfg.ap_positions = {{12.14, 5.71}, {9.28, 3.15}, {0.59, 6.1},
                      {0.76, 0.78}, {5.02, 3.37}, {10.81, 0.67}};
  cfg.path_loss_exponent = 6.0;  // heavily obstructed indoor propagation
  cfg.seed = seed;
  return cfg;
}

SyntheticSiteConfig SyntheticSiteConfig::four_cell(std::uint64_t seed) {
  SyntheticSiteConfig cfg;
  cfg.site = SiteRect{0.0, 0.0, 3.2, 3.2};
  cfg.ap_positions = {{0.0, 0.0}, {3.2, 0.4}, {0.4, 3.2}, {2.8, 2.8}, {1.6, 0.0}, {0.0, 1.6}};
  cfg.shadowing_sigma_db = 0.0;
  cfg.rp_spacing_m = 1.6;
  cfg.samples_per_rp = 50;
  cfg.seed = seed;
  return cfg;
}

void SyntheticSiteConfig::validate() const {
  if (ap_positions.size() < 2) throw std::invalid_argument("synthetic: need at least 2 APs");
  if (site.width <= 0.0 || site.height <= 0.0) {
    throw std::invalid_argument("synthetic: site has non-positive extent");
  }
  if (shadowing_sigma_db < 0.0) throw std::invalid_argument("synthetic: sigma must be >= 0");
  if (path_loss_exponent <= 0.0) throw std::invalid_argument("synthetic: gamma must be > 0");
  if (rp_spacing_m <= 0.0) throw std::invalid_argument("synthetic: RP spacing must be > 0");
  if (samples_per_rp < 1) throw std::invalid_argument("synthetic: samples per RP must be >= 1");
  for (const auto& [x, y] : ap_positions) {
    if (!site.contains(x, y)) {
      throw std::invalid_argument("synthetic: AP at (" + std::to_string(x) + "," +
                                  std::to_string(y) + ") outside the site");
    }
  }
}

double path_loss_rss(const SyntheticSiteConfig& config, double distance_m) {
  const double d = std::max(distance_m, 0.1);  // clamp inside the near field
  return config.tx_power_dbm -
         (config.reference_loss_db + 10.0 * config.path_loss_exponent * std::log10(d));
}

FingerprintDataset generate_synthetic(const SyntheticSiteConfig& config) {
  config.validate();
  FingerprintDataset out;
  out.site = config.site;
  out.grid_cell_size = config.grid_cell_size;
  for (std::size_t i = 0; i < config.ap_positions.size(); ++i) {
    out.ap_roster.push_back("AP" + std::string(i < 10 ? "0" : "") + std::to_string(i));
  }

  // RP lattice at the configured spacing, offset half a step from the walls.
  std::vector<std::pair<double, double>> rps;
  const double half = config.rp_spacing_m / 2.0;
  for (double y = config.site.y0 + half; y < config.site.y0 + config.site.height;
       y += config.rp_spacing_m) {
    for (double x = config.site.x0 + half; x < config.site.x0 + config.site.width;
         x += config.rp_spacing_m) {
      rps.emplace_back(x, y);
    }
  }

  out.samples.reserve(rps.size() * static_cast<std::size_t>(config.samples_per_rp));
  for (std::size_t rp = 0; rp < rps.size(); ++rp) {
    Rng rng(Rng::derive(config.seed, rp));  // independent stream per RP
    const auto [rx, ry] = rps[rp];
    for (int s = 0; s < config.samples_per_rp; ++s) {
      RssSample sample;
      sample.x = rx;
      sample.y = ry;
      sample.readings.reserve(config.ap_positions.size());
      for (const auto& [ax, ay] : config.ap_positions) {
        const double dist = std::hypot(rx - ax, ry - ay);
        double rss = path_loss_rss(config, dist);
        if (config.shadowing_sigma_db > 0.0) {
          rss += rng.gaussian(0.0, config.shadowing_sigma_db);
        }
        rss = std::min(rss, 0.0);
        if (rss < config.detection_floor_dbm) {
          sample.readings.push_back(std::nullopt);
        } else {
          sample.readings.push_back(rss);
        }
      }
      out.samples.push_back(std::move(sample));
    }
  }
  out.validate();
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    fields.push_back(field);
  }
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

struct UjiColumns {
  std::vector<std::size_t> wap;  // column index per AP, roster order
  std::vector<std::string> wap_names;
  std::size_t longitude = 0, latitude = 0, floor = 0, building = 0;
};

UjiColumns parse_uji_header(const std::string& header_line) {
  const std::vector<std::string> names = split_csv_line(header_line);
  UjiColumns cols;
  std::vector<std::string> missing;
  auto find = [&](const std::string& name, std::size_t& slot) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) {
        slot = i;
        return;
      }
    }
    missing.push_back(name);
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("WAP", 0) == 0) {
      cols.wap.push_back(i);
      cols.wap_names.push_back(names[i]);
    }
  }
  find("LONGITUDE", cols.longitude);
  find("LATITUDE", cols.latitude);
  find("FLOOR", cols.floor);
  find("BUILDINGID", cols.building);
  if (cols.wap.size() < 2) missing.push_back("WAP columns (need at least 2)");
  if (!missing.empty()) {
    std::string msg = "uji: missing expected columns:";
    for (const std::string& m : missing) msg += " " + m;
    throw std::invalid_argument(msg);
  }
  return cols;
}

constexpr double kUjiNotDetected = 100.0;

FingerprintDataset parse_uji_rows(const std::string& csv_path, int building_id) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("uji: cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("uji: empty file " + csv_path);
  const UjiColumns cols = parse_uji_header(line);

  FingerprintDataset out;
  out.ap_roster = cols.wap_names;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> fields = split_csv_line(line);
    auto field_at = [&](std::size_t i) -> const std::string& {
      if (i >= fields.size()) {
        throw std::runtime_error("uji: line " + std::to_string(line_no) + " has only " +
                                 std::to_string(fields.size()) + " fields");
      }
      return fields[i];
    };
    if (std::stoi(field_at(cols.building)) != building_id) continue;
    RssSample sample;
    sample.x = std::stod(field_at(cols.longitude));
    sample.y = std::stod(field_at(cols.latitude));
    sample.floor = std::stoi(field_at(cols.floor));
    sample.building = building_id;
    sample.readings.reserve(cols.wap.size());
    for (std::size_t w : cols.wap) {
      const double v = std::stod(field_at(w));
      if (v == kUjiNotDetected) {
        sample.readings.push_back(std::nullopt);
      } else {
        sample.readings.push_back(v);
      }
    }
    out.samples.push_back(std::move(sample));
  }
  if (out.samples.empty()) {
    throw std::runtime_error("uji: no rows for building " + std::to_string(building_id) + " in " +
                             csv_path);
  }
  return out;
}

SiteRect bounding_box(const std::vector<RssSample>& samples) {
  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  for (const RssSample& s : samples) {
    min_x = std::min(min_x, s.x);
    min_y = std::min(min_y, s.y);
    max_x = std::max(max_x, s.x);
    max_y = std::max(max_y, s.y);
  }
  return SiteRect{min_x, min_y, std::max(max_x - min_x, 1e-9), std::max(max_y - min_y, 1e-9)};
}

void shift_to_origin(FingerprintDataset& ds, const SiteRect& bbox) {
  for (RssSample& s : ds.samples) {
    s.x -= bbox.x0;
    s.y -= bbox.y0;
  }
  ds.site = SiteRect{0.0, 0.0, bbox.width, bbox.height};
}

}  // namespace

FingerprintDataset ingest_uji(const std::string& csv_path, int building_id,
                              double grid_cell_size) {
  FingerprintDataset ds = parse_uji_rows(csv_path, building_id);
  ds.grid_cell_size = grid_cell_size;
  shift_to_origin(ds, bounding_box(ds.samples));
  ds.validate();
  return ds;
}

std::pair<FingerprintDataset, FingerprintDataset> ingest_uji_pair(const std::string& train_csv,
                                                                  const std::string& test_csv,
                                                                  int building_id,
                                                                  double grid_cell_size) {
  FingerprintDataset train = parse_uji_rows(train_csv, building_id);
  FingerprintDataset test = parse_uji_rows(test_csv, building_id);
  if (train.ap_roster != test.ap_roster) {
    throw std::runtime_error("uji: train/test AP columns disagree");
  }
  std::vector<RssSample> all = train.samples;
  all.insert(all.end(), test.samples.begin(), test.samples.end());
  const SiteRect bbox = bounding_box(all);
  train.grid_cell_size = test.grid_cell_size = grid_cell_size;
  shift_to_origin(train, bbox);
  shift_to_origin(test, bbox);
  train.validate();
  test.validate();
  return {std::move(train), std::move(test)};
}

void write_corpus(const FingerprintDataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  const GridMap grid(dataset.site, dataset.grid_cell_size);
  json header = {
      {"ap_roster", dataset.ap_roster},
      {"site",
       {{"x0", dataset.site.x0},
        {"y0", dataset.site.y0},
        {"width", dataset.site.width},
        {"height", dataset.site.height}}},
      {"cell_size", dataset.grid_cell_size},
      {"num_samples", dataset.samples.size()},
  };
  out << header.dump() << "\n";
  for (const RssSample& s : dataset.samples) {
    json readings = json::array();
    for (const Reading& r : s.readings) {
      if (r) {
        readings.push_back(*r);
      } else {
        readings.push_back(nullptr);
      }
    }
    json rec = {{"readings", std::move(readings)},
                {"x", s.x},
                {"y", s.y},
                {"cell", grid.cell_index(s.x, s.y)}};
    if (s.floor) rec["floor"] = *s.floor;
    if (s.building) rec["building"] = *s.building;
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("corpus: short write to " + path);
}

FingerprintDataset read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("corpus: empty file " + path);
  json header = json::parse(line);
  FingerprintDataset ds;
  ds.ap_roster = header.at("ap_roster").get<std::vector<std::string>>();
  const json& site = header.at("site");
  ds.site = SiteRect{site.at("x0"), site.at("y0"), site.at("width"), site.at("height")};
  ds.grid_cell_size = header.at("cell_size");
  const GridMap grid(ds.site, ds.grid_cell_size);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec = json::parse(line);
    RssSample s;
    for (const json& r : rec.at("readings")) {
      if (r.is_null()) {
        s.readings.push_back(std::nullopt);
      } else {
        s.readings.push_back(r.get<double>());
      }
    }
    s.x = rec.at("x");
    s.y = rec.at("y");
    if (rec.contains("floor")) s.floor = rec["floor"].get<int>();
    if (rec.contains("building")) s.building = rec["building"].get<int>();
    const auto stored_cell = rec.at("cell").get<std::size_t>();
    if (grid.cell_index(s.x, s.y) != stored_cell) {
      throw std::runtime_error("corpus: line " + std::to_string(line_no) +
                               " cell index does not match its coordinates");
    }
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

}  // namespace edgeloc
