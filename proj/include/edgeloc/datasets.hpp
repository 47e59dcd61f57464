#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "edgeloc/fingerprint.hpp"

namespace edgeloc {

/// Log-distance path-loss site used to generate desk-scale corpora:
/// RSS(d) = tx - [pl_d0 + 10 * gamma * log10(d / 1m)] + N(0, sigma^2),
/// with readings below the detection floor mapped to not-detected.
struct SyntheticSiteConfig {
  SiteRect site;
  std::vector<std::pair<double, double>> ap_positions;
  double path_loss_exponent = 2.5;   // gamma
  double reference_loss_db = 40.0;   // PL(d0) at d0 = 1 m
  double shadowing_sigma_db = 2.0;
  double tx_power_dbm = 0.0;
  double detection_floor_dbm = -100.0;
  double rp_spacing_m = 0.8;
  int samples_per_rp = 100;
  double grid_cell_size = 1.6;
  std::uint64_t seed = 42;

  /// 12.8 m x 6.4 m site (32 cells), 6 perimeter APs, 0.8 m RP lattice,
  /// 100 samples per RP, sigma = 2 dB.
  static SyntheticSiteConfig desk(std::uint64_t seed = 42);
  /// 3.2 m x 3.2 m noiseless 4-cell site, one RP per cell, 50 samples per RP
  /// (200 samples total); linearly separable by construction.
  static SyntheticSiteConfig four_cell(std::uint64_t seed = 42);

  void validate() const;
};

FingerprintDataset generate_synthetic(const SyntheticSiteConfig& config);

/// Noiseless RSS at distance d (meters) under the config's path-loss model.
double path_loss_rss(const SyntheticSiteConfig& config, double distance_m);

/// Parse a UJIIndoorLoc-format CSV, keeping only rows of the requested
/// building. +100 readings map to not-detected; coordinates are shifted so
/// the retained rows' bounding box starts at (0,0).
FingerprintDataset ingest_uji(const std::string& csv_path, int building_id,
                              double grid_cell_size = 1.6);

/// Ingest a train/test CSV pair in a shared coordinate frame (union bounding
/// box shifted to the origin), so grid indices agree across the two.
std::pair<FingerprintDataset, FingerprintDataset> ingest_uji_pair(const std::string& train_csv,
                                                                  const std::string& test_csv,
                                                                  int building_id,
                                                                  double grid_cell_size = 1.6);

/// Internal corpus format: one JSON header line (AP roster, site, cell size)
/// followed by one JSON sample record per line (readings with null for
/// not-detected, location, cell index).
void write_corpus(const FingerprintDataset& dataset, const std::string& path);
FingerprintDataset read_corpus(const std::string& path);

}  // namespace edgeloc
