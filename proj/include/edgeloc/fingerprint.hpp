#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "edgeloc/tensor.hpp"

namespace edgeloc {

/// A reading is a dBm value, or empty when the AP was not detected. The
/// not-detected case is always this marker, never a magic number; ingestion
/// maps dataset-specific sentinels (e.g. +100) to it.
using Reading = std::optional<double>;

struct RssSample {
  std::vector<Reading> readings;  // aligned with the dataset AP roster
  double x = 0.0;                 // meters, site frame
  double y = 0.0;
  std::optional<int> floor;
  std::optional<int> building;
};

struct SiteRect {
  double x0 = 0.0;
  double y0 = 0.0;
  double width = 0.0;
  double height = 0.0;

  bool contains(double x, double y) const {
    return x >= x0 && x <= x0 + width && y >= y0 && y <= y0 + height;
  }
};

struct FingerprintDataset {
  std::vector<std::string> ap_roster;
  std::vector<RssSample> samples;
  SiteRect site;
  double grid_cell_size = 1.6;

  std::size_t num_aps() const { return ap_roster.size(); }
  void validate() const;  // throws on broken invariants
};

struct GridCell {
  std::size_t index = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  SiteRect bounds;
};

/// Row-major partition of the site into square cells. Cells are half-open
/// [lo, hi): a point exactly on an interior boundary belongs to the
/// higher-index cell. Points on the site's max edge fall into the last cell.
class GridMap {
 public:
  GridMap(SiteRect site, double cell_size);

  std::size_t columns() const { return columns_; }
  std::size_t rows() const { return rows_; }
  std::size_t num_cells() const { return cells_.size(); }
  double cell_size() const { return cell_size_; }
  const SiteRect& site() const { return site_; }
  const std::vector<GridCell>& cells() const { return cells_; }
  const GridCell& cell(std::size_t index) const { return cells_.at(index); }

  std::size_t cell_index(double x, double y) const;  // throws if outside the site

 private:
  SiteRect site_;
  double cell_size_;
  std::size_t columns_ = 0;
  std::size_t rows_ = 0;
  std::vector<GridCell> cells_;
};

/// Pairwise differences of normalized readings; the network input.
/// R[i][j] = r_i - r_j, so the diagonal is exactly zero and R = -R^T.
struct FeatureMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // row-major n*n
  std::vector<std::string> ap_roster;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  Tensor to_tensor() const;  // [n, n, 1]
};

/// Lowest detected reading across every sample of the corpus.
double corpus_min_rss(const FingerprintDataset& dataset);

/// r_i = 0 when not detected, else 0.1 * (RSS_i - min_rss). Rejects detected
/// readings below min_rss (the corpus minimum was computed incorrectly).
std::vector<double> normalize(const RssSample& sample, double min_rss);

FeatureMatrix difference_matrix(const std::vector<double>& r,
                                std::vector<std::string> ap_roster = {});

GridMap build_grid(const SiteRect& site, double cell_size = 1.6);

/// One-hot vector of length grid.num_cells(); throws if the sample lies
/// outside the site.
Tensor one_hot_label(const RssSample& sample, const GridMap& grid);

struct SplitResult {
  FingerprintDataset train;
  FingerprintDataset test;
  std::vector<std::string> warnings;
};

/// Deterministic stratified split: every grid cell with >= 2 samples appears
/// in both partitions; a cell with a single sample goes to train with a
/// warning.
SplitResult split(const FingerprintDataset& dataset, double train_fraction, std::uint64_t seed);

/// Keep the n_aps APs detected most often, ranked by detection count
/// descending with ties broken by ascending AP identifier. Readings are
/// re-projected onto the new roster in ranking order.
FingerprintDataset select_top_aps(const FingerprintDataset& dataset, std::size_t n_aps);

}  // namespace edgeloc
