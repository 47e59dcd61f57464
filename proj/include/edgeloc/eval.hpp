#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgeloc/capsnet.hpp"
#include "edgeloc/fingerprint.hpp"

namespace edgeloc {

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> errors_m;                 // per test sample
  std::vector<std::pair<double, double>> cdf;   // (error, cumulative fraction)
  double mean_error_m = 0.0;
  double mean_positioning_time_ms = 0.0;
  double median_positioning_time_ms = 0.0;      // median of the timing repetitions
  int batch_size = 0;
  nlohmann::json config_snapshot;

  nlohmann::json to_json() const;
  std::string cdf_csv() const;
};

/// Distance in meters between the predicted cell's center and the true
/// sample location.
double localization_error(std::size_t pred_cell, double true_x, double true_y,
                          const GridMap& grid);

/// Anything that maps raw samples to grid cells in batches.
class Localizer {
 public:
  virtual ~Localizer() = default;
  virtual std::vector<std::size_t> predict(const std::vector<const RssSample*>& batch) = 0;
  virtual std::string name() const = 0;
};

class CapsNetLocalizer : public Localizer {
 public:
  CapsNetLocalizer(CapsNetParams params, CapsNetConfig config, GridMap grid,
                   std::vector<std::string> ap_roster, double min_rss, int threads = 1);

  std::vector<std::size_t> predict(const std::vector<const RssSample*>& batch) override;
  std::string name() const override { return "capsnet"; }

  /// Length vectors for a batch, [B, G]; used by the protocol equivalence
  /// tests.
  Tensor lengths(const std::vector<const RssSample*>& batch);

  const GridMap& grid() const { return grid_; }

 private:
  CapsNetParams params_;
  CapsNetConfig config_;
  GridMap grid_;
  std::vector<std::string> ap_roster_;
  double min_rss_;
  int threads_;
};

class KnnLocalizer : public Localizer {
 public:
  KnnLocalizer(const FingerprintDataset& train, const GridMap& grid, std::size_t k);

  std::vector<std::size_t> predict(const std::vector<const RssSample*>& batch) override;
  std::string name() const override { return "knn"; }

 private:
  std::vector<std::vector<double>> train_normalized_;
  std::vector<std::size_t> train_cells_;
  double min_rss_;
  std::size_t k_;
  std::size_t num_cells_;

  friend std::size_t knn_predict_excluding(const KnnLocalizer& knn,
                                           const std::vector<double>& query,
                                           std::ptrdiff_t exclude);
};

/// Majority grid cell among the k nearest training samples in
/// normalized-RSS Euclidean distance; ties by smallest mean distance, then
/// lowest cell index. min_rss is computed over the training corpus.
std::size_t knn_baseline(const FingerprintDataset& train, const RssSample& query, std::size_t k);

/// Leave-one-out variant used by the self-consistency checks: `exclude` is a
/// training index to skip (-1 for none).
std::size_t knn_predict_excluding(const KnnLocalizer& knn, const std::vector<double>& query,
                                  std::ptrdiff_t exclude);

/// Accuracy, per-sample errors, error CDF and mean positioning time over a
/// test set. Timing excludes a warm-up batch and reports the mean across
/// `timing_repetitions` passes plus the median of the per-pass means.
EvalReport evaluate(Localizer& localizer, const FingerprintDataset& test_set, const GridMap& grid,
                    int batch_size, int timing_repetitions = 5);

struct GridSearchPoint {
  int n_filters = 64;
  int n_channels = 8;
  int dim_capsule = 16;
};

struct GridSearchBudget {
  int epochs = 5;
  int batch_size = 32;
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
  int threads = 0;
  int eval_batch_size = 50;
};

struct GridSearchEntry {
  GridSearchPoint point;
  bool diverged = false;
  double accuracy = 0.0;
  double mean_positioning_time_ms = 0.0;
  double train_wall_ms = 0.0;
  EvalReport report;

  nlohmann::json to_json() const;
};

/// The full tuning grid: n_filters x n_channels x dim_capsule.
std::vector<GridSearchPoint> default_search_space();

/// Trains and evaluates every configuration with a shared seed and epoch
/// budget; entries come back ranked by accuracy, then positioning time.
/// Diverged runs are recorded and the search continues.
std::vector<GridSearchEntry> grid_search(const FingerprintDataset& corpus,
                                         const std::vector<GridSearchPoint>& space,
                                         const GridSearchBudget& budget);

}  // namespace edgeloc
