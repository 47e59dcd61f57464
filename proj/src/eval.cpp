#include "edgeloc/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace edgeloc {

using nlohmann::json;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

}  // namespace

json EvalReport::to_json() const {
  json cdf_json = json::array();
  for (const auto& [err, frac] : cdf) cdf_json.push_back({err, frac});
  return json{{"accuracy", accuracy},
              {"mean_error_m", mean_error_m},
              {"errors_m", errors_m},
              {"cdf", std::move(cdf_json)},
              {"batch_size", batch_size},
              {"config", config_snapshot},
              {"timing",
               {{"mean_positioning_time_ms", mean_positioning_time_ms},
                {"median_positioning_time_ms", median_positioning_time_ms}}}};
}

std::string EvalReport::cdf_csv() const {
  std::ostringstream out;
  out << "error_m,cumulative_fraction\n";
  for (const auto& [err, frac] : cdf) out << err << "," << frac << "\n";
  return out.str();
}

double localization_error(std::size_t pred_cell, double true_x, double true_y,
                          const GridMap& grid) {
  if (pred_cell >= grid.num_cells()) {
    throw std::invalid_argument("localization_error: cell " + std::to_string(pred_cell) +
                                " out of range (" + std::to_string(grid.num_cells()) + " cells)");
  }
  const GridCell& cell = grid.cell(pred_cell);
  return std::hypot(cell.center_x - true_x, cell.center_y - true_y);
}

CapsNetLocalizer::CapsNetLocalizer(CapsNetParams params, CapsNetConfig config, GridMap grid,
                                   std::vector<std::string> ap_roster, double min_rss, int threads)
    : params_(std::move(params)),
      config_(config),
      grid_(std::move(grid)),
      ap_roster_(std::move(ap_roster)),
      min_rss_(min_rss),
      threads_(threads) {
  params_.validate_shapes(config_);
  if (ap_roster_.size() != static_cast<std::size_t>(config_.n_aps)) {
    throw std::invalid_argument("localizer: roster size " + std::to_string(ap_roster_.size()) +
                                " does not match config n_aps " + std::to_string(config_.n_aps));
  }
}

Tensor CapsNetLocalizer::lengths(const std::vector<const RssSample*>& batch) {
  std::vector<Tensor> inputs;
  inputs.reserve(batch.size());
  for (const RssSample* s : batch) {
    inputs.push_back(difference_matrix(normalize(*s, min_rss_), ap_roster_).to_tensor());
  }
  return forward_batch(inputs, params_, config_, threads_);
}

std::vector<std::size_t> CapsNetLocalizer::predict(const std::vector<const RssSample*>& batch) {
  const Tensor l = lengths(batch);
  const auto g = static_cast<std::size_t>(config_.num_grids);
  std::vector<std::size_t> cells(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Tensor row({g}, std::vector<double>(l.data() + b * g, l.data() + (b + 1) * g));
    cells[b] = predict_grid(row);
  }
  return cells;
}

KnnLocalizer::KnnLocalizer(const FingerprintDataset& train, const GridMap& grid, std::size_t k)
    : min_rss_(corpus_min_rss(train)), k_(k), num_cells_(grid.num_cells()) {
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  if (k > train.samples.size()) {
    throw std::invalid_argument("knn: k " + std::to_string(k) + " exceeds training size " +
                                std::to_string(train.samples.size()));
  }
  train_normalized_.reserve(train.samples.size());
  train_cells_.reserve(train.samples.size());
  for (const RssSample& s : train.samples) {
    train_normalized_.push_back(normalize(s, min_rss_));
    train_cells_.push_back(grid.cell_index(s.x, s.y));
  }
}

std::size_t knn_predict_excluding(const KnnLocalizer& knn, const std::vector<double>& query,
                                  std::ptrdiff_t exclude) {
  struct Neighbor {
    double dist2;
    std::size_t index;
  };
  std::vector<Neighbor> neighbors;
  neighbors.reserve(knn.train_normalized_.size());
  for (std::size_t t = 0; t < knn.train_normalized_.size(); ++t) {
    if (exclude >= 0 && t == static_cast<std::size_t>(exclude)) continue;
    const std::vector<double>& row = knn.train_normalized_[t];
    double d2 = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      const double d = row[i] - query[i];
      d2 += d * d;
    }
    neighbors.push_back({d2, t});
  }
  const std::size_t k = std::min(knn.k_, neighbors.size());
  std::partial_sort(neighbors.begin(), neighbors.begin() + static_cast<std::ptrdiff_t>(k),
                    neighbors.end(), [](const Neighbor& a, const Neighbor& b) {
                      if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
                      return a.index < b.index;
                    });
  // Majority cell; ties by smallest mean distance, then lowest cell index.
  std::map<std::size_t, std::pair<std::size_t, double>> votes;  // cell -> (count, dist sum)
  for (std::size_t i = 0; i < k; ++i) {
    auto& [count, dist_sum] = votes[knn.train_cells_[neighbors[i].index]];
    ++count;
    dist_sum += std::sqrt(neighbors[i].dist2);
  }
  std::size_t best_cell = 0;
  std::size_t best_count = 0;
  double best_mean = 0.0;
  bool first = true;
  for (const auto& [cell, tally] : votes) {
    const auto& [count, dist_sum] = tally;
    const double mean = dist_sum / static_cast<double>(count);
    const bool better = first || count > best_count ||
                        (count == best_count && mean < best_mean) ||
                        (count == best_count && mean == best_mean && cell < best_cell);
    if (better) {
      best_cell = cell;
      best_count = count;
      best_mean = mean;
      first = false;
    }
  }
  return best_cell;
}

std::vector<std::size_t> KnnLocalizer::predict(const std::vector<const RssSample*>& batch) {
  std::vector<std::size_t> cells(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    cells[b] = knn_predict_excluding(*this, normalize(*batch[b], min_rss_), -1);
  }
  return cells;
}

std::size_t knn_baseline(const FingerprintDataset& train, const RssSample& query, std::size_t k) {
  const GridMap grid(train.site, train.grid_cell_size);
  KnnLocalizer knn(train, grid, k);
  return knn_predict_excluding(knn, normalize(query, corpus_min_rss(train)), -1);
}

EvalReport evaluate(Localizer& localizer, const FingerprintDataset& test_set, const GridMap& grid,
                    int batch_size, int timing_repetitions) {
  if (test_set.samples.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch size must be >= 1");

  EvalReport report;
  report.batch_size = batch_size;
  const std::size_t n = test_set.samples.size();

  std::vector<std::vector<const RssSample*>> batches;
  for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(batch_size));
    std::vector<const RssSample*> batch;
    batch.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(&test_set.samples[i]);
    batches.push_back(std::move(batch));
  }

  std::size_t correct = 0;
  std::size_t sample_idx = 0;
  for (const auto& batch : batches) {
    const std::vector<std::size_t> cells = localizer.predict(batch);
    for (std::size_t b = 0; b < batch.size(); ++b, ++sample_idx) {
      const RssSample& s = test_set.samples[sample_idx];
      if (cells[b] == grid.cell_index(s.x, s.y)) ++correct;
      report.errors_m.push_back(localization_error(cells[b], s.x, s.y, grid));
    }
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  double err_sum = 0.0;
  for (double e : report.errors_m) err_sum += e;
  report.mean_error_m = err_sum / static_cast<double>(n);
  std::vector<double> sorted_errors = report.errors_m;
  std::sort(sorted_errors.begin(), sorted_errors.end());
  for (std::size_t i = 0; i < sorted_errors.size(); ++i) {
    report.cdf.emplace_back(sorted_errors[i],
                            static_cast<double>(i + 1) / static_cast<double>(n));
  }

  // Timing: warm-up batch excluded, then whole passes over the set.
  localizer.predict(batches.front());
  std::vector<double> per_pass_ms;
  for (int rep = 0; rep < std::max(1, timing_repetitions); ++rep) {
    const double t0 = now_ms();
    for (const auto& batch : batches) localizer.predict(batch);
    per_pass_ms.push_back((now_ms() - t0) / static_cast<double>(n));
  }
  double mean = 0.0;
  for (double t : per_pass_ms) mean += t;
  report.mean_positioning_time_ms = mean / static_cast<double>(per_pass_ms.size());
  std::sort(per_pass_ms.begin(), per_pass_ms.end());
  report.median_positioning_time_ms = per_pass_ms[per_pass_ms.size() / 2];
  return report;
}

json GridSearchEntry::to_json() const {
  return json{{"n_filters", point.n_filters},
              {"n_channels", point.n_channels},
              {"dim_capsule", point.dim_capsule},
              {"diverged", diverged},
              {"accuracy", accuracy},
              {"mean_positioning_time_ms", mean_positioning_time_ms},
              {"train_wall_ms", train_wall_ms}};
}

std::vector<GridSearchPoint> default_search_space() {
  std::vector<GridSearchPoint> space;
  for (int nf : {32, 64, 128, 256, 512, 1024}) {
    for (int nc : {8, 16}) {
      for (int dim : {8, 16, 32}) {
        space.push_back({nf, nc, dim});
      }
    }
  }
  return space;
}

std::vector<GridSearchEntry> grid_search(const FingerprintDataset& corpus,
                                         const std::vector<GridSearchPoint>& space,
                                         const GridSearchBudget& budget) {
  if (space.empty()) throw std::invalid_argument("grid_search: empty search space");
  const SplitResult parts = split(corpus, budget.train_fraction, budget.seed);
  const GridMap grid(corpus.site, corpus.grid_cell_size);
  const double min_rss = corpus_min_rss(corpus);
  const PreparedDataset train_prep = prepare(parts.train, grid, min_rss);
  const PreparedDataset test_prep = prepare(parts.test, grid, min_rss);

  std::vector<GridSearchEntry> entries;
  for (const GridSearchPoint& point : space) {
    CapsNetConfig config;
    config.n_aps = static_cast<int>(corpus.ap_roster.size());
    config.num_grids = static_cast<int>(grid.num_cells());
    config.conv1.n_filters = point.n_filters;
    config.primary.n_channels = point.n_channels;
    config.primary.dim_capsule = point.dim_capsule;

    GridSearchEntry entry;
    entry.point = point;
    TrainOptions opts;
    opts.epochs = budget.epochs;
    opts.batch_size = budget.batch_size;
    opts.seed = budget.seed;
    opts.threads = budget.threads;
    const double t0 = now_ms();
    const TrainResult trained = train(train_prep, test_prep, config, opts);
    entry.train_wall_ms = now_ms() - t0;
    entry.diverged = trained.diverged;
    if (!trained.diverged) {
      CapsNetLocalizer localizer(trained.params, config, grid, corpus.ap_roster, min_rss, 1);
      entry.report = evaluate(localizer, parts.test, grid, budget.eval_batch_size);
      entry.accuracy = entry.report.accuracy;
      entry.mean_positioning_time_ms = entry.report.mean_positioning_time_ms;
    }
    entries.push_back(std::move(entry));
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const GridSearchEntry& a, const GridSearchEntry& b) {
                     if (a.diverged != b.diverged) return !a.diverged;
                     if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
                     return a.mean_positioning_time_ms < b.mean_positioning_time_ms;
                   });
  return entries;
}

}  // namespace edgeloc
