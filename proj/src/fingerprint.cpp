#include "edgeloc/fingerprint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "edgeloc/rng.hpp"

namespace edgeloc {

void FingerprintDataset::validate() const {
  if (samples.empty()) throw std::invalid_argument("dataset: no samples");
  if (ap_roster.size() < 2) throw std::invalid_argument("dataset: needs at least 2 APs");
  if (site.width <= 0.0 || site.height <= 0.0) {
    throw std::invalid_argument("dataset: site has non-positive extent");
  }
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const RssSample& sample = samples[s];
    if (sample.readings.size() != ap_roster.size()) {
      throw std::invalid_argument("dataset: sample " + std::to_string(s) + " has " +
                                  std::to_string(sample.readings.size()) + " readings, roster has " +
                                  std::to_string(ap_roster.size()));
    }
    if (!site.contains(sample.x, sample.y)) {
      throw std::invalid_argument("dataset: sample " + std::to_string(s) + " at (" +
                                  std::to_string(sample.x) + "," + std::to_string(sample.y) +
                                  ") lies outside the site");
    }
    for (const Reading& r : sample.readings) {
      if (r && !std::isfinite(*r)) {
        throw std::invalid_argument("dataset: non-finite reading in sample " + std::to_string(s));
      }
    }
  }
}

GridMap::GridMap(SiteRect site, double cell_size) : site_(site), cell_size_(cell_size) {
  if (cell_size <= 0.0) throw std::invalid_argument("grid: cell size must be positive");
  if (site.width <= 0.0 || site.height <= 0.0) {
    throw std::invalid_argument("grid: site has non-positive extent");
  }
  // The -1e-9 slack keeps exact multiples (12.8 / 1.6) from rounding up.
  columns_ = static_cast<std::size_t>(std::max(1.0, std::ceil(site.width / cell_size - 1e-9)));
  rows_ = static_cast<std::size_t>(std::max(1.0, std::ceil(site.height / cell_size - 1e-9)));
  cells_.reserve(columns_ * rows_);
  for (std::size_t row = 0; row < rows_; ++row) {
    for (std::size_t col = 0; col < columns_; ++col) {
      GridCell c;
      c.index = row * columns_ + col;
      c.bounds = SiteRect{site.x0 + static_cast<double>(col) * cell_size,
                          site.y0 + static_cast<double>(row) * cell_size, cell_size, cell_size};
      c.center_x = c.bounds.x0 + cell_size / 2.0;
      c.center_y = c.bounds.y0 + cell_size / 2.0;
      cells_.push_back(c);
    }
  }
}

std::size_t GridMap::cell_index(double x, double y) const {
  if (!site_.contains(x, y)) {
    throw std::invalid_argument("grid: point (" + std::to_string(x) + "," + std::to_string(y) +
                                ") outside the site");
  }
  auto clamp_index = [](double v, std::size_t count) {
    const double f = std::floor(v);
    if (f < 0.0) return std::size_t{0};
    const auto i = static_cast<std::size_t>(f);
    return i >= count ? count - 1 : i;
  };
  const std::size_t col = clamp_index((x - site_.x0) / cell_size_, columns_);
  const std::size_t row = clamp_index((y - site_.y0) / cell_size_, rows_);
  return row * columns_ + col;
}

Tensor FeatureMatrix::to_tensor() const {
  return Tensor({n, n, 1}, values);
}

double corpus_min_rss(const FingerprintDataset& dataset) {
  double min_rss = std::numeric_limits<double>::infinity();
  for (const RssSample& sample : dataset.samples) {
    for (const Reading& r : sample.readings) {
      if (r && *r < min_rss) min_rss = *r;
    }
  }
  if (!std::isfinite(min_rss)) {
    throw std::invalid_argument("min_rss: corpus contains no detected readings");
  }
  return min_rss;
}

std::vector<double> normalize(const RssSample& sample, double min_rss) {
  std::vector<double> out(sample.readings.size(), 0.0);
  for (std::size_t i = 0; i < sample.readings.size(); ++i) {
    const Reading& r = sample.readings[i];
    if (!r) continue;
    if (*r < min_rss) {
      throw std::invalid_argument("normalize: reading " + std::to_string(*r) +
                                  " dBm below corpus minimum " + std::to_string(min_rss));
    }
    out[i] = 0.1 * (*r - min_rss);
  }
  return out;
}

FeatureMatrix difference_matrix(const std::vector<double>& r, std::vector<std::string> ap_roster) {
  if (r.size() < 2) throw std::invalid_argument("difference_matrix: needs at least 2 APs");
  FeatureMatrix fm;
  fm.n = r.size();
  fm.ap_roster = std::move(ap_roster);
  fm.values.resize(fm.n * fm.n);
  for (std::size_t i = 0; i < fm.n; ++i) {
    for (std::size_t j = 0; j < fm.n; ++j) {
      fm.values[i * fm.n + j] = r[i] - r[j];
    }
  }
  return fm;
}

GridMap build_grid(const SiteRect& site, double cell_size) {
  return GridMap(site, cell_size);
}

Tensor one_hot_label(const RssSample& sample, const GridMap& grid) {
  Tensor label({grid.num_cells()});
  label[grid.cell_index(sample.x, sample.y)] = 1.0;
  return label;
}

SplitResult split(const FingerprintDataset& dataset, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train fraction must be in (0,1), got " +
                                std::to_string(train_fraction));
  }
  const GridMap grid(dataset.site, dataset.grid_cell_size);
  std::map<std::size_t, std::vector<std::size_t>> by_cell;
  for (std::size_t s = 0; s < dataset.samples.size(); ++s) {
    by_cell[grid.cell_index(dataset.samples[s].x, dataset.samples[s].y)].push_back(s);
  }

  SplitResult result;
  result.train.ap_roster = result.test.ap_roster = dataset.ap_roster;
  result.train.site = result.test.site = dataset.site;
  result.train.grid_cell_size = result.test.grid_cell_size = dataset.grid_cell_size;

  std::vector<std::size_t> train_idx, test_idx;
  for (auto& [cell, members] : by_cell) {
    if (members.size() == 1) {
      result.warnings.push_back("split: cell " + std::to_string(cell) +
                                " has a single sample; assigned to train");
      train_idx.push_back(members[0]);
      continue;
    }
    Rng rng(Rng::derive(seed, cell));
    rng.shuffle(members);
    const double exact = train_fraction * static_cast<double>(members.size());
    auto n_train = static_cast<std::size_t>(std::floor(exact + 0.5));
    n_train = std::min(std::max<std::size_t>(n_train, 1), members.size() - 1);
    train_idx.insert(train_idx.end(), members.begin(), members.begin() + n_train);
    test_idx.insert(test_idx.end(), members.begin() + n_train, members.end());
  }
  // Keep the original corpus order within each partition.
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  for (std::size_t s : train_idx) result.train.samples.push_back(dataset.samples[s]);
  for (std::size_t s : test_idx) result.test.samples.push_back(dataset.samples[s]);
  return result;
}

FingerprintDataset select_top_aps(const FingerprintDataset& dataset, std::size_t n_aps) {
  if (n_aps < 2) throw std::invalid_argument("select_top_aps: need at least 2 APs");
  if (n_aps > dataset.ap_roster.size()) {
    throw std::invalid_argument("select_top_aps: requested " + std::to_string(n_aps) +
                                " of " + std::to_string(dataset.ap_roster.size()) + " APs");
  }
  std::vector<std::size_t> counts(dataset.ap_roster.size(), 0);
  for (const RssSample& sample : dataset.samples) {
    for (std::size_t i = 0; i < sample.readings.size(); ++i) {
      if (sample.readings[i]) ++counts[i];
    }
  }
  std::vector<std::size_t> order(dataset.ap_roster.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return dataset.ap_roster[a] < dataset.ap_roster[b];
  });
  order.resize(n_aps);

  FingerprintDataset out;
  out.site = dataset.site;
  out.grid_cell_size = dataset.grid_cell_size;
  for (std::size_t i : order) out.ap_roster.push_back(dataset.ap_roster[i]);
  out.samples.reserve(dataset.samples.size());
  for (const RssSample& sample : dataset.samples) {
    RssSample reduced = sample;
    reduced.readings.clear();
    reduced.readings.reserve(n_aps);
    for (std::size_t i : order) reduced.readings.push_back(sample.readings[i]);
    out.samples.push_back(std::move(reduced));
  }
  return out;
}

}  // namespace edgeloc
