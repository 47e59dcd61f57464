#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "edgeloc/fingerprint.hpp"
#include "edgeloc/rng.hpp"
#include "oracles.hpp"

using namespace edgeloc;

namespace {

RssSample sample_at(double x, double y, std::vector<Reading> readings) {
  RssSample s;
  s.x = x;
  s.y = y;
  s.readings = std::move(readings);
  return s;
}

}  // namespace

TEST_CASE("normalize handles the not-detected branch and boundaries") {
  RssSample s = sample_at(0, 0, {std::nullopt, -60.0, -104.0});
  const std::vector<double> r = normalize(s, -104.0);
  CHECK(r[0] == 0.0);                             // not detected
  CHECK(r[1] == doctest::Approx(4.4).epsilon(1e-12));  // 0.1 * (-60 - -104)
  CHECK(r[2] == 0.0);                             // reading equals the minimum

  RssSample below = sample_at(0, 0, {-120.0});
  CHECK_THROWS_WITH_AS(normalize(below, -104.0), doctest::Contains("below corpus minimum"),
                       std::invalid_argument);
}

TEST_CASE("normalize is monotone in the detected reading") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = rng.uniform(-104.0, 0.0);
    const double b = rng.uniform(-104.0, 0.0);
    const auto ra = normalize(sample_at(0, 0, {a}), -104.0)[0];
    const auto rb = normalize(sample_at(0, 0, {b}), -104.0)[0];
    if (a >= b) {
      CHECK(ra >= rb);
    } else {
      CHECK(ra <= rb);
    }
    CHECK(ra >= 0.0);
  }
}

TEST_CASE("difference matrix direct example") {
  const FeatureMatrix r = difference_matrix({1.0, 2.0, 3.0});
  const std::vector<double> want = {0, -1, -2, 1, 0, -1, 2, 1, 0};
  REQUIRE(r.n == 3);
  for (std::size_t i = 0; i < 9; ++i) CHECK(r.values[i] == want[i]);
}

TEST_CASE("difference matrix of a constant vector is zero") {
  const FeatureMatrix r = difference_matrix(std::vector<double>(5, 3.7));
  for (double v : r.values) CHECK(v == 0.0);
}

TEST_CASE("difference matrix matches the nested-loop oracle and is antisymmetric") {
  Rng rng(4);
  std::vector<double> r(40);
  for (double& v : r) v = rng.uniform(0.0, 11.0);
  const FeatureMatrix fm = difference_matrix(r);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(fm.at(i, i) == 0.0);
    for (std::size_t j = 0; j < 40; ++j) {
      CHECK(fm.at(i, j) == r[i] - r[j]);       // elementwise oracle
      CHECK(fm.at(i, j) + fm.at(j, i) == 0.0);  // R + R^T = 0
    }
  }
  CHECK_THROWS_AS(difference_matrix({1.0}), std::invalid_argument);
}

TEST_CASE("grid partition of a 3.2 m square") {
  const GridMap grid = build_grid(SiteRect{0, 0, 3.2, 3.2}, 1.6);
  CHECK(grid.num_cells() == 4);
  CHECK(grid.columns() == 2);
  CHECK(grid.rows() == 2);
  const Tensor label = one_hot_label(sample_at(0.1, 0.1, {}), grid);
  CHECK(label[0] == 1.0);
  CHECK(label[1] == 0.0);
  CHECK(label[2] == 0.0);
  CHECK(label[3] == 0.0);
}

TEST_CASE("interior boundary points belong to the higher-index cell") {
  const GridMap grid = build_grid(SiteRect{0, 0, 3.2, 3.2}, 1.6);
  CHECK(grid.cell_index(1.6, 0.0) == 1);  // x boundary -> higher column
  CHECK(grid.cell_index(0.0, 1.6) == 2);  // y boundary -> higher row
  CHECK(grid.cell_index(1.6, 1.6) == 3);
  // Max edges stay inside the last cell.
  CHECK(grid.cell_index(3.2, 3.2) == 3);
  CHECK_THROWS_WITH_AS(grid.cell_index(3.3, 0.0), doctest::Contains("outside"),
                       std::invalid_argument);
}

TEST_CASE("12.8 x 6.4 grid matches row-major enumeration") {
  const GridMap grid = build_grid(SiteRect{0, 0, 12.8, 6.4}, 1.6);
  REQUIRE(grid.columns() == 8);
  REQUIRE(grid.rows() == 4);
  REQUIRE(grid.num_cells() == 32);
  // Enumeration oracle: probe every cell center and recompute the index.
  std::set<std::size_t> seen;
  for (std::size_t row = 0; row < 4; ++row) {
    for (std::size_t col = 0; col < 8; ++col) {
      const double cx = 1.6 * static_cast<double>(col) + 0.8;
      const double cy = 1.6 * static_cast<double>(row) + 0.8;
      const std::size_t idx = grid.cell_index(cx, cy);
      CHECK(idx == row * 8 + col);
      CHECK(grid.cell(idx).center_x == doctest::Approx(cx).epsilon(1e-12));
      CHECK(grid.cell(idx).center_y == doctest::Approx(cy).epsilon(1e-12));
      seen.insert(idx);
    }
  }
  CHECK(seen.size() == 32);  // dense 0..G-1
}

TEST_CASE("one-hot labels have unit L1 norm and length G") {
  const GridMap grid = build_grid(SiteRect{0, 0, 12.8, 6.4}, 1.6);
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const double x = rng.uniform(0.0, 12.8);
    const double y = rng.uniform(0.0, 6.4);
    const Tensor label = one_hot_label(sample_at(x, y, {}), grid);
    REQUIRE(label.size() == 32);
    double l1 = 0.0;
    for (std::size_t i = 0; i < label.size(); ++i) l1 += std::abs(label[i]);
    CHECK(l1 == 1.0);
  }
}

namespace {

FingerprintDataset lattice_dataset(std::size_t per_cell, double cell = 1.6, std::size_t cols = 2,
                                   std::size_t rows = 1) {
  FingerprintDataset ds;
  ds.ap_roster = {"AP00", "AP01"};
  ds.site = SiteRect{0, 0, cell * static_cast<double>(cols), cell * static_cast<double>(rows)};
  ds.grid_cell_size = cell;
  Rng rng(77);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      for (std::size_t k = 0; k < per_cell; ++k) {
        const double x = cell * (static_cast<double>(c) + 0.1 + 0.8 * rng.uniform());
        const double y = cell * (static_cast<double>(r) + 0.1 + 0.8 * rng.uniform());
        ds.samples.push_back(sample_at(x, y, {-40.0 - rng.uniform(), -50.0 - rng.uniform()}));
      }
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("split of 33,600 samples at 0.8 gives 26,880 / 6,720") {
  // 112 cells x 300 samples, mirroring the field corpus scale.
  const FingerprintDataset ds = lattice_dataset(300, 1.6, 14, 8);
  REQUIRE(ds.samples.size() == 33600);
  const SplitResult parts = split(ds, 0.8, 123);
  CHECK(parts.train.samples.size() == 26880);
  CHECK(parts.test.samples.size() == 6720);
  CHECK(parts.warnings.empty());
}

TEST_CASE("split halves ten samples in one cell") {
  const FingerprintDataset ds = lattice_dataset(10, 1.6, 1, 1);
  const SplitResult parts = split(ds, 0.5, 9);
  CHECK(parts.train.samples.size() == 5);
  CHECK(parts.test.samples.size() == 5);
}

TEST_CASE("split is deterministic for a fixed seed") {
  const FingerprintDataset ds = lattice_dataset(40, 1.6, 3, 2);
  const SplitResult a = split(ds, 0.8, 42);
  const SplitResult b = split(ds, 0.8, 42);
  REQUIRE(a.train.samples.size() == b.train.samples.size());
  for (std::size_t i = 0; i < a.train.samples.size(); ++i) {
    CHECK(a.train.samples[i].x == b.train.samples[i].x);
    CHECK(a.train.samples[i].y == b.train.samples[i].y);
  }
  const SplitResult c = split(ds, 0.8, 43);
  bool any_diff = c.train.samples.size() != a.train.samples.size();
  for (std::size_t i = 0; !any_diff && i < a.train.samples.size(); ++i) {
    any_diff = a.train.samples[i].x != c.train.samples[i].x;
  }
  CHECK(any_diff);  // different seed actually reshuffles
}

TEST_CASE("split keeps both partitions populated per cell, within one sample") {
  const FingerprintDataset ds = lattice_dataset(25, 1.6, 4, 2);
  const GridMap grid(ds.site, ds.grid_cell_size);
  const SplitResult parts = split(ds, 0.7, 5);
  std::vector<std::size_t> train_count(grid.num_cells(), 0), test_count(grid.num_cells(), 0);
  for (const RssSample& s : parts.train.samples) ++train_count[grid.cell_index(s.x, s.y)];
  for (const RssSample& s : parts.test.samples) ++test_count[grid.cell_index(s.x, s.y)];
  for (std::size_t cell = 0; cell < grid.num_cells(); ++cell) {
    CHECK(train_count[cell] >= 1);
    CHECK(test_count[cell] >= 1);
    // 0.7 * 25 = 17.5 -> 17 or 18 in train
    CHECK(std::abs(static_cast<double>(train_count[cell]) - 17.5) <= 1.0);
  }
}

TEST_CASE("split sends a singleton cell to train with a warning") {
  FingerprintDataset ds = lattice_dataset(10, 1.6, 1, 1);
  ds.site = SiteRect{0, 0, 3.2, 1.6};
  ds.samples.push_back(sample_at(2.4, 0.8, {-40.0, -50.0}));  // alone in cell 1
  const SplitResult parts = split(ds, 0.5, 1);
  REQUIRE(parts.warnings.size() == 1);
  CHECK(parts.warnings[0].find("single sample") != std::string::npos);
  const GridMap grid(ds.site, ds.grid_cell_size);
  std::size_t train_in_cell1 = 0;
  for (const RssSample& s : parts.train.samples) {
    if (grid.cell_index(s.x, s.y) == 1) ++train_in_cell1;
  }
  CHECK(train_in_cell1 == 1);
  CHECK_THROWS_AS(split(ds, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(split(ds, 1.0, 1), std::invalid_argument);
}

TEST_CASE("select_top_aps ranks by detection count with identifier tie-break") {
  FingerprintDataset ds;
  ds.ap_roster = {"AP00", "AP01", "AP02", "AP03"};
  ds.site = SiteRect{0, 0, 1, 1};
  ds.grid_cell_size = 1.6;
  // Detection counts: AP00 = 2, AP01 = 3, AP02 = 1, AP03 = 2.
  ds.samples.push_back(sample_at(0.5, 0.5, {-40.0, -40.0, std::nullopt, -40.0}));
  ds.samples.push_back(sample_at(0.5, 0.5, {-41.0, -41.0, std::nullopt, std::nullopt}));
  ds.samples.push_back(sample_at(0.5, 0.5, {std::nullopt, -42.0, -42.0, -42.0}));

  const FingerprintDataset top3 = select_top_aps(ds, 3);
  // Counting oracle: AP01 (3), then AP00 and AP03 tied at 2 -> id order.
  CHECK(top3.ap_roster == std::vector<std::string>{"AP01", "AP00", "AP03"});
  CHECK(top3.samples[0].readings[0] == Reading{-40.0});
  CHECK(top3.samples[0].readings[1] == Reading{-40.0});
  CHECK(top3.samples[0].readings[2] == Reading{-40.0});
  CHECK(top3.samples[1].readings[2] == Reading{});  // AP03 missing in sample 1

  CHECK_THROWS_AS(select_top_aps(ds, 1), std::invalid_argument);
  CHECK_THROWS_AS(select_top_aps(ds, 5), std::invalid_argument);
}

TEST_CASE("select_top_aps degenerates to identifier order when all APs tie") {
  FingerprintDataset ds;
  ds.ap_roster = {"AP02", "AP00", "AP01"};
  ds.site = SiteRect{0, 0, 1, 1};
  ds.samples.push_back(sample_at(0.5, 0.5, {-40.0, -41.0, -42.0}));
  const FingerprintDataset top = select_top_aps(ds, 3);
  CHECK(top.ap_roster == std::vector<std::string>{"AP00", "AP01", "AP02"});
  CHECK(top.samples[0].readings[0] == Reading{-41.0});
  CHECK(top.samples[0].readings[1] == Reading{-42.0});
  CHECK(top.samples[0].readings[2] == Reading{-40.0});
}

TEST_CASE("select_top_aps ranking matches a counting oracle on a random corpus") {
  Rng rng(15);
  FingerprintDataset ds;
  const std::size_t n_aps = 20;
  for (std::size_t i = 0; i < n_aps; ++i) {
    ds.ap_roster.push_back("AP" + std::string(i < 10 ? "0" : "") + std::to_string(i));
  }
  ds.site = SiteRect{0, 0, 1, 1};
  for (int s = 0; s < 50; ++s) {
    std::vector<Reading> readings;
    for (std::size_t i = 0; i < n_aps; ++i) {
      if (rng.uniform() < 0.5) {
        readings.emplace_back(-40.0 - rng.uniform(0.0, 40.0));
      } else {
        readings.emplace_back(std::nullopt);
      }
    }
    ds.samples.push_back(sample_at(0.5, 0.5, std::move(readings)));
  }
  const std::size_t keep = 7;
  const FingerprintDataset top = select_top_aps(ds, keep);
  // Oracle: recount detections per kept AP; they must be ranked and at least
  // as frequent as every dropped AP.
  auto count_of = [&](const std::string& ap) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < ds.ap_roster.size(); ++i) {
      if (ds.ap_roster[i] == ap) idx = i;
    }
    std::size_t count = 0;
    for (const RssSample& s : ds.samples) {
      if (s.readings[idx]) ++count;
    }
    return count;
  };
  for (std::size_t i = 1; i < keep; ++i) {
    CHECK(count_of(top.ap_roster[i - 1]) >= count_of(top.ap_roster[i]));
  }
  std::set<std::string> kept(top.ap_roster.begin(), top.ap_roster.end());
  for (const std::string& ap : ds.ap_roster) {
    if (!kept.count(ap)) {
      for (const std::string& k : top.ap_roster) CHECK(count_of(k) >= count_of(ap));
    }
  }
}
