// edgeloc: capsule-network WiFi RSS indoor localization toolkit.
//
// Subcommands cover the full pipeline: synthetic corpus generation, UJI CSV
// ingestion, training, evaluation, parameter grid search, model serving,
// on-device localization and latency benchmarking.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "edgeloc/bundle.hpp"
#include "edgeloc/client.hpp"
#include "edgeloc/datasets.hpp"
#include "edgeloc/eval.hpp"
#include "edgeloc/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace edgeloc;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  return sha256_hex(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

/// Corpus paths may be a .jsonl file or a directory holding one.
std::string resolve_corpus(const std::string& path, std::vector<std::string> names) {
  if (!fs::is_directory(path)) return path;
  for (const std::string& name : names) {
    const std::string candidate = (fs::path(path) / name).string();
    if (fs::exists(candidate)) return candidate;
  }
  std::string tried;
  for (const std::string& name : names) tried += " " + name;
  throw std::runtime_error("no corpus found in " + path + " (tried:" + tried + ")");
}

void emit(const json& report, const std::string& out_path) {
  if (out_path.empty() || out_path == "-") {
    std::cout << report.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << report.dump(2) << "\n";
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw std::runtime_error("bind must be host:port, got " + bind);
  return {bind.substr(0, colon), std::stoi(bind.substr(colon + 1))};
}

/// --config file.json holds flag defaults ({"epochs": 8, ...}); explicit
/// command-line flags win.
std::vector<std::string> inject_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("cannot open config file " + config_path);
  json file;
  in >> file;
  if (!file.is_object()) throw std::runtime_error("config file must hold a JSON object");
  for (const auto& [key, value] : file.items()) {
    const std::string flag = "--" + key;
    bool present = false;
    for (const std::string& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) present = true;
    }
    if (present) continue;
    if (value.is_string()) {
      args.push_back(flag + "=" + value.get<std::string>());
    } else {
      args.push_back(flag + "=" + value.dump());
    }
  }
  return args;
}

struct CorpusBundle {
  FingerprintDataset data;
  std::string path;
  std::string sha256;
};

CorpusBundle load_corpus_file(const std::string& raw_path, std::vector<std::string> names) {
  CorpusBundle out;
  out.path = resolve_corpus(raw_path, std::move(names));
  out.data = read_corpus(out.path);
  out.sha256 = file_sha256(out.path);
  return out;
}

json epoch_log_json(const std::vector<EpochLog>& log) {
  json epochs = json::array();
  for (const EpochLog& e : log) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy},
                      {"timing", {{"wall_ms", e.wall_ms}}}});
  }
  return epochs;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string preset = "desk";
  std::string out;
  std::uint64_t seed = 42;
  double sigma = -1.0;
  double rp_spacing = -1.0;
  int samples_per_rp = -1;
  double cell_size = -1.0;
};

int run_gen(const GenArgs& args) {
  SyntheticSiteConfig cfg;
  if (args.preset == "desk") {
    cfg = SyntheticSiteConfig::desk(args.seed);
  } else if (args.preset == "four-cell") {
    cfg = SyntheticSiteConfig::four_cell(args.seed);
  } else {
    throw std::runtime_error("unknown preset " + args.preset + " (desk, four-cell)");
  }
  if (args.sigma >= 0.0) cfg.shadowing_sigma_db = args.sigma;
  if (args.rp_spacing > 0.0) cfg.rp_spacing_m = args.rp_spacing;
  if (args.samples_per_rp > 0) cfg.samples_per_rp = args.samples_per_rp;
  if (args.cell_size > 0.0) cfg.grid_cell_size = args.cell_size;

  const FingerprintDataset ds = generate_synthetic(cfg);
  std::string path = args.out;
  if (path.find(".jsonl") == std::string::npos) {
    fs::create_directories(path);
    path = (fs::path(path) / "fingerprints.jsonl").string();
  }
  write_corpus(ds, path);
  const GridMap grid(ds.site, ds.grid_cell_size);
  emit(json{{"command", "gen"},
            {"path", path},
            {"corpus_sha256", file_sha256(path)},
            {"samples", ds.samples.size()},
            {"aps", ds.ap_roster.size()},
            {"cells", grid.num_cells()},
            {"config",
             {{"preset", args.preset},
              {"seed", cfg.seed},
              {"sigma_db", cfg.shadowing_sigma_db},
              {"rp_spacing_m", cfg.rp_spacing_m},
              {"samples_per_rp", cfg.samples_per_rp},
              {"cell_size_m", cfg.grid_cell_size}}}},
       "");
  return 0;
}

// ---------------------------------------------------------------------------
// ingest-uji

struct IngestArgs {
  std::string train_csv;
  std::string test_csv;
  int building = 0;
  int top_aps = 0;
  double cell_size = 1.6;
  std::string out;
};

int run_ingest(const IngestArgs& args) {
  fs::create_directories(args.out);
  json report{{"command", "ingest-uji"}, {"building", args.building}};

  FingerprintDataset train, test;
  bool have_test = !args.test_csv.empty();
  if (have_test) {
    std::tie(train, test) = ingest_uji_pair(args.train_csv, args.test_csv, args.building,
                                            args.cell_size);
  } else {
    train = ingest_uji(args.train_csv, args.building, args.cell_size);
  }
  report["train_rows"] = train.samples.size();
  report["total_aps"] = train.ap_roster.size();
  if (have_test) report["test_rows"] = test.samples.size();

  if (args.top_aps > 0) {
    // Rank AP occurrence on the training rows only, then project both.
    const FingerprintDataset reduced = select_top_aps(train, static_cast<std::size_t>(args.top_aps));
    if (have_test) {
      FingerprintDataset test_reduced;
      test_reduced.ap_roster = reduced.ap_roster;
      test_reduced.site = test.site;
      test_reduced.grid_cell_size = test.grid_cell_size;
      std::vector<std::size_t> indices;
      for (const std::string& ap : reduced.ap_roster) {
        for (std::size_t i = 0; i < test.ap_roster.size(); ++i) {
          if (test.ap_roster[i] == ap) indices.push_back(i);
        }
      }
      for (const RssSample& s : test.samples) {
        RssSample r = s;
        r.readings.clear();
        for (std::size_t i : indices) r.readings.push_back(s.readings[i]);
        test_reduced.samples.push_back(std::move(r));
      }
      test = std::move(test_reduced);
    }
    train = reduced;
    report["aps_kept"] = train.ap_roster.size();
  }

  const std::string train_path = (fs::path(args.out) / "train.jsonl").string();
  write_corpus(train, train_path);
  report["train_path"] = train_path;
  report["train_sha256"] = file_sha256(train_path);
  if (have_test) {
    const std::string test_path = (fs::path(args.out) / "test.jsonl").string();
    write_corpus(test, test_path);
    report["test_path"] = test_path;
    report["test_sha256"] = file_sha256(test_path);
  }
  const GridMap grid(train.site, train.grid_cell_size);
  report["cells"] = grid.num_cells();
  report["site"] = {{"width", train.site.width}, {"height", train.site.height}};
  emit(report, "");
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string test;
  double beta = 0.8;
  std::uint64_t seed = 42;
  int epochs = 12;
  int batch_size = 16;
  double lr = 5e-3;
  double weight_decay = 0.0;
  int threads = 0;
  int n_filters = 64;
  int n_channels = 8;
  int dim_capsule = 16;
  int primary_kernel = 2;
  int primary_stride = 2;
  int routing_iterations = 3;
  std::string out = "model.caps";
  std::string log_path;
  std::int64_t model_version = 1;
  bool quiet = false;
};

int run_train(const TrainArgs& args) {
  const double t0 = now_ms();
  const CorpusBundle corpus = load_corpus_file(args.data, {"fingerprints.jsonl", "train.jsonl"});

  FingerprintDataset train_set, val_set;
  json provenance{{"corpus", corpus.path}, {"corpus_sha256", corpus.sha256}};
  double min_rss;
  if (!args.test.empty()) {
    const CorpusBundle test_corpus = load_corpus_file(args.test, {"test.jsonl", "fingerprints.jsonl"});
    train_set = corpus.data;
    val_set = test_corpus.data;
    if (train_set.ap_roster != val_set.ap_roster) {
      throw std::runtime_error("train and test corpora have different AP rosters");
    }
    provenance["test_corpus"] = test_corpus.path;
    provenance["test_sha256"] = test_corpus.sha256;
    // The corpus minimum spans all fingerprints, train and test together.
    min_rss = std::min(corpus_min_rss(train_set), corpus_min_rss(val_set));
  } else {
    const SplitResult parts = split(corpus.data, args.beta, args.seed);
    for (const std::string& w : parts.warnings) std::cerr << "warning: " << w << "\n";
    train_set = parts.train;
    val_set = parts.test;
    provenance["train_fraction"] = args.beta;
    min_rss = corpus_min_rss(corpus.data);
  }

  const GridMap grid(train_set.site, train_set.grid_cell_size);
  CapsNetConfig config;
  config.n_aps = static_cast<int>(train_set.ap_roster.size());
  config.num_grids = static_cast<int>(grid.num_cells());
  config.conv1.n_filters = args.n_filters;
  config.primary.kernel = args.primary_kernel;
  config.primary.stride = args.primary_stride;
  config.primary.n_channels = args.n_channels;
  config.primary.dim_capsule = args.dim_capsule;
  config.routing_iterations = args.routing_iterations;
  config.validate();

  const PreparedDataset train_prep = prepare(train_set, grid, min_rss);
  const PreparedDataset val_prep = prepare(val_set, grid, min_rss);

  TrainOptions options;
  options.epochs = args.epochs;
  options.batch_size = args.batch_size;
  options.learning_rate = args.lr;
  options.weight_decay = args.weight_decay;
  options.seed = args.seed;
  options.threads = args.threads;

  const bool quiet = args.quiet;
  const TrainResult result =
      train(train_prep, val_prep, config, options, [quiet](const EpochLog& e) {
        if (quiet) return;
        std::cerr << "epoch " << e.epoch << ": train_loss=" << e.train_loss
                  << " train_acc=" << e.train_accuracy << " val_loss=" << e.val_loss
                  << " val_acc=" << e.val_accuracy << " (" << static_cast<int>(e.wall_ms)
                  << " ms)\n";
      });
  if (result.diverged) {
    std::cerr << "warning: training diverged (" << result.divergence_reason
              << "); last good checkpoint kept\n";
  }

  const ModelBundle bundle = make_bundle(result.params, config, grid, train_set.ap_roster,
                                         min_rss, args.model_version, iso8601_now());
  save_bundle(bundle, args.out);

  json report{{"command", "train"},
              {"config", json(config)},
              {"seed", args.seed},
              {"provenance", provenance},
              {"train_samples", train_set.samples.size()},
              {"val_samples", val_set.samples.size()},
              {"min_rss", min_rss},
              {"epochs", epoch_log_json(result.log)},
              {"diverged", result.diverged},
              {"model",
               {{"path", args.out},
                {"weights_sha256", bundle.weights_sha256},
                {"model_version", bundle.model_version}}},
              {"timing", {{"total_wall_ms", now_ms() - t0}}}};
  if (!args.log_path.empty()) {
    emit(report, args.log_path);
  }
  emit(report, "");
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string data;
  std::string test;
  std::string model = "model.caps";
  double beta = 0.8;
  std::uint64_t seed = 42;
  int batch_size = 50;
  int knn_k = 0;
  std::string out;
  std::string cdf_csv;
};

int run_eval(const EvalArgs& args) {
  const ModelBundle bundle = load_bundle(args.model);
  const GridMap grid = bundle.grid();

  FingerprintDataset train_set, test_set;
  json provenance;
  if (!args.test.empty()) {
    const CorpusBundle test_corpus = load_corpus_file(args.test, {"test.jsonl", "fingerprints.jsonl"});
    test_set = test_corpus.data;
    provenance["test_corpus"] = test_corpus.path;
    provenance["test_sha256"] = test_corpus.sha256;
    if (args.knn_k > 0) {
      const CorpusBundle train_corpus =
          load_corpus_file(args.data, {"fingerprints.jsonl", "train.jsonl"});
      train_set = train_corpus.data;
      provenance["corpus"] = train_corpus.path;
      provenance["corpus_sha256"] = train_corpus.sha256;
    }
  } else {
    const CorpusBundle corpus = load_corpus_file(args.data, {"fingerprints.jsonl", "train.jsonl"});
    const SplitResult parts = split(corpus.data, args.beta, args.seed);
    train_set = parts.train;
    test_set = parts.test;
    provenance["corpus"] = corpus.path;
    provenance["corpus_sha256"] = corpus.sha256;
    provenance["train_fraction"] = args.beta;
  }

  CapsNetLocalizer localizer(bundle.to_params(), bundle.config, grid, bundle.ap_roster,
                             bundle.min_rss, 1);
  EvalReport report = evaluate(localizer, test_set, grid, args.batch_size);
  report.config_snapshot = json{{"model", json(bundle.config)},
                                {"model_sha256", bundle.weights_sha256},
                                {"model_version", bundle.model_version},
                                {"seed", args.seed},
                                {"batch_size", args.batch_size},
                                {"provenance", provenance}};

  json out = report.to_json();
  out["command"] = "eval";
  if (args.knn_k > 0) {
    KnnLocalizer knn(train_set, grid, static_cast<std::size_t>(args.knn_k));
    const EvalReport knn_report = evaluate(knn, test_set, grid, args.batch_size, 1);
    out["knn"] = {{"k", args.knn_k},
                  {"accuracy", knn_report.accuracy},
                  {"mean_error_m", knn_report.mean_error_m}};
  }
  if (!args.cdf_csv.empty()) write_text(args.cdf_csv, report.cdf_csv());
  emit(out, args.out);
  return 0;
}

// ---------------------------------------------------------------------------
// grid-search

struct GridSearchArgs {
  std::string data;
  std::string space = "default";
  int epochs = 5;
  int batch_size = 32;
  double beta = 0.8;
  std::uint64_t seed = 42;
  int threads = 0;
  std::string out;
};

std::vector<GridSearchPoint> parse_space(const std::string& spec) {
  if (spec == "default") return default_search_space();
  std::vector<GridSearchPoint> space;
  std::istringstream in(spec);
  std::string token;
  while (std::getline(in, token, ',')) {
    GridSearchPoint p;
    if (std::sscanf(token.c_str(), "%d/%d/%d", &p.n_filters, &p.n_channels, &p.dim_capsule) != 3) {
      throw std::runtime_error("bad search-space token '" + token +
                               "' (want n_filters/n_channels/dim_capsule)");
    }
    space.push_back(p);
  }
  if (space.empty()) throw std::runtime_error("empty search space");
  return space;
}

int run_grid_search(const GridSearchArgs& args) {
  const CorpusBundle corpus = load_corpus_file(args.data, {"fingerprints.jsonl", "train.jsonl"});
  GridSearchBudget budget;
  budget.epochs = args.epochs;
  budget.batch_size = args.batch_size;
  budget.train_fraction = args.beta;
  budget.seed = args.seed;
  budget.threads = args.threads;

  const std::vector<GridSearchEntry> entries =
      grid_search(corpus.data, parse_space(args.space), budget);

  std::cerr << "rank  n_filters  n_channels  dim  accuracy   time_ms/sample\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const GridSearchEntry& e = entries[i];
    char line[128];
    std::snprintf(line, sizeof(line), "%4zu  %9d  %10d  %3d  %8.4f   %.4f%s\n", i + 1,
                  e.point.n_filters, e.point.n_channels, e.point.dim_capsule, e.accuracy,
                  e.mean_positioning_time_ms, e.diverged ? "  (diverged)" : "");
    std::cerr << line;
  }

  json ranked = json::array();
  for (const GridSearchEntry& e : entries) ranked.push_back(e.to_json());
  emit(json{{"command", "grid-search"},
            {"seed", args.seed},
            {"epochs", args.epochs},
            {"corpus_sha256", corpus.sha256},
            {"ranked", std::move(ranked)}},
       args.out);
  return 0;
}

// ---------------------------------------------------------------------------
// serve / locate

int run_serve(const std::string& model, const std::string& bind) {
  const ModelBundle bundle = load_bundle(model);
  const auto [host, port] = parse_bind(bind);
  EdgeServer server(bundle);
  std::cerr << "serving model_version=" << bundle.model_version << " on " << host << ":" << port
            << "\n";
  if (!server.listen(host, port)) {
    throw std::runtime_error("cannot bind " + bind);
  }
  return 0;
}

int run_locate(const std::string& server, const std::string& sample_path,
               const std::string& cache_dir_flag) {
  const auto [host, port] = parse_bind(server);
  const std::string cache_dir = resolve_cache_dir(cache_dir_flag);
  const SyncResult sync = client_sync(host, port, cache_dir);
  for (const std::string& w : sync.warnings) std::cerr << "warning: " << w << "\n";

  std::ifstream in(sample_path);
  if (!in) throw std::runtime_error("cannot open sample file " + sample_path);
  json sample;
  in >> sample;
  const json& readings_json = sample.contains("readings") ? sample["readings"] : sample;
  std::map<std::string, double> readings;
  for (const auto& [ap, value] : readings_json.items()) {
    if (!value.is_null()) readings[ap] = value.get<double>();
  }

  const LocateResult res = client_locate(sync.bundle, readings);
  for (const std::string& w : res.warnings) std::cerr << "warning: " << w << "\n";
  emit(json{{"command", "locate"},
            {"grid_index", res.grid_index},
            {"center_x", res.center_x},
            {"center_y", res.center_y},
            {"model_version", sync.bundle.model_version},
            {"cache", {{"dir", cache_dir}, {"downloaded", res.elapsed_ms >= 0.0 && sync.downloaded},
                       {"from_cache", sync.from_cache}}},
            {"timing", {{"elapsed_ms", res.elapsed_ms}}}},
       "");
  return 0;
}

// ---------------------------------------------------------------------------
// bench-latency

struct BenchArgs {
  std::string model = "model.caps";
  std::string data;
  std::string batch_sizes = "20,30,40,50";
  int samples = 2000;
  int reps = 5;
  std::uint64_t seed = 42;
  std::string out;
};

int run_bench(const BenchArgs& args) {
  const ModelBundle bundle = load_bundle(args.model);
  const CorpusBundle corpus = load_corpus_file(args.data, {"fingerprints.jsonl", "train.jsonl"});
  const GridMap grid = bundle.grid();

  std::vector<int> batch_sizes;
  {
    std::istringstream in(args.batch_sizes);
    std::string token;
    while (std::getline(in, token, ',')) batch_sizes.push_back(std::stoi(token));
  }
  if (batch_sizes.empty()) throw std::runtime_error("no batch sizes given");

  std::vector<const RssSample*> pool;
  for (const RssSample& s : corpus.data.samples) pool.push_back(&s);
  if (static_cast<int>(pool.size()) > args.samples) pool.resize(static_cast<std::size_t>(args.samples));

  // Timing stays on one thread for stability.
  CapsNetLocalizer localizer(bundle.to_params(), bundle.config, grid, bundle.ap_roster,
                             bundle.min_rss, 1);

  json rows = json::array();
  std::cerr << "batch_size  mean_ms_per_sample  median_ms_per_sample\n";
  for (int batch_size : batch_sizes) {
    std::vector<std::vector<const RssSample*>> batches;
    for (std::size_t lo = 0; lo < pool.size(); lo += static_cast<std::size_t>(batch_size)) {
      const std::size_t hi = std::min(pool.size(), lo + static_cast<std::size_t>(batch_size));
      batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(lo),
                           pool.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    localizer.predict(batches.front());  // warm-up excluded
    std::vector<double> per_pass;
    for (int rep = 0; rep < args.reps; ++rep) {
      const double t0 = now_ms();
      for (const auto& batch : batches) localizer.predict(batch);
      per_pass.push_back((now_ms() - t0) / static_cast<double>(pool.size()));
    }
    double mean = 0.0;
    for (double t : per_pass) mean += t;
    mean /= static_cast<double>(per_pass.size());
    std::sort(per_pass.begin(), per_pass.end());
    const double median = per_pass[per_pass.size() / 2];
    char line[96];
    std::snprintf(line, sizeof(line), "%10d  %18.4f  %20.4f\n", batch_size, mean, median);
    std::cerr << line;
    rows.push_back({{"batch_size", batch_size},
                    {"timing", {{"mean_ms_per_sample", mean}, {"median_ms_per_sample", median}}}});
  }
  emit(json{{"command", "bench-latency"},
            {"model_sha256", bundle.weights_sha256},
            {"corpus_sha256", corpus.sha256},
            {"samples", pool.size()},
            {"reps", args.reps},
            {"results", std::move(rows)}},
       args.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule-network WiFi RSS indoor localization toolkit"};
  app.require_subcommand(1);

  std::string config_file;  // parsed manually in inject_config_args

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic fingerprint corpus");
  gen->add_option("--preset", gen_args.preset, "desk or four-cell");
  gen->add_option("--out", gen_args.out, "output directory or .jsonl path")->required();
  gen->add_option("--seed", gen_args.seed, "rng seed");
  gen->add_option("--sigma", gen_args.sigma, "shadowing sigma in dB");
  gen->add_option("--rp-spacing", gen_args.rp_spacing, "reference-point spacing in meters");
  gen->add_option("--samples-per-rp", gen_args.samples_per_rp, "samples per reference point");
  gen->add_option("--cell-size", gen_args.cell_size, "grid cell size in meters");
  gen->add_option("--config", config_file, "JSON file with flag defaults");

  IngestArgs ingest_args;
  CLI::App* ingest = app.add_subcommand("ingest-uji", "ingest a UJIIndoorLoc-format CSV");
  ingest->add_option("--train-csv", ingest_args.train_csv, "training CSV path")->required();
  ingest->add_option("--test-csv", ingest_args.test_csv, "validation CSV path");
  ingest->add_option("--building", ingest_args.building, "building id to keep");
  ingest->add_option("--top-aps", ingest_args.top_aps, "keep the N most-seen APs (0 = all)");
  ingest->add_option("--cell-size", ingest_args.cell_size, "grid cell size in meters");
  ingest->add_option("--out", ingest_args.out, "output directory")->required();
  ingest->add_option("--config", config_file, "JSON file with flag defaults");

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a corpus");
  train_cmd->add_option("--data", train_args.data, "corpus path")->required();
  train_cmd->add_option("--test", train_args.test, "held-out corpus (else --beta split)");
  train_cmd->add_option("--beta", train_args.beta, "training fraction for the split");
  train_cmd->add_option("--seed", train_args.seed, "rng seed");
  train_cmd->add_option("--epochs", train_args.epochs, "training epochs");
  train_cmd->add_option("--batch-size", train_args.batch_size, "mini-batch size");
  train_cmd->add_option("--lr", train_args.lr, "learning rate");
  train_cmd->add_option("--weight-decay", train_args.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--threads", train_args.threads, "worker threads (0 = auto)");
  train_cmd->add_option("--n-filters", train_args.n_filters, "conv layer filters");
  train_cmd->add_option("--n-channels", train_args.n_channels, "primary capsule channels");
  train_cmd->add_option("--dim-capsule", train_args.dim_capsule, "capsule dimension");
  train_cmd->add_option("--primary-kernel", train_args.primary_kernel, "primary conv kernel");
  train_cmd->add_option("--primary-stride", train_args.primary_stride, "primary conv stride");
  train_cmd->add_option("--routing-iterations", train_args.routing_iterations,
                        "routing iterations");
  train_cmd->add_option("--out", train_args.out, "model bundle output path");
  train_cmd->add_option("--log", train_args.log_path, "also write the report here");
  train_cmd->add_option("--model-version", train_args.model_version, "bundle version");
  train_cmd->add_flag("--quiet", train_args.quiet, "suppress per-epoch lines");
  train_cmd->add_option("--config", config_file, "JSON file with flag defaults");

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a model");
  eval_cmd->add_option("--data", eval_args.data, "corpus path (split by --beta)");
  eval_cmd->add_option("--test", eval_args.test, "held-out corpus used as-is");
  eval_cmd->add_option("--model", eval_args.model, "model bundle path");
  eval_cmd->add_option("--beta", eval_args.beta, "training fraction for the split");
  eval_cmd->add_option("--seed", eval_args.seed, "rng seed (split)");
  eval_cmd->add_option("--batch-size", eval_args.batch_size, "inference batch size");
  eval_cmd->add_option("--knn-k", eval_args.knn_k, "also run the kNN baseline (0 = off)");
  eval_cmd->add_option("--out", eval_args.out, "report path (default stdout)");
  eval_cmd->add_option("--cdf-csv", eval_args.cdf_csv, "write error CDF points as CSV");
  eval_cmd->add_option("--config", config_file, "JSON file with flag defaults");

  GridSearchArgs gs_args;
  CLI::App* gs = app.add_subcommand("grid-search", "sweep n_filters/n_channels/dim_capsule");
  gs->add_option("--data", gs_args.data, "corpus path")->required();
  gs->add_option("--space", gs_args.space, "'default' or comma list like 64/8/16,32/8/8");
  gs->add_option("--epochs", gs_args.epochs, "epoch budget per configuration");
  gs->add_option("--batch-size", gs_args.batch_size, "mini-batch size");
  gs->add_option("--beta", gs_args.beta, "training fraction");
  gs->add_option("--seed", gs_args.seed, "shared rng seed");
  gs->add_option("--threads", gs_args.threads, "worker threads (0 = auto)");
  gs->add_option("--out", gs_args.out, "report path (default stdout)");
  gs->add_option("--config", config_file, "JSON file with flag defaults");

  std::string serve_model, serve_bind = "127.0.0.1:8080";
  CLI::App* serve = app.add_subcommand("serve", "serve a model bundle over HTTP");
  serve->add_option("--model", serve_model, "model bundle path")->required();
  serve->add_option("--bind", serve_bind, "host:port");
  serve->add_option("--config", config_file, "JSON file with flag defaults");

  std::string locate_server, locate_sample, locate_cache;
  CLI::App* locate = app.add_subcommand("locate", "sync a model and localize a sample");
  locate->add_option("--server", locate_server, "server host:port")->required();
  locate->add_option("--sample", locate_sample, "sample JSON path")->required();
  locate->add_option("--cache-dir", locate_cache, "bundle cache directory");
  locate->add_option("--config", config_file, "JSON file with flag defaults");

  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench-latency", "positioning time vs batch size");
  bench->add_option("--model", bench_args.model, "model bundle path");
  bench->add_option("--data", bench_args.data, "corpus path")->required();
  bench->add_option("--batch-sizes", bench_args.batch_sizes, "comma-separated batch sizes");
  bench->add_option("--samples", bench_args.samples, "max samples to time");
  bench->add_option("--reps", bench_args.reps, "timing repetitions");
  bench->add_option("--seed", bench_args.seed, "rng seed");
  bench->add_option("--out", bench_args.out, "report path (default stdout)");
  bench->add_option("--config", config_file, "JSON file with flag defaults");

  try {
    const std::vector<std::string> args = inject_config_args(argc, argv);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);  // CLI11 consumes tokens back to front

    if (*gen) return run_gen(gen_args);
    if (*ingest) return run_ingest(ingest_args);
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*gs) return run_grid_search(gs_args);
    if (*serve) return run_serve(serve_model, serve_bind);
    if (*locate) return run_locate(locate_server, locate_sample, locate_cache);
    if (*bench) return run_bench(bench_args);
    throw std::runtime_error("no subcommand");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
