#include "edgeloc/capsnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "edgeloc/rng.hpp"

namespace edgeloc {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::shared_ptr<const Tensor> alias(const Tensor& t) {
  // Non-owning view; the referenced params must outlive the tape.
  return std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>{}, &t);
}

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

void MarginLossConfig::validate() const {
  check(m_minus > 0.0 && m_minus < m_plus && m_plus <= 1.0,
        "margin: need 0 < m_minus < m_plus <= 1");
  check(lambda > 0.0, "margin: lambda must be positive");
}

void CapsNetConfig::validate() const {
  check(n_aps >= 2, "config: n_aps must be >= 2");
  check(num_grids >= 2, "config: num_grids must be >= 2");
  check(routing_iterations >= 1, "config: routing iterations must be >= 1");
  check(conv1.kernel >= 1 && conv1.stride >= 1 && conv1.n_filters >= 1, "config: bad conv1");
  check(primary.kernel >= 1 && primary.stride >= 1 && primary.n_channels >= 1 &&
            primary.dim_capsule >= 1,
        "config: bad primary layer");
  check(conv1.kernel <= n_aps, "config: conv1 kernel " + std::to_string(conv1.kernel) +
                                   " exceeds input side " + std::to_string(n_aps));
  check(primary.kernel <= conv1_out(), "config: primary kernel " +
                                           std::to_string(primary.kernel) +
                                           " exceeds conv1 output side " +
                                           std::to_string(conv1_out()));
  margin.validate();
}

CapsNetParams CapsNetParams::init(const CapsNetConfig& config, std::uint64_t seed) {
  config.validate();
  const auto k = static_cast<std::size_t>(config.conv1.kernel);
  const auto pk = static_cast<std::size_t>(config.primary.kernel);
  const auto nf = static_cast<std::size_t>(config.conv1.n_filters);
  const auto pc = static_cast<std::size_t>(config.primary.n_channels * config.primary.dim_capsule);
  const auto p = static_cast<std::size_t>(config.num_primary_capsules());
  const auto g = static_cast<std::size_t>(config.num_grids);
  const auto d = static_cast<std::size_t>(config.primary.dim_capsule);

  CapsNetParams params;
  params.conv1_filters = Tensor({k, k, 1, nf});
  params.conv1_bias = Tensor({nf});
  params.primary_filters = Tensor({pk, pk, nf, pc});
  params.primary_bias = Tensor({pc});
  params.routing_weights = Tensor({p, g, d, d});

  auto fill = [](Tensor& t, double stddev, Rng& rng) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian(0.0, stddev);
  };
  // Fan-in scaling with a damped primary layer: each capsule sums dim_capsule
  // components, so a plain 1/sqrt(fan_in) puts pre-squash norms around
  // sqrt(dim) and saturates the squash from the first step.
  Rng r0(Rng::derive(seed, 0));
  fill(params.conv1_filters, 1.0 / std::sqrt(static_cast<double>(k * k)), r0);
  Rng r1(Rng::derive(seed, 1));
  fill(params.primary_filters, 0.2 / std::sqrt(static_cast<double>(pk * pk * nf)), r1);
  Rng r2(Rng::derive(seed, 2));
  fill(params.routing_weights, 1.0 / std::sqrt(static_cast<double>(d)), r2);
  return params;
}

std::vector<std::pair<std::string, Tensor*>> CapsNetParams::named() {
  return {{"conv1.filters", &conv1_filters},
          {"conv1.bias", &conv1_bias},
          {"primary.filters", &primary_filters},
          {"primary.bias", &primary_bias},
          {"routing.weights", &routing_weights}};
}

std::vector<std::pair<std::string, const Tensor*>> CapsNetParams::named() const {
  return {{"conv1.filters", &conv1_filters},
          {"conv1.bias", &conv1_bias},
          {"primary.filters", &primary_filters},
          {"primary.bias", &primary_bias},
          {"routing.weights", &routing_weights}};
}

void CapsNetParams::validate_shapes(const CapsNetConfig& config) const {
  config.validate();
  const auto k = static_cast<std::size_t>(config.conv1.kernel);
  const auto pk = static_cast<std::size_t>(config.primary.kernel);
  const auto nf = static_cast<std::size_t>(config.conv1.n_filters);
  const auto pc = static_cast<std::size_t>(config.primary.n_channels * config.primary.dim_capsule);
  const auto p = static_cast<std::size_t>(config.num_primary_capsules());
  const auto g = static_cast<std::size_t>(config.num_grids);
  const auto d = static_cast<std::size_t>(config.primary.dim_capsule);
  const std::vector<std::pair<std::string, Shape>> want = {
      {"conv1.filters", {k, k, 1, nf}},
      {"conv1.bias", {nf}},
      {"primary.filters", {pk, pk, nf, pc}},
      {"primary.bias", {pc}},
      {"routing.weights", {p, g, d, d}}};
  auto mine = named();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].second->shape() != want[i].second) {
      throw std::invalid_argument("params: " + mine[i].first + " has shape " +
                                  shape_str(mine[i].second->shape()) + ", config requires " +
                                  shape_str(want[i].second));
    }
  }
}

Tensor squash(const Tensor& s) {
  if (s.rank() == 1) {
    return squash_rows(s.reshaped({1, s.size()})).reshaped({s.size()});
  }
  return squash_rows(s);
}

Tensor dynamic_routing(const Tensor& u, const Tensor& w, int iterations,
                       std::vector<RoutingState>* trace) {
  check(iterations >= 1, "routing: iterations must be >= 1");
  check(u.rank() == 2, "routing: u must be [P,D], got " + shape_str(u.shape()));
  check(w.rank() == 4 && w.extent(0) == u.extent(0) && w.extent(2) == w.extent(3) &&
            w.extent(3) == u.extent(1),
        "routing: W " + shape_str(w.shape()) + " incompatible with u " + shape_str(u.shape()));
  const std::size_t P = w.extent(0), G = w.extent(1), D = w.extent(3);

  // Prediction vectors are a function of u and W only: computed once.
  Tensor u_hat({P, G, D});
  for (std::size_t i = 0; i < P; ++i) {
    const double* ui = u.data() + i * D;
    for (std::size_t j = 0; j < G; ++j) {
      const double* wij = w.data() + ((i * G + j) * D) * D;
      double* out = u_hat.data() + (i * G + j) * D;
      for (std::size_t dd = 0; dd < D; ++dd) {
        double acc = 0.0;
        for (std::size_t e = 0; e < D; ++e) acc += wij[dd * D + e] * ui[e];
        out[dd] = acc;
      }
    }
  }

  Tensor b({P, G});
  Tensor v({G, D});
  for (int it = 0; it < iterations; ++it) {
    Tensor c = b;
    softmax_rows_inplace(c.data(), P, G);
    Tensor s({G, D});
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < G; ++j) {
        const double cij = c[i * G + j];
        const double* h = u_hat.data() + (i * G + j) * D;
        double* sj = s.data() + j * D;
        for (std::size_t dd = 0; dd < D; ++dd) sj[dd] += cij * h[dd];
      }
    }
    v = s;
    squash_rows_inplace(v.data(), G, D);
    Tensor a({P, G});
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < G; ++j) {
        const double* h = u_hat.data() + (i * G + j) * D;
        const double* vj = v.data() + j * D;
        double acc = 0.0;
        for (std::size_t dd = 0; dd < D; ++dd) acc += vj[dd] * h[dd];
        a[i * G + j] = acc;
      }
    }
    for (std::size_t k = 0; k < b.size(); ++k) b[k] += a[k];
    if (trace) trace->push_back(RoutingState{b, c, u_hat, s, v, a});
  }
  return v;
}

namespace {

/// conv1 -> primary conv -> [P, D] capsules, squashed.
Tensor primary_capsules(const Tensor& x, const CapsNetParams& params,
                        const CapsNetConfig& config) {
  const Tensor h1 = conv2d(x, params.conv1_filters, params.conv1_bias, config.conv1.stride,
                           Activation::kRelu);
  const Tensor h2 = conv2d(h1, params.primary_filters, params.primary_bias,
                           config.primary.stride, Activation::kLinear);
  const auto p = static_cast<std::size_t>(config.num_primary_capsules());
  const auto d = static_cast<std::size_t>(config.primary.dim_capsule);
  return squash_rows(h2.reshaped({p, d}));
}

}  // namespace

Tensor forward(const Tensor& x, const CapsNetParams& params, const CapsNetConfig& config) {
  params.validate_shapes(config);
  const auto n = static_cast<std::size_t>(config.n_aps);
  check(x.shape() == Shape{n, n, 1},
        "forward: input " + shape_str(x.shape()) + " does not match config n_aps " +
            std::to_string(config.n_aps));
  const Tensor u = primary_capsules(x, params, config);
  const Tensor v = dynamic_routing(u, params.routing_weights, config.routing_iterations);
  return row_norms(v);
}

Tensor forward_batch(const std::vector<Tensor>& inputs, const CapsNetParams& params,
                     const CapsNetConfig& config, int threads) {
  params.validate_shapes(config);
  const std::size_t B = inputs.size();
  check(B > 0, "forward_batch: empty batch");
  const auto P = static_cast<std::size_t>(config.num_primary_capsules());
  const auto G = static_cast<std::size_t>(config.num_grids);
  const auto D = static_cast<std::size_t>(config.primary.dim_capsule);
  Tensor lengths({B, G});

  auto run_slice = [&](std::size_t lo, std::size_t hi) {
    const std::size_t nb = hi - lo;
    if (nb == 0) return;
    // Stack the primary capsules of the slice: [nb, P, D].
    Tensor u({nb, P, D});
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor caps = primary_capsules(inputs[lo + b], params, config);
      std::copy(caps.data(), caps.data() + P * D, u.data() + b * P * D);
    }
    // u_hat[b,i,j,:] = W_ij . u[b,i,:]. Looping (i,j) outermost keeps each
    // W_ij hot while it serves the whole batch, which is what makes larger
    // batches cheaper per sample.
    Tensor u_hat({nb, P, G, D});
    const double* w = params.routing_weights.data();
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < G; ++j) {
        const double* wij = w + ((i * G + j) * D) * D;
        for (std::size_t b = 0; b < nb; ++b) {
          const double* ub = u.data() + (b * P + i) * D;
          double* out = u_hat.data() + ((b * P + i) * G + j) * D;
          for (std::size_t dd = 0; dd < D; ++dd) {
            const double* wrow = wij + dd * D;
            double acc = 0.0;
            for (std::size_t e = 0; e < D; ++e) acc += wrow[e] * ub[e];
            out[dd] = acc;
          }
        }
      }
    }
    Tensor bq({nb, P, G});
    Tensor v({nb, G, D});
    for (int it = 0; it < config.routing_iterations; ++it) {
      Tensor c = bq;
      softmax_rows_inplace(c.data(), nb * P, G);
      Tensor s({nb, G, D});
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t i = 0; i < P; ++i) {
          for (std::size_t j = 0; j < G; ++j) {
            const double cij = c[(b * P + i) * G + j];
            const double* h = u_hat.data() + ((b * P + i) * G + j) * D;
            double* sj = s.data() + (b * G + j) * D;
            for (std::size_t dd = 0; dd < D; ++dd) sj[dd] += cij * h[dd];
          }
        }
      }
      v = s;
      squash_rows_inplace(v.data(), nb * G, D);
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t i = 0; i < P; ++i) {
          for (std::size_t j = 0; j < G; ++j) {
            const double* h = u_hat.data() + ((b * P + i) * G + j) * D;
            const double* vj = v.data() + (b * G + j) * D;
            double acc = 0.0;
            for (std::size_t dd = 0; dd < D; ++dd) acc += vj[dd] * h[dd];
            bq[(b * P + i) * G + j] += acc;
          }
        }
      }
    }
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor norms = row_norms(Tensor({G, D}, std::vector<double>(
                                                        v.data() + b * G * D,
                                                        v.data() + (b + 1) * G * D)));
      std::copy(norms.data(), norms.data() + G, lengths.data() + (lo + b) * G);
    }
  };

  const int t = std::min<int>(resolve_threads(threads), static_cast<int>(B));
  if (t <= 1) {
    run_slice(0, B);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (B + static_cast<std::size_t>(t) - 1) / static_cast<std::size_t>(t);
    for (int k = 0; k < t; ++k) {
      const std::size_t lo = std::min(B, static_cast<std::size_t>(k) * chunk);
      const std::size_t hi = std::min(B, lo + chunk);
      pool.emplace_back(run_slice, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return lengths;
}

double margin_loss(const Tensor& lengths, const Tensor& one_hot, const MarginLossConfig& cfg) {
  cfg.validate();
  check(lengths.rank() == 1, "margin_loss: lengths must be rank 1");
  check(one_hot.shape() == lengths.shape(), "margin_loss: label shape mismatch");
  std::size_t ones = 0;
  for (std::size_t k = 0; k < one_hot.size(); ++k) {
    check(one_hot[k] == 0.0 || one_hot[k] == 1.0, "margin_loss: label is not one-hot");
    if (one_hot[k] == 1.0) ++ones;
  }
  check(ones == 1, "margin_loss: label must have exactly one 1");
  double total = 0.0;
  for (std::size_t k = 0; k < lengths.size(); ++k) {
    double l = lengths[k];
    check(l >= 0.0 && l <= 1.0 + 1e-9,
          "margin_loss: length " + std::to_string(l) + " outside [0,1]");
    l = std::min(l, 1.0);
    const double present = std::max(0.0, cfg.m_plus - l);
    const double absent = std::max(0.0, l - cfg.m_minus);
    total += one_hot[k] * present * present +
             cfg.lambda * (1.0 - one_hot[k]) * absent * absent;
  }
  return total;
}

std::size_t predict_grid(const Tensor& lengths) {
  check(lengths.size() >= 1, "predict_grid: empty lengths");
  std::size_t best = 0;
  for (std::size_t k = 1; k < lengths.size(); ++k) {
    if (lengths[k] > lengths[best]) best = k;
  }
  return best;
}

std::vector<std::pair<std::string, Var>> TapedModel::named() const {
  return {{"conv1.filters", conv1_filters},
          {"conv1.bias", conv1_bias},
          {"primary.filters", primary_filters},
          {"primary.bias", primary_bias},
          {"routing.weights", routing_weights}};
}

TapedModel tape_params(GradientTape& tape, const CapsNetParams& params) {
  TapedModel m;
  m.conv1_filters = tape.parameter(alias(params.conv1_filters));
  m.conv1_bias = tape.parameter(alias(params.conv1_bias));
  m.primary_filters = tape.parameter(alias(params.primary_filters));
  m.primary_bias = tape.parameter(alias(params.primary_bias));
  m.routing_weights = tape.parameter(alias(params.routing_weights));
  return m;
}

Var taped_lengths(GradientTape& tape, const TapedModel& model, const Tensor& x,
                  const CapsNetConfig& config) {
  const auto p = static_cast<std::size_t>(config.num_primary_capsules());
  const auto g = static_cast<std::size_t>(config.num_grids);
  const auto d = static_cast<std::size_t>(config.primary.dim_capsule);

  Var h1 = tape.conv2d(tape.constant(x), model.conv1_filters, model.conv1_bias,
                       config.conv1.stride, Activation::kRelu);
  Var h2 = tape.conv2d(h1, model.primary_filters, model.primary_bias, config.primary.stride,
                       Activation::kLinear);
  Var u = tape.squash_rows(tape.reshape(h2, {p, d}));
  Var u_hat = tape.caps_predict(model.routing_weights, u);
  Var b = tape.constant(Tensor({p, g}));
  Var v;
  for (int it = 0; it < config.routing_iterations; ++it) {
    Var c = tape.softmax(b, 1);
    Var s = tape.coupling_sum(c, u_hat);
    v = tape.squash_rows(s);
    Var a = tape.agreement(v, u_hat);
    b = tape.add(b, a);
  }
  return tape.row_norms(v);
}

Tensor PreparedDataset::one_hot(std::size_t sample) const {
  Tensor label({num_grids});
  label[cells[sample]] = 1.0;
  return label;
}

PreparedDataset prepare(const FingerprintDataset& dataset, const GridMap& grid, double min_rss) {
  PreparedDataset out;
  out.num_grids = grid.num_cells();
  out.inputs.reserve(dataset.samples.size());
  out.cells.reserve(dataset.samples.size());
  for (const RssSample& sample : dataset.samples) {
    out.inputs.push_back(
        difference_matrix(normalize(sample, min_rss), dataset.ap_roster).to_tensor());
    out.cells.push_back(grid.cell_index(sample.x, sample.y));
  }
  return out;
}

namespace {

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};

void adam_update(CapsNetParams& params, const std::vector<Tensor>& grads, AdamState& state,
                 const TrainOptions& opt, std::int64_t total_steps) {
  auto named = params.named();
  if (state.m.empty()) {
    for (auto& [name, t] : named) {
      state.m.emplace_back(t->shape());
      state.v.emplace_back(t->shape());
    }
  }
  ++state.step;
  double lr = opt.learning_rate;
  if (opt.cosine_decay && total_steps > 0) {
    const double progress = static_cast<double>(state.step - 1) / static_cast<double>(total_steps);
    lr *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(progress, 1.0)));
  }
  const double b1 = opt.adam_beta1, b2 = opt.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < named.size(); ++k) {
    Tensor& theta = *named[k].second;
    const Tensor& g = grads[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      theta[i] -= lr * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.adam_epsilon) +
                        opt.weight_decay * theta[i]);
    }
  }
}

struct BatchOutcome {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  bool finite = true;
  std::string error;
};

/// Forward+backward over samples [lo, hi) of `order` on one tape; gradients
/// land in the taped parameter leaves.
BatchOutcome run_chunk(GradientTape& tape, const CapsNetParams& params,
                       const CapsNetConfig& config, const PreparedDataset& data,
                       const std::vector<std::size_t>& order, std::size_t lo, std::size_t hi,
                       std::size_t batch_total, TapedModel& model) {
  BatchOutcome out;
  model = tape_params(tape, params);
  std::vector<Var> losses;
  losses.reserve(hi - lo);
  for (std::size_t k = lo; k < hi; ++k) {
    const std::size_t idx = order[k];
    Var lengths = taped_lengths(tape, model, data.inputs[idx], config);
    losses.push_back(tape.margin_loss(lengths, data.one_hot(idx), config.margin.m_plus,
                                      config.margin.m_minus, config.margin.lambda));
    out.loss_sum += losses.back()->val()[0];
    if (predict_grid(lengths->val()) == data.cells[idx]) ++out.correct;
  }
  if (!std::isfinite(out.loss_sum)) {
    out.finite = false;
    return out;
  }
  // Mean over the whole batch, so chunk gradients just add up.
  Var loss = tape.scale(tape.add_scalars(losses), 1.0 / static_cast<double>(batch_total));
  tape.backward(loss);
  return out;
}

struct EvalOutcome {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

EvalOutcome evaluate_split(const PreparedDataset& data, const CapsNetParams& params,
                           const CapsNetConfig& config, int threads) {
  EvalOutcome out;
  if (data.size() == 0) return out;
  const std::size_t eval_batch = 256;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  const auto g = static_cast<std::size_t>(config.num_grids);
  for (std::size_t lo = 0; lo < data.size(); lo += eval_batch) {
    const std::size_t hi = std::min(data.size(), lo + eval_batch);
    std::vector<Tensor> batch(data.inputs.begin() + static_cast<std::ptrdiff_t>(lo),
                              data.inputs.begin() + static_cast<std::ptrdiff_t>(hi));
    const Tensor lengths = forward_batch(batch, params, config, threads);
    for (std::size_t b = 0; b < hi - lo; ++b) {
      Tensor row({g}, std::vector<double>(lengths.data() + b * g, lengths.data() + (b + 1) * g));
      loss_sum += margin_loss(row, data.one_hot(lo + b), config.margin);
      if (predict_grid(row) == data.cells[lo + b]) ++correct;
    }
  }
  out.mean_loss = loss_sum / static_cast<double>(data.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

}  // namespace

TrainResult train(const PreparedDataset& train_set, const PreparedDataset& val_set,
                  const CapsNetConfig& config, const TrainOptions& options,
                  const EpochCallback& on_epoch) {
  config.validate();
  check(options.batch_size >= 1, "train: batch size must be >= 1");
  check(options.epochs >= 1, "train: epochs must be >= 1");
  check(train_set.size() > 0, "train: empty training set");
  check(train_set.num_grids == static_cast<std::size_t>(config.num_grids),
        "train: dataset has " + std::to_string(train_set.num_grids) + " grids, config expects " +
            std::to_string(config.num_grids));

  const int threads = resolve_threads(options.threads);
  TrainResult result;
  result.params = CapsNetParams::init(config, options.seed);
  CapsNetParams last_good = result.params;
  AdamState adam;
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((train_set.size() + static_cast<std::size_t>(options.batch_size) -
                                 1) /
                                static_cast<std::size_t>(options.batch_size));
  const std::int64_t total_steps = steps_per_epoch * options.epochs;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= options.epochs && !result.diverged; ++epoch) {
    const double t0 = now_ms();
    Rng shuffle_rng(Rng::derive(options.seed, 0x10000u + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_correct = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t hi =
          std::min(order.size(), lo + static_cast<std::size_t>(options.batch_size));
      const std::size_t batch_n = hi - lo;
      const int t = std::min<int>(threads, static_cast<int>(batch_n));

      std::vector<GradientTape> tapes(static_cast<std::size_t>(t));
      std::vector<TapedModel> models(static_cast<std::size_t>(t));
      std::vector<BatchOutcome> outcomes(static_cast<std::size_t>(t));
      const std::size_t chunk = (batch_n + static_cast<std::size_t>(t) - 1) /
                                static_cast<std::size_t>(t);
      auto worker = [&](int k) {
        const std::size_t clo = lo + std::min(batch_n, static_cast<std::size_t>(k) * chunk);
        const std::size_t chi = lo + std::min(batch_n, static_cast<std::size_t>(k) * chunk + chunk);
        if (clo >= chi) return;
        try {
          outcomes[static_cast<std::size_t>(k)] =
              run_chunk(tapes[static_cast<std::size_t>(k)], result.params, config, train_set,
                        order, clo, chi, batch_n, models[static_cast<std::size_t>(k)]);
        } catch (const std::exception& e) {
          // Numerical blow-ups surface as range errors inside the loss;
          // treat them like a non-finite batch so training can abort.
          outcomes[static_cast<std::size_t>(k)].finite = false;
          outcomes[static_cast<std::size_t>(k)].error = e.what();
        }
      };
      if (t <= 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < t; ++k) pool.emplace_back(worker, k);
        for (auto& th : pool) th.join();
      }

      double batch_loss = 0.0;
      bool finite = true;
      for (const BatchOutcome& o : outcomes) {
        batch_loss += o.loss_sum;
        epoch_correct += o.correct;
        finite = finite && o.finite;
        if (!o.error.empty() && result.divergence_reason.empty()) {
          result.divergence_reason = o.error;
        }
      }
      if (!finite || !std::isfinite(batch_loss)) {
        if (result.divergence_reason.empty()) result.divergence_reason = "non-finite batch loss";
        result.diverged = true;
        result.params = last_good;
        break;
      }
      epoch_loss += batch_loss;

      // Merge chunk gradients in thread order (deterministic reduction).
      std::vector<Tensor> grads;
      auto first = models[0].named();
      for (auto& [name, var] : first) grads.push_back(var->grad);
      for (int k = 1; k < t; ++k) {
        auto more = models[static_cast<std::size_t>(k)].named();
        for (std::size_t p = 0; p < grads.size(); ++p) {
          if (!more[p].second) continue;
          const Tensor& add = more[p].second->grad;
          for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += add[i];
        }
      }
      adam_update(result.params, grads, adam, options, total_steps);
    }
    if (result.diverged) break;

    const EvalOutcome val = evaluate_split(val_set, result.params, config, threads);
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / static_cast<double>(train_set.size());
    log.train_accuracy = static_cast<double>(epoch_correct) / static_cast<double>(train_set.size());
    log.val_loss = val.mean_loss;
    log.val_accuracy = val.accuracy;
    log.wall_ms = now_ms() - t0;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!std::isfinite(log.val_loss) && val_set.size() > 0) {
      result.diverged = true;
      result.params = last_good;
      break;
    }
    last_good = result.params;
  }
  return result;
}

}  // namespace edgeloc
