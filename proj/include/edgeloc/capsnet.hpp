#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "edgeloc/autograd.hpp"
#include "edgeloc/fingerprint.hpp"
#include "edgeloc/tensor.hpp"

namespace edgeloc {

struct Conv1Config {
  int kernel = 3;
  int stride = 1;
  int n_filters = 64;
};

struct PrimaryCapsConfig {
  int kernel = 2;
  int stride = 2;
  int n_channels = 8;
  int dim_capsule = 16;
};

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;

  void validate() const;
};

struct CapsNetConfig {
  int n_aps = 6;
  int num_grids = 2;
  Conv1Config conv1;
  PrimaryCapsConfig primary;
  int routing_iterations = 3;
  MarginLossConfig margin;

  int conv1_out() const { return (n_aps - conv1.kernel) / conv1.stride + 1; }
  int primary_out() const { return (conv1_out() - primary.kernel) / primary.stride + 1; }
  /// Primary capsule count P = primary_out^2 * n_channels.
  int num_primary_capsules() const { return primary_out() * primary_out() * primary.n_channels; }

  void validate() const;  // throws when the layer shapes cannot chain
};

/// All learnable tensors. routing_weights holds the per-(child, parent)
/// transform matrices as [P, G, D, D].
struct CapsNetParams {
  Tensor conv1_filters;    // [k, k, 1, n_filters]
  Tensor conv1_bias;       // [n_filters]
  Tensor primary_filters;  // [pk, pk, n_filters, n_channels * dim]
  Tensor primary_bias;     // [n_channels * dim]
  Tensor routing_weights;  // [P, G, D, D]

  /// Zero-mean init scaled by fan-in; biases zero. Deterministic per seed.
  static CapsNetParams init(const CapsNetConfig& config, std::uint64_t seed);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  void validate_shapes(const CapsNetConfig& config) const;
};

/// Quantities of one routing pass (final iteration, or one per iteration
/// when traced). b is the state after the iteration's update.
struct RoutingState {
  Tensor b;      // [P, G]
  Tensor c;      // [P, G]
  Tensor u_hat;  // [P, G, D]
  Tensor s;      // [G, D]
  Tensor v;      // [G, D]
  Tensor a;      // [P, G]
};

/// v = (|s|^2 / (1 + |s|^2)) * (s / |s|), continuously extended to 0 at 0.
Tensor squash(const Tensor& s);

/// Routing by agreement over t iterations. u: [P, D] child outputs,
/// w: [P, G, D, D]. Prediction vectors are computed once and reused across
/// iterations. Returns the parent outputs v: [G, D].
Tensor dynamic_routing(const Tensor& u, const Tensor& w, int iterations,
                       std::vector<RoutingState>* trace = nullptr);

/// Full stack on one n x n input: conv (relu) -> primary conv -> capsules ->
/// squash -> routing -> per-parent lengths in [0, 1).
Tensor forward(const Tensor& x, const CapsNetParams& params, const CapsNetConfig& config);

/// Batched inference over B inputs; returns lengths [B, G]. threads > 1
/// splits the batch into contiguous chunks.
Tensor forward_batch(const std::vector<Tensor>& inputs, const CapsNetParams& params,
                     const CapsNetConfig& config, int threads = 1);

double margin_loss(const Tensor& lengths, const Tensor& one_hot, const MarginLossConfig& cfg);

/// Argmax of lengths; ties go to the lowest index.
std::size_t predict_grid(const Tensor& lengths);

/// Taped forward for training and gradient checks. Parameter leaves alias
/// the tensors in `params` (no copy); `params` must outlive the tape.
struct TapedModel {
  Var conv1_filters, conv1_bias, primary_filters, primary_bias, routing_weights;

  std::vector<std::pair<std::string, Var>> named() const;
};
TapedModel tape_params(GradientTape& tape, const CapsNetParams& params);
Var taped_lengths(GradientTape& tape, const TapedModel& model, const Tensor& x,
                  const CapsNetConfig& config);

/// Preprocessed samples ready for the network: difference-matrix inputs and
/// grid-cell labels.
struct PreparedDataset {
  std::vector<Tensor> inputs;  // [n, n, 1] each
  std::vector<std::size_t> cells;
  std::size_t num_grids = 0;

  std::size_t size() const { return inputs.size(); }
  Tensor one_hot(std::size_t sample) const;
};
PreparedDataset prepare(const FingerprintDataset& dataset, const GridMap& grid, double min_rss);

struct TrainOptions {
  int epochs = 12;
  int batch_size = 16;
  double learning_rate = 5e-3;  // adaptive moment estimation
  bool cosine_decay = true;     // anneal the rate to ~0 over the epoch budget
  double weight_decay = 0.0;    // decoupled decay per step
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 42;
  int threads = 0;  // 0 = hardware concurrency
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  CapsNetParams params;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string divergence_reason;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch descent on the mean margin loss. Deterministic for a fixed
/// seed and thread count. On divergence (non-finite loss) training aborts
/// and the last epoch-end checkpoint is returned with diverged = true.
TrainResult train(const PreparedDataset& train_set, const PreparedDataset& val_set,
                  const CapsNetConfig& config, const TrainOptions& options,
                  const EpochCallback& on_epoch = {});

}  // namespace edgeloc
