#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "edgeloc/tensor.hpp"

namespace edgeloc {

enum class Activation { kLinear, kRelu };

// Forward-only kernels, shared by the tape below and the batched inference
// path. Valid (no-padding) windowing; output side = (in - kernel)/stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& filters, const Tensor& bias, int stride,
              Activation activation);
Tensor softmax(const Tensor& x, int axis);
/// Row-wise v = s * |s| / (1 + |s|^2); squash(0) = 0.
Tensor squash_rows(const Tensor& rows);
Tensor row_norms(const Tensor& rows);

// In-place row kernels for pre-allocated buffers (batched inference path).
void softmax_rows_inplace(double* rows, std::size_t n_rows, std::size_t n);
void squash_rows_inplace(double* rows, std::size_t n_rows, std::size_t dim);

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  std::shared_ptr<const Tensor> value;
  Tensor grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward;
  const char* op = "";

  const Tensor& val() const { return *value; }
};

/// Records primitive ops during one training step; replaying the adjoints in
/// reverse order yields d(loss)/d(parameter) for every watched parameter.
/// Confined to a single thread; single backward pass per tape.
class GradientTape {
 public:
  /// Leaf with no gradient (inputs, labels, routing prior).
  Var constant(Tensor v);
  Var constant(std::shared_ptr<const Tensor> v);
  /// Leaf tracked for gradients. Parameters never touched by the loss keep
  /// an all-zero gradient.
  Var parameter(std::shared_ptr<const Tensor> v);

  Var add(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double s);
  Var sum(Var a);                         // -> scalar
  Var add_scalars(const std::vector<Var>& vs);
  Var relu(Var a);
  Var reshape(Var a, Shape shape);
  Var conv2d(Var input, Var filters, Var bias, int stride, Activation activation);
  Var softmax(Var a, int axis);
  /// u_hat[i,j,:] = W[i,j,:,:] . u[i,:]   (W: [P,G,D,D], u: [P,D])
  Var caps_predict(Var w, Var u);
  /// S[j,:] = sum_i c[i,j] * u_hat[i,j,:]   (c: [P,G], u_hat: [P,G,D])
  Var coupling_sum(Var c, Var u_hat);
  Var squash_rows(Var s);
  /// a[i,j] = v[j,:] . u_hat[i,j,:]
  Var agreement(Var v, Var u_hat);
  Var row_norms(Var v);
  /// L = sum_k T_k max(0, m_plus - l_k)^2 + lambda (1-T_k) max(0, l_k - m_minus)^2
  Var margin_loss(Var lengths, const Tensor& one_hot, double m_plus, double m_minus,
                  double lambda);

  /// Fills .grad on every requires-grad node reachable from loss.
  void backward(const Var& loss);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  Var record(Tensor value, std::vector<Var> inputs, const char* op,
             std::function<void(Node&)> backward);

  std::vector<Var> nodes_;
  bool backward_done_ = false;
};

}  // namespace edgeloc
