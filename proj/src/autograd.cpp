#include "edgeloc/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace edgeloc {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct ConvDims {
  std::size_t in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t out_h, out_w;
  std::size_t stride;
};

ConvDims conv_dims(const Tensor& input, const Tensor& filters, const Tensor& bias, int stride) {
  check(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
  check(input.rank() == 3, "conv2d: input must be [H,W,C], got " + shape_str(input.shape()));
  check(filters.rank() == 4,
        "conv2d: filters must be [kh,kw,Cin,Cout], got " + shape_str(filters.shape()));
  check(bias.rank() == 1, "conv2d: bias must be [Cout], got " + shape_str(bias.shape()));
  ConvDims d;
  d.in_h = input.extent(0);
  d.in_w = input.extent(1);
  d.in_c = input.extent(2);
  d.k_h = filters.extent(0);
  d.k_w = filters.extent(1);
  d.out_c = filters.extent(3);
  d.stride = static_cast<std::size_t>(stride);
  check(filters.extent(2) == d.in_c, "conv2d: filter channels " + shape_str(filters.shape()) +
                                         " do not match input " + shape_str(input.shape()));
  check(bias.extent(0) == d.out_c, "conv2d: bias " + shape_str(bias.shape()) +
                                       " does not match filter count " + std::to_string(d.out_c));
  check(d.k_h <= d.in_h && d.k_w <= d.in_w,
        "conv2d: kernel " + shape_str(filters.shape()) + " larger than input " +
            shape_str(input.shape()));
  d.out_h = (d.in_h - d.k_h) / d.stride + 1;
  d.out_w = (d.in_w - d.k_w) / d.stride + 1;
  return d;
}

struct SoftmaxDims {
  std::size_t outer, n, inner;
};

SoftmaxDims softmax_dims(const Tensor& x, int axis) {
  check(axis >= 0 && static_cast<std::size_t>(axis) < x.rank(),
        "softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  SoftmaxDims d{1, x.extent(static_cast<std::size_t>(axis)), 1};
  for (std::size_t i = 0; i < static_cast<std::size_t>(axis); ++i) d.outer *= x.extent(i);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i)
    d.inner *= x.extent(i);
  return d;
}

// Threshold below which a squashed row is treated as exactly zero in the
// adjoint; the true correction term is O(norm) there.
constexpr double kTinyNorm = 1e-100;

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& filters, const Tensor& bias, int stride,
              Activation activation) {
  const ConvDims d = conv_dims(input, filters, bias, stride);
  Tensor out({d.out_h, d.out_w, d.out_c});
  const double* x = input.data();
  const double* f = filters.data();
  const double* b = bias.data();
  double* o = out.data();
  for (std::size_t oy = 0; oy < d.out_h; ++oy) {
    for (std::size_t ox = 0; ox < d.out_w; ++ox) {
      double* orow = o + (oy * d.out_w + ox) * d.out_c;
      for (std::size_t co = 0; co < d.out_c; ++co) orow[co] = b[co];
      for (std::size_t ky = 0; ky < d.k_h; ++ky) {
        for (std::size_t kx = 0; kx < d.k_w; ++kx) {
          const double* xrow = x + ((oy * d.stride + ky) * d.in_w + ox * d.stride + kx) * d.in_c;
          const double* frow = f + (ky * d.k_w + kx) * d.in_c * d.out_c;
          for (std::size_t ci = 0; ci < d.in_c; ++ci) {
            const double xv = xrow[ci];
            const double* fc = frow + ci * d.out_c;
            for (std::size_t co = 0; co < d.out_c; ++co) orow[co] += xv * fc[co];
          }
        }
      }
      if (activation == Activation::kRelu) {
        for (std::size_t co = 0; co < d.out_c; ++co) {
          if (orow[co] < 0.0) orow[co] = 0.0;
        }
      }
    }
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const SoftmaxDims d = softmax_dims(x, axis);
  Tensor out(x.shape());
  const double* in = x.data();
  double* o = out.data();
  if (d.inner == 1) {
    std::copy(in, in + x.size(), o);
    softmax_rows_inplace(o, d.outer, d.n);
    return out;
  }
  for (std::size_t outer = 0; outer < d.outer; ++outer) {
    for (std::size_t r = 0; r < d.inner; ++r) {
      const std::size_t base = outer * d.n * d.inner + r;
      // Shift by the max before exponentiating; required for stability.
      double mx = in[base];
      for (std::size_t i = 1; i < d.n; ++i) mx = std::max(mx, in[base + i * d.inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < d.n; ++i) {
        const double e = std::exp(in[base + i * d.inner] - mx);
        o[base + i * d.inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t i = 0; i < d.n; ++i) o[base + i * d.inner] *= inv;
    }
  }
  return out;
}

void softmax_rows_inplace(double* rows, std::size_t n_rows, std::size_t n) {
  for (std::size_t r = 0; r < n_rows; ++r) {
    double* row = rows + r * n;
    double mx = row[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
  }
}

void squash_rows_inplace(double* rows, std::size_t n_rows, std::size_t dim) {
  for (std::size_t r = 0; r < n_rows; ++r) {
    double* row = rows + r * dim;
    double n2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) n2 += row[d] * row[d];
    const double norm = std::sqrt(n2);
    // v = s * |s| / (1 + |s|^2), written as 1/(1/|s| + |s|) so it stays
    // finite at 0 and at magnitudes where |s|^2 overflows.
    const double h = norm > 0.0 ? 1.0 / (1.0 / norm + norm) : 0.0;
    for (std::size_t d = 0; d < dim; ++d) row[d] *= h;
  }
}

Tensor squash_rows(const Tensor& rows) {
  check(rows.rank() == 2, "squash: expected [rows,dim], got " + shape_str(rows.shape()));
  Tensor out = rows;
  squash_rows_inplace(out.data(), out.extent(0), out.extent(1));
  return out;
}

Tensor row_norms(const Tensor& rows) {
  check(rows.rank() == 2, "row_norms: expected [rows,dim], got " + shape_str(rows.shape()));
  const std::size_t n = rows.extent(0), dim = rows.extent(1);
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    double n2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) n2 += rows[r * dim + d] * rows[r * dim + d];
    out[r] = std::sqrt(n2);
  }
  return out;
}

Var GradientTape::record(Tensor value, std::vector<Var> inputs, const char* op,
                         std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->requires_grad = false;
  for (const Var& in : inputs) {
    if (in->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) node->grad = Tensor(value.shape());
  node->value = std::make_shared<Tensor>(std::move(value));
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->op = op;
  nodes_.push_back(node);
  return node;
}

Var GradientTape::constant(Tensor v) {
  return constant(std::make_shared<const Tensor>(std::move(v)));
}

Var GradientTape::constant(std::shared_ptr<const Tensor> v) {
  auto node = std::make_shared<Node>();
  node->value = std::move(v);
  node->op = "constant";
  nodes_.push_back(node);
  return node;
}

Var GradientTape::parameter(std::shared_ptr<const Tensor> v) {
  auto node = std::make_shared<Node>();
  node->requires_grad = true;
  node->grad = Tensor(v->shape());
  node->value = std::move(v);
  node->op = "parameter";
  nodes_.push_back(node);
  return node;
}

Var GradientTape::add(Var a, Var b) {
  check(a->val().shape() == b->val().shape(), "add: shape mismatch " + shape_str(a->val().shape()) +
                                                  " vs " + shape_str(b->val().shape()));
  Tensor out(a->val().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val()[i] + b->val()[i];
  return record(std::move(out), {a, b}, "add", [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *n.inputs[static_cast<std::size_t>(k)];
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i];
    }
  });
}

Var GradientTape::mul(Var a, Var b) {
  check(a->val().shape() == b->val().shape(), "mul: shape mismatch " + shape_str(a->val().shape()) +
                                                  " vs " + shape_str(b->val().shape()));
  Tensor out(a->val().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val()[i] * b->val()[i];
  return record(std::move(out), {a, b}, "mul", [](Node& n) {
    Node& a = *n.inputs[0];
    Node& b = *n.inputs[1];
    if (a.requires_grad) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * b.val()[i];
    }
    if (b.requires_grad) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) b.grad[i] += n.grad[i] * a.val()[i];
    }
  });
}

Var GradientTape::scale(Var a, double s) {
  Tensor out(a->val().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val()[i] * s;
  return record(std::move(out), {a}, "scale", [s](Node& n) {
    Node& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i] * s;
  });
}

Var GradientTape::sum(Var a) {
  double total = 0.0;
  for (std::size_t i = 0; i < a->val().size(); ++i) total += a->val()[i];
  return record(Tensor::scalar(total), {a}, "sum", [](Node& n) {
    Node& a = *n.inputs[0];
    if (!a.requires_grad) return;
    const double g = n.grad[0];
    for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g;
  });
}

Var GradientTape::add_scalars(const std::vector<Var>& vs) {
  check(!vs.empty(), "add_scalars: empty input");
  double total = 0.0;
  for (const Var& v : vs) {
    check(v->val().size() == 1, "add_scalars: non-scalar input");
    total += v->val()[0];
  }
  return record(Tensor::scalar(total), vs, "add_scalars", [](Node& n) {
    for (Var& in : n.inputs) {
      if (in->requires_grad) in->grad[0] += n.grad[0];
    }
  });
}

Var GradientTape::relu(Var a) {
  Tensor out(a->val().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->val()[i] > 0.0 ? a->val()[i] : 0.0;
  return record(std::move(out), {a}, "relu", [](Node& n) {
    Node& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (n.val()[i] > 0.0) a.grad[i] += n.grad[i];
    }
  });
}

Var GradientTape::reshape(Var a, Shape shape) {
  Tensor out = a->val().reshaped(std::move(shape));
  return record(std::move(out), {a}, "reshape", [](Node& n) {
    Node& a = *n.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i];
  });
}

Var GradientTape::conv2d(Var input, Var filters, Var bias, int stride, Activation activation) {
  Tensor out = edgeloc::conv2d(input->val(), filters->val(), bias->val(), stride, activation);
  const ConvDims d = conv_dims(input->val(), filters->val(), bias->val(), stride);
  return record(std::move(out), {input, filters, bias}, "conv2d", [d, activation](Node& n) {
    Node& input = *n.inputs[0];
    Node& filters = *n.inputs[1];
    Node& bias = *n.inputs[2];
    const double* x = input.val().data();
    const double* f = filters.val().data();

    // For relu, mask the incoming gradient through the stored output.
    Tensor masked;
    const double* g = n.grad.data();
    if (activation == Activation::kRelu) {
      masked = n.grad;
      for (std::size_t i = 0; i < masked.size(); ++i) {
        if (n.val()[i] <= 0.0) masked[i] = 0.0;
      }
      g = masked.data();
    }

    if (bias.requires_grad) {
      for (std::size_t oy = 0; oy < d.out_h; ++oy) {
        for (std::size_t ox = 0; ox < d.out_w; ++ox) {
          const double* grow = g + (oy * d.out_w + ox) * d.out_c;
          for (std::size_t co = 0; co < d.out_c; ++co) bias.grad[co] += grow[co];
        }
      }
    }
    for (std::size_t oy = 0; oy < d.out_h; ++oy) {
      for (std::size_t ox = 0; ox < d.out_w; ++ox) {
        const double* grow = g + (oy * d.out_w + ox) * d.out_c;
        for (std::size_t ky = 0; ky < d.k_h; ++ky) {
          for (std::size_t kx = 0; kx < d.k_w; ++kx) {
            const std::size_t xoff =
                ((oy * d.stride + ky) * d.in_w + ox * d.stride + kx) * d.in_c;
            const std::size_t foff = (ky * d.k_w + kx) * d.in_c * d.out_c;
            if (filters.requires_grad) {
              for (std::size_t ci = 0; ci < d.in_c; ++ci) {
                const double xv = x[xoff + ci];
                double* fg = filters.grad.data() + foff + ci * d.out_c;
                for (std::size_t co = 0; co < d.out_c; ++co) fg[co] += xv * grow[co];
              }
            }
            if (input.requires_grad) {
              for (std::size_t ci = 0; ci < d.in_c; ++ci) {
                const double* fc = f + foff + ci * d.out_c;
                double acc = 0.0;
                for (std::size_t co = 0; co < d.out_c; ++co) acc += fc[co] * grow[co];
                input.grad[xoff + ci] += acc;
              }
            }
          }
        }
      }
    }
  });
}

Var GradientTape::softmax(Var a, int axis) {
  Tensor out = edgeloc::softmax(a->val(), axis);
  const SoftmaxDims d = softmax_dims(a->val(), axis);
  return record(std::move(out), {a}, "softmax", [d](Node& n) {
    Node& a = *n.inputs[0];
    if (!a.requires_grad) return;
    const double* y = n.val().data();
    const double* g = n.grad.data();
    for (std::size_t outer = 0; outer < d.outer; ++outer) {
      for (std::size_t r = 0; r < d.inner; ++r) {
        const std::size_t base = outer * d.n * d.inner + r;
        double dot = 0.0;
        for (std::size_t i = 0; i < d.n; ++i) {
          const std::size_t k = base + i * d.inner;
          dot += g[k] * y[k];
        }
        for (std::size_t i = 0; i < d.n; ++i) {
          const std::size_t k = base + i * d.inner;
          a.grad[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Var GradientTape::caps_predict(Var w, Var u) {
  const Tensor& wt = w->val();
  const Tensor& ut = u->val();
  check(wt.rank() == 4, "caps_predict: W must be [P,G,D,D], got " + shape_str(wt.shape()));
  check(ut.rank() == 2, "caps_predict: u must be [P,D], got " + shape_str(ut.shape()));
  check(wt.extent(0) == ut.extent(0) && wt.extent(2) == wt.extent(3) &&
            wt.extent(3) == ut.extent(1),
        "caps_predict: W " + shape_str(wt.shape()) + " incompatible with u " +
            shape_str(ut.shape()));
  const std::size_t P = wt.extent(0), G = wt.extent(1), D = wt.extent(3);
  Tensor out({P, G, D});
  for (std::size_t i = 0; i < P; ++i) {
    const double* ui = ut.data() + i * D;
    for (std::size_t j = 0; j < G; ++j) {
      const double* wij = wt.data() + ((i * G + j) * D) * D;
      double* o = out.data() + (i * G + j) * D;
      for (std::size_t dd = 0; dd < D; ++dd) {
        const double* wrow = wij + dd * D;
        double acc = 0.0;
        for (std::size_t e = 0; e < D; ++e) acc += wrow[e] * ui[e];
        o[dd] = acc;
      }
    }
  }
  return record(std::move(out), {w, u}, "caps_predict", [P, G, D](Node& n) {
    Node& w = *n.inputs[0];
    Node& u = *n.inputs[1];
    const double* g = n.grad.data();
    for (std::size_t i = 0; i < P; ++i) {
      const double* ui = u.val().data() + i * D;
      for (std::size_t j = 0; j < G; ++j) {
        const double* gij = g + (i * G + j) * D;
        const std::size_t woff = ((i * G + j) * D) * D;
        if (w.requires_grad) {
          for (std::size_t dd = 0; dd < D; ++dd) {
            double* wg = w.grad.data() + woff + dd * D;
            const double gd = gij[dd];
            for (std::size_t e = 0; e < D; ++e) wg[e] += gd * ui[e];
          }
        }
        if (u.requires_grad) {
          const double* wij = w.val().data() + woff;
          double* ug = u.grad.data() + i * D;
          for (std::size_t dd = 0; dd < D; ++dd) {
            const double gd = gij[dd];
            const double* wrow = wij + dd * D;
            for (std::size_t e = 0; e < D; ++e) ug[e] += gd * wrow[e];
          }
        }
      }
    }
  });
}

Var GradientTape::coupling_sum(Var c, Var u_hat) {
  const Tensor& ct = c->val();
  const Tensor& ht = u_hat->val();
  check(ct.rank() == 2 && ht.rank() == 3 && ct.extent(0) == ht.extent(0) &&
            ct.extent(1) == ht.extent(1),
        "coupling_sum: c " + shape_str(ct.shape()) + " incompatible with u_hat " +
            shape_str(ht.shape()));
  const std::size_t P = ct.extent(0), G = ct.extent(1), D = ht.extent(2);
  Tensor out({G, D});
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t j = 0; j < G; ++j) {
      const double cij = ct[i * G + j];
      const double* h = ht.data() + (i * G + j) * D;
      double* o = out.data() + j * D;
      for (std::size_t dd = 0; dd < D; ++dd) o[dd] += cij * h[dd];
    }
  }
  return record(std::move(out), {c, u_hat}, "coupling_sum", [P, G, D](Node& n) {
    Node& c = *n.inputs[0];
    Node& u_hat = *n.inputs[1];
    const double* g = n.grad.data();
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < G; ++j) {
        const double* gj = g + j * D;
        const double* h = u_hat.val().data() + (i * G + j) * D;
        if (c.requires_grad) {
          double acc = 0.0;
          for (std::size_t dd = 0; dd < D; ++dd) acc += gj[dd] * h[dd];
          c.grad[i * G + j] += acc;
        }
        if (u_hat.requires_grad) {
          const double cij = c.val()[i * G + j];
          double* hg = u_hat.grad.data() + (i * G + j) * D;
          for (std::size_t dd = 0; dd < D; ++dd) hg[dd] += cij * gj[dd];
        }
      }
    }
  });
}

Var GradientTape::squash_rows(Var s) {
  Tensor out = edgeloc::squash_rows(s->val());
  const std::size_t rows = out.extent(0), dim = out.extent(1);
  return record(std::move(out), {s}, "squash", [rows, dim](Node& n) {
    Node& s = *n.inputs[0];
    if (!s.requires_grad) return;
    const double* g = n.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* sr = s.val().data() + r * dim;
      const double* gr = g + r * dim;
      double* sg = s.grad.data() + r * dim;
      double n2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) n2 += sr[d] * sr[d];
      const double norm = std::sqrt(n2);
      const double h = norm > 0.0 ? 1.0 / (1.0 / norm + norm) : 0.0;
      if (norm < kTinyNorm || n2 > 1e100) {
        // The rank-one correction is O(|g|/|s|) at huge norms and O(|s|) at
        // tiny ones; dropping it keeps the adjoint finite.
        for (std::size_t d = 0; d < dim; ++d) sg[d] += gr[d] * h;
        continue;
      }
      // dv/ds = h I + (h'/|s|) s s^T with h' = (1 - |s|^2) / (1 + |s|^2)^2.
      const double hp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += gr[d] * sr[d];
      const double f = hp / norm * dot;
      for (std::size_t d = 0; d < dim; ++d) sg[d] += gr[d] * h + sr[d] * f;
    }
  });
}

Var GradientTape::agreement(Var v, Var u_hat) {
  const Tensor& vt = v->val();
  const Tensor& ht = u_hat->val();
  check(vt.rank() == 2 && ht.rank() == 3 && vt.extent(0) == ht.extent(1) &&
            vt.extent(1) == ht.extent(2),
        "agreement: v " + shape_str(vt.shape()) + " incompatible with u_hat " +
            shape_str(ht.shape()));
  const std::size_t P = ht.extent(0), G = ht.extent(1), D = ht.extent(2);
  Tensor out({P, G});
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t j = 0; j < G; ++j) {
      const double* vj = vt.data() + j * D;
      const double* h = ht.data() + (i * G + j) * D;
      double acc = 0.0;
      for (std::size_t dd = 0; dd < D; ++dd) acc += vj[dd] * h[dd];
      out[i * G + j] = acc;
    }
  }
  return record(std::move(out), {v, u_hat}, "agreement", [P, G, D](Node& n) {
    Node& v = *n.inputs[0];
    Node& u_hat = *n.inputs[1];
    const double* g = n.grad.data();
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t j = 0; j < G; ++j) {
        const double gij = g[i * G + j];
        const double* h = u_hat.val().data() + (i * G + j) * D;
        const double* vj = v.val().data() + j * D;
        if (v.requires_grad) {
          double* vg = v.grad.data() + j * D;
          for (std::size_t dd = 0; dd < D; ++dd) vg[dd] += gij * h[dd];
        }
        if (u_hat.requires_grad) {
          double* hg = u_hat.grad.data() + (i * G + j) * D;
          for (std::size_t dd = 0; dd < D; ++dd) hg[dd] += gij * vj[dd];
        }
      }
    }
  });
}

Var GradientTape::row_norms(Var v) {
  Tensor out = edgeloc::row_norms(v->val());
  const std::size_t rows = v->val().extent(0), dim = v->val().extent(1);
  return record(std::move(out), {v}, "row_norms", [rows, dim](Node& n) {
    Node& v = *n.inputs[0];
    if (!v.requires_grad) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double norm = n.val()[r];
      if (norm < kTinyNorm) continue;
      const double f = n.grad[r] / norm;
      const double* vr = v.val().data() + r * dim;
      double* vg = v.grad.data() + r * dim;
      for (std::size_t d = 0; d < dim; ++d) vg[d] += f * vr[d];
    }
  });
}

Var GradientTape::margin_loss(Var lengths, const Tensor& one_hot, double m_plus, double m_minus,
                              double lambda) {
  const Tensor& lt = lengths->val();
  check(lt.rank() == 1, "margin_loss: lengths must be rank 1, got " + shape_str(lt.shape()));
  check(one_hot.shape() == lt.shape(), "margin_loss: label " + shape_str(one_hot.shape()) +
                                           " does not match lengths " + shape_str(lt.shape()));
  double total = 0.0;
  for (std::size_t k = 0; k < lt.size(); ++k) {
    // Squash guarantees |v| < 1 exactly; allow rounding slack of 1e-9 above.
    double l = lt[k];
    check(l >= 0.0 && l <= 1.0 + 1e-9,
          "margin_loss: length " + std::to_string(l) + " outside [0,1] at index " +
              std::to_string(k));
    l = std::min(l, 1.0);
    const double t = one_hot[k];
    const double present = std::max(0.0, m_plus - l);
    const double absent = std::max(0.0, l - m_minus);
    total += t * present * present + lambda * (1.0 - t) * absent * absent;
  }
  auto label = std::make_shared<Tensor>(one_hot);
  return record(Tensor::scalar(total), {lengths}, "margin_loss",
                [label, m_plus, m_minus, lambda](Node& n) {
                  Node& lengths = *n.inputs[0];
                  if (!lengths.requires_grad) return;
                  const double g = n.grad[0];
                  for (std::size_t k = 0; k < lengths.grad.size(); ++k) {
                    const double l = lengths.val()[k];
                    const double t = (*label)[k];
                    double dl = 0.0;
                    if (t != 0.0 && l < m_plus) dl -= 2.0 * t * (m_plus - l);
                    if (t != 1.0 && l > m_minus) dl += 2.0 * lambda * (1.0 - t) * (l - m_minus);
                    lengths.grad[k] += g * dl;
                  }
                });
}

void GradientTape::backward(const Var& loss) {
  check(loss != nullptr, "backward: null loss");
  if (loss->val().size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss->val().shape()));
  }
  if (backward_done_) throw std::logic_error("backward: tape already replayed");
  backward_done_ = true;
  if (!loss->requires_grad) return;  // nothing influenced the loss
  loss->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.requires_grad && n.backward) n.backward(n);
  }
}

}  // namespace edgeloc
