#include <doctest.h>

#include <cmath>

#include "edgeloc/autograd.hpp"
#include "edgeloc/rng.hpp"
#include "edgeloc/tensor.hpp"
#include "oracles.hpp"

using namespace edgeloc;

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(t.reshaped({4}), std::invalid_argument);
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  Tensor input({3, 3, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor filter({1, 1, 1, 1}, {1.0});
  Tensor bias({1});
  const Tensor out = conv2d(input, filter, bias, 1, Activation::kLinear);
  REQUIRE(out.shape() == Shape{3, 3, 1});
  for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == input[i]);
}

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
  Tensor input = Tensor::full({3, 3, 1}, 1.0);
  Tensor filter = Tensor::full({3, 3, 1, 1}, 1.0);
  Tensor bias({1});
  const Tensor out = conv2d(input, filter, bias, 1, Activation::kLinear);
  REQUIRE(out.shape() == Shape{1, 1, 1});
  CHECK(out[0] == 9.0);
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  Rng rng(7);
  Tensor input = oracles::random_tensor({6, 6, 1}, rng);
  Tensor filter = oracles::random_tensor({3, 3, 1, 8}, rng);
  Tensor bias = oracles::random_tensor({8}, rng);
  const Tensor got = conv2d(input, filter, bias, 1, Activation::kLinear);
  const Tensor want = oracles::brute_conv2d(input, filter, bias, 1);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::abs(got[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("conv2d output shape formula over random geometries") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t kh = 1 + rng.below(4), kw = 1 + rng.below(4);
    const std::size_t H = kh + rng.below(8), W = kw + rng.below(8);
    const int stride = 1 + static_cast<int>(rng.below(3));
    Tensor input = oracles::random_tensor({H, W, 2}, rng);
    Tensor filter = oracles::random_tensor({kh, kw, 2, 3}, rng);
    Tensor bias({3});
    const Tensor out = conv2d(input, filter, bias, stride, Activation::kLinear);
    const auto s = static_cast<std::size_t>(stride);
    CHECK(out.shape() == Shape{(H - kh) / s + 1, (W - kw) / s + 1, 3});
    const Tensor want = oracles::brute_conv2d(input, filter, bias, s);
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(std::abs(out[i] - want[i]) <= 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects bad shapes and strides") {
  Tensor input({3, 3, 1});
  Tensor filter({4, 4, 1, 1});
  Tensor bias({1});
  CHECK_THROWS_WITH_AS(conv2d(input, filter, bias, 1, Activation::kLinear),
                       doctest::Contains("larger than input"), std::invalid_argument);
  Tensor okf({2, 2, 1, 1});
  CHECK_THROWS_WITH_AS(conv2d(input, okf, bias, 0, Activation::kLinear),
                       doctest::Contains("stride"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(conv2d(input, okf, bias, -2, Activation::kLinear),
                       doctest::Contains("stride"), std::invalid_argument);
  Tensor badf({2, 2, 3, 1});
  CHECK_THROWS_AS(conv2d(input, badf, bias, 1, Activation::kLinear), std::invalid_argument);
  Tensor badb({4});
  CHECK_THROWS_AS(conv2d(input, okf, badb, 1, Activation::kLinear), std::invalid_argument);
}

TEST_CASE("softmax uniform, exact values and oracle") {
  const Tensor uniform = softmax(Tensor({10}), 0);
  for (std::size_t i = 0; i < 10; ++i) CHECK(uniform[i] == doctest::Approx(0.1).epsilon(1e-15));

  const Tensor two = softmax(Tensor({2}, {0.0, std::log(3.0)}), 0);
  CHECK(two[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(0.75).epsilon(1e-12));

  Rng rng(3);
  Tensor x = oracles::random_tensor({50}, rng, 2.0);
  const Tensor got = softmax(x, 0);
  const auto want = oracles::naive_softmax(x.values());
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(std::abs(got[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = oracles::random_tensor({4, 7}, rng, 3.0);
    const Tensor y = softmax(x, 1);
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(y.at(i, j) > 0.0);
        sum += y.at(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    const double c = rng.uniform(-50.0, 50.0);
    Tensor shifted = x;
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += c;
    const Tensor ys = softmax(shifted, 1);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(std::abs(y[i] - ys[i]) < 1e-9);
    }
  }
}

TEST_CASE("softmax axis handling") {
  Tensor x({2, 3, 4});
  CHECK_THROWS_WITH_AS(softmax(x, 3), doctest::Contains("axis"), std::invalid_argument);
  CHECK_THROWS_AS(softmax(x, -1), std::invalid_argument);
  // Middle axis: sums along axis 1 are 1.
  Rng rng(9);
  Tensor r = oracles::random_tensor({2, 3, 4}, rng);
  const Tensor y = softmax(r, 1);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 3; ++j) sum += y.at(i, j, k);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("softmax and squash are stable at extreme magnitudes") {
  const Tensor big = softmax(Tensor({3}, {1e8, 1e8 - 1.0, -1e8}), 0);
  CHECK(big.all_finite());
  CHECK(big[0] > big[1]);

  const Tensor zero = squash_rows(Tensor({1, 4}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(zero[i] == 0.0);

  const Tensor huge = squash_rows(Tensor({1, 2}, {1e200, -1e200}));
  CHECK(huge.all_finite());
  const Tensor mid = squash_rows(Tensor({1, 2}, {1e120, 0.0}));
  CHECK(mid.all_finite());
  CHECK(mid[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2p") {
  Rng rng(21);
  auto p0 = std::make_shared<Tensor>(oracles::random_tensor({5}, rng));
  {
    GradientTape tape;
    Var p = tape.parameter(p0);
    tape.backward(tape.sum(p));
    for (std::size_t i = 0; i < 5; ++i) CHECK(p->grad[i] == 1.0);
  }
  {
    GradientTape tape;
    Var p = tape.parameter(p0);
    tape.backward(tape.sum(tape.mul(p, p)));
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(p->grad[i] == doctest::Approx(2.0 * (*p0)[i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("backward: untouched parameters keep zero gradients") {
  GradientTape tape;
  auto used = tape.parameter(std::make_shared<Tensor>(Tensor({2}, {1.0, 2.0})));
  auto untouched = tape.parameter(std::make_shared<Tensor>(Tensor({3}, {1.0, 1.0, 1.0})));
  tape.backward(tape.sum(used));
  CHECK(used->grad[0] == 1.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(untouched->grad[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss and double replay") {
  GradientTape tape;
  auto p = tape.parameter(std::make_shared<Tensor>(Tensor({3}, {1.0, 2.0, 3.0})));
  CHECK_THROWS_WITH_AS(tape.backward(p), doctest::Contains("scalar"), std::invalid_argument);
  GradientTape tape2;
  auto q = tape2.parameter(std::make_shared<Tensor>(Tensor({3}, {1.0, 2.0, 3.0})));
  auto loss = tape2.sum(q);
  tape2.backward(loss);
  CHECK_THROWS_AS(tape2.backward(loss), std::logic_error);
}

namespace {

// FD check of one taped op: loss = sum(op(p) * w) for fixed random w.
double primitive_max_rel_err(const Tensor& x0,
                             const std::function<Var(GradientTape&, Var)>& op, Rng& rng) {
  GradientTape probe;
  Var p0 = probe.parameter(std::make_shared<Tensor>(x0));
  const Tensor w = oracles::random_tensor(op(probe, p0)->val().shape(), rng);

  Tensor x = x0;
  auto loss_value = [&]() {
    GradientTape t;
    Var p = t.parameter(std::make_shared<Tensor>(x));
    return t.sum(t.mul(op(t, p), t.constant(w)))->val()[0];
  };
  GradientTape tape;
  Var p = tape.parameter(std::make_shared<Tensor>(x));
  tape.backward(tape.sum(tape.mul(op(tape, p), tape.constant(w))));
  return oracles::fd_max_rel_err(x, p->grad, loss_value);
}

}  // namespace

TEST_CASE("finite differences validate every primitive in isolation") {
  Rng rng(33);
  const double tol = 1e-4;

  SUBCASE("relu") {
    CHECK(primitive_max_rel_err(oracles::random_tensor({7}, rng),
                                [](GradientTape& t, Var p) { return t.relu(p); }, rng) < tol);
  }
  SUBCASE("scale") {
    CHECK(primitive_max_rel_err(oracles::random_tensor({6}, rng),
                                [](GradientTape& t, Var p) { return t.scale(p, -2.5); },
                                rng) < tol);
  }
  SUBCASE("softmax") {
    CHECK(primitive_max_rel_err(oracles::random_tensor({3, 5}, rng),
                                [](GradientTape& t, Var p) { return t.softmax(p, 1); },
                                rng) < tol);
  }
  SUBCASE("squash") {
    CHECK(primitive_max_rel_err(oracles::random_tensor({4, 3}, rng),
                                [](GradientTape& t, Var p) { return t.squash_rows(p); },
                                rng) < tol);
  }
  SUBCASE("row_norms") {
    CHECK(primitive_max_rel_err(oracles::random_tensor({4, 3}, rng),
                                [](GradientTape& t, Var p) { return t.row_norms(p); },
                                rng) < tol);
  }
  SUBCASE("conv filters, bias, input, both activations") {
    Rng data_rng(55);
    const Tensor x = oracles::random_tensor({5, 5, 2}, data_rng);
    const Tensor f0 = oracles::random_tensor({3, 3, 2, 4}, data_rng);
    const Tensor b0 = oracles::random_tensor({4}, data_rng);
    for (auto act : {Activation::kLinear, Activation::kRelu}) {
      CHECK(primitive_max_rel_err(
                f0,
                [&, act](GradientTape& t, Var p) {
                  return t.conv2d(t.constant(x), p, t.constant(b0), 2, act);
                },
                rng) < tol);
      CHECK(primitive_max_rel_err(
                b0,
                [&, act](GradientTape& t, Var p) {
                  return t.conv2d(t.constant(x), t.constant(f0), p, 2, act);
                },
                rng) < tol);
      CHECK(primitive_max_rel_err(
                x,
                [&, act](GradientTape& t, Var p) {
                  return t.conv2d(p, t.constant(f0), t.constant(b0), 2, act);
                },
                rng) < tol);
    }
  }
  SUBCASE("caps_predict both inputs") {
    Rng data_rng(77);
    const Tensor w0 = oracles::random_tensor({3, 4, 2, 2}, data_rng, 0.7);
    const Tensor u0 = oracles::random_tensor({3, 2}, data_rng, 0.7);
    CHECK(primitive_max_rel_err(
              w0, [&](GradientTape& t, Var p) { return t.caps_predict(p, t.constant(u0)); },
              rng) < tol);
    CHECK(primitive_max_rel_err(
              u0, [&](GradientTape& t, Var p) { return t.caps_predict(t.constant(w0), p); },
              rng) < tol);
  }
  SUBCASE("coupling_sum and agreement") {
    Rng data_rng(99);
    const Tensor c0 = oracles::random_tensor({3, 4}, data_rng, 0.5);
    const Tensor h0 = oracles::random_tensor({3, 4, 2}, data_rng, 0.5);
    const Tensor v0 = oracles::random_tensor({4, 2}, data_rng, 0.5);
    CHECK(primitive_max_rel_err(
              c0, [&](GradientTape& t, Var p) { return t.coupling_sum(p, t.constant(h0)); },
              rng) < tol);
    CHECK(primitive_max_rel_err(
              h0, [&](GradientTape& t, Var p) { return t.coupling_sum(t.constant(c0), p); },
              rng) < tol);
    CHECK(primitive_max_rel_err(
              v0, [&](GradientTape& t, Var p) { return t.agreement(p, t.constant(h0)); },
              rng) < tol);
    CHECK(primitive_max_rel_err(
              h0, [&](GradientTape& t, Var p) { return t.agreement(t.constant(v0), p); },
              rng) < tol);
  }
  SUBCASE("margin_loss") {
    Tensor lengths({4}, {0.3, 0.6, 0.2, 0.8});
    Tensor one_hot({4}, {0.0, 1.0, 0.0, 0.0});
    Tensor x = lengths;
    auto loss_value = [&]() {
      GradientTape t;
      return t.margin_loss(t.parameter(std::make_shared<Tensor>(x)), one_hot, 0.9, 0.1, 0.5)
          ->val()[0];
    };
    GradientTape tape;
    Var p = tape.parameter(std::make_shared<Tensor>(x));
    tape.backward(tape.margin_loss(p, one_hot, 0.9, 0.1, 0.5));
    CHECK(oracles::fd_max_rel_err(x, p->grad, loss_value) < tol);
  }
}

TEST_CASE("taped kernels do not produce NaN or Inf on finite inputs") {
  Rng rng(13);
  GradientTape tape;
  Var x = tape.parameter(std::make_shared<Tensor>(oracles::random_tensor({4, 4, 1}, rng, 100.0)));
  Var f = tape.constant(oracles::random_tensor({2, 2, 1, 3}, rng, 100.0));
  Var c = tape.conv2d(x, f, tape.constant(Tensor({3})), 1, Activation::kRelu);
  Var s = tape.softmax(tape.reshape(c, {9, 3}), 1);
  Var q = tape.squash_rows(s);
  Var n = tape.row_norms(q);
  CHECK(c->val().all_finite());
  CHECK(s->val().all_finite());
  CHECK(q->val().all_finite());
  CHECK(n->val().all_finite());
  tape.backward(tape.sum(n));
  CHECK(x->grad.all_finite());
}
