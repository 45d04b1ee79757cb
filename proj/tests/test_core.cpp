#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdmt/gradcheck.hpp"
#include "mdmt/model.hpp"
#include "mdmt/optimizer.hpp"
#include "mdmt/rng.hpp"
#include "mdmt/tape.hpp"

using namespace mdmt;

namespace {

Tensor<float> randf(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Tensor<float> t = Tensor<float>::matrix(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) t.values(i, j) = static_cast<float>(rng.uniform(-2, 2));
  }
  return t;
}

}  // namespace

TEST_CASE("tensor shapes and invariants") {
  auto v = Tensor<float>::vector({1.f, 2.f, 3.f});
  CHECK(v.rank == 1);
  CHECK(v.shape() == std::vector<Eigen::Index>{3});
  CHECK(v.size() == 3);

  auto m = Tensor<float>::matrix(2, 4);
  CHECK(m.shape() == std::vector<Eigen::Index>{2, 4});
  CHECK(m.size() == 8);  // product(shape) == length(data)

  CHECK(Tensor<float>::scalar(5.f).is_scalar_shape());
  CHECK_THROWS_AS((void)m.item(), ShapeError);
}

TEST_CASE("primitive forward examples") {
  SUBCASE("sigmoid at zero") {
    auto y = sigmoid<float>(nullptr, Tensor<float>::vector({0.f}));
    CHECK(y.values(0, 0) == doctest::Approx(0.5).epsilon(1e-7));
  }
  SUBCASE("softmax uniform over equal logits") {
    auto y = softmax_lastdim<float>(nullptr, Tensor<float>::vector({0.f, 0.f}));
    CHECK(y.values(0, 0) == doctest::Approx(0.5));
    CHECK(y.values(0, 1) == doctest::Approx(0.5));
  }
  SUBCASE("relu definition") {
    auto y = relu<float>(nullptr, Tensor<float>::vector({-1.f, 2.f}));
    CHECK(y.values(0, 0) == 0.f);
    CHECK(y.values(0, 1) == 2.f);
  }
  SUBCASE("layernorm of a constant vector is zero") {
    auto y = layernorm_lastdim<float>(nullptr, Tensor<float>::vector({3.7f, 3.7f, 3.7f, 3.7f}));
    for (int i = 0; i < 4; ++i) CHECK(y.values(0, i) == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("matmul by identity") {
    Rng rng(3);
    auto a = randf(rng, 3, 5);
    Tensor<float> eye = Tensor<float>::matrix(3, 3);
    eye.values.setIdentity();
    auto y = matmul<float>(nullptr, eye, a);
    CHECK(y.values.isApprox(a.values));
  }
  SUBCASE("layernorm normalizes mean and variance") {
    Rng rng(4);
    auto x = randf(rng, 5, 8);
    auto y = layernorm_lastdim<float>(nullptr, x);
    for (int r = 0; r < 5; ++r) {
      const float mu = y.values.row(r).mean();
      const float var = (y.values.row(r).array() - mu).square().mean();
      CHECK(mu == doctest::Approx(0.0).epsilon(1e-5));
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // up to the epsilon shrinkage
    }
  }
}

TEST_CASE("primitive shape errors name the op") {
  Tensor<float> a = Tensor<float>::matrix(2, 3);
  Tensor<float> b = Tensor<float>::matrix(2, 3);
  CHECK_THROWS_WITH_AS(matmul<float>(nullptr, a, b),
                       doctest::Contains("matmul"), ShapeError);
  Tensor<float> c = Tensor<float>::matrix(4, 3);
  CHECK_THROWS_WITH_AS(add<float>(nullptr, a, c), doctest::Contains("add"), ShapeError);
}

TEST_CASE("non-finite outputs are an error state") {
  Tensor<float> big = Tensor<float>::vector({3e38f});
  CHECK_THROWS_AS(scalar_scale<float>(nullptr, big, Tensor<float>::scalar(10.f)), NumericError);
}

TEST_CASE("softmax rows form a simplex for any finite input") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> x = randf(rng, 4, 6);
    x.values *= static_cast<float>(std::pow(10.0, rng.uniform(0, 6)));  // exercise large logits
    auto y = softmax_lastdim<float>(nullptr, x);
    for (int r = 0; r < 4; ++r) {
      float sum = 0.f;
      for (int c = 0; c < 6; ++c) {
        CHECK(y.values(r, c) >= 0.f);
        sum += y.values(r, c);
      }
      CHECK(std::fabs(sum - 1.f) < 1e-6f);
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::vector({1.f, -2.f, 3.f, 0.5f});
    tape.watch(x);
    auto loss = sum_all(&tape, x);
    auto grads = backward(tape, loss);
    const auto& g = grads.at(x.node).values;
    for (int i = 0; i < 4; ++i) CHECK(g(0, i) == 1.f);
  }
  SUBCASE("sigmoid'(0) = 0.25") {
    Tape<float> tape;
    Tensor<float> w = Tensor<float>::vector({0.f});
    tape.watch(w);
    auto loss = sum_all(&tape, sigmoid(&tape, w));
    auto grads = backward(tape, loss);
    CHECK(grads.at(w.node).values(0, 0) == doctest::Approx(0.25));
  }
  SUBCASE("loss must be a scalar on the tape") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::vector({1.f, 2.f});
    tape.watch(x);
    auto y = relu(&tape, x);
    CHECK_THROWS_AS(backward(tape, y), ShapeError);  // not scalar
    Tensor<float> off_tape = Tensor<float>::scalar(1.f);
    CHECK_THROWS_AS(backward(tape, off_tape), ShapeError);
  }
  SUBCASE("unreachable leaves get zero gradients") {
    Tape<float> tape;
    Tensor<float> x = Tensor<float>::vector({1.f});
    Tensor<float> unused = Tensor<float>::vector({5.f, 6.f});
    tape.watch(x);
    tape.watch(unused);
    auto loss = sum_all(&tape, x);
    auto grads = backward(tape, loss);
    CHECK(grads.contains(unused.node));
    CHECK(grads.at(unused.node).values.isZero());
  }
}

TEST_CASE("chain rule equals the product of per-primitive Jacobians on 2x2") {
  // y = sigmoid(x W); J = J_sigmoid * J_matmul, assembled by hand.
  Rng rng(21);
  Tensor<double> x = Tensor<double>::matrix(1, 2);
  x.values << 0.3, -0.7;
  Tensor<double> W = Tensor<double>::matrix(2, 2);
  W.values << 0.5, -1.1, 0.8, 0.25;

  // Gradient of y_k w.r.t. x via backward, one output at a time.
  for (int k = 0; k < 2; ++k) {
    Tape<double> tape;
    Tensor<double> xt = x;
    tape.watch(xt);
    auto y = sigmoid(&tape, matmul(&tape, xt, W));
    Tensor<double> sel = Tensor<double>::matrix(1, 2);
    sel.values(0, k) = 1.0;
    auto loss = sum_all(&tape, elementwise_mul(&tape, y, sel));
    auto grads = backward(tape, loss);

    const double z_k = (x.values * W.values)(0, k);
    const double s = 1.0 / (1.0 + std::exp(-z_k));
    for (int i = 0; i < 2; ++i) {
      const double expected = s * (1.0 - s) * W.values(i, k);  // dsigma/dz * dz/dx_i
      CHECK(grads.at(xt.node).values(0, i) == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("forward replay is bit-identical within a process") {
  Rng rng(31);
  Tensor<float> x = randf(rng, 4, 6);
  Tensor<float> W = randf(rng, 6, 3);
  auto run = [&]() {
    Tape<float> tape;
    Tensor<float> xi = x, wi = W;
    tape.watch(xi);
    tape.watch(wi);
    return softmax_lastdim(&tape, layernorm_lastdim(&tape, matmul(&tape, xi, wi)));
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.values.data(), b.values.data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("every primitive matches central finite differences") {
  const auto results = run_primitive_gradchecks(1234);
  for (const auto& r : results) {
    INFO("family ", r.family, " rel err ", r.worst_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("corrupted sigmoid backward is caught and named") {
  BackwardHook hook{OpKind::sigmoid, 1.01};
  const auto results = run_primitive_gradchecks(1234, &hook);
  bool sigmoid_failed = false;
  for (const auto& r : results) {
    if (r.family == "sigmoid") {
      sigmoid_failed = !r.pass;
    } else {
      CHECK(r.pass);  // corruption must not leak into other families
    }
  }
  CHECK(sigmoid_failed);
}

TEST_CASE("gradcheck report lists every public primitive exactly once") {
  const auto results = run_all_gradchecks(7);
  const char* kinds[] = {"matmul", "add", "elementwise_mul", "relu", "sigmoid",
                         "softmax_lastdim", "layernorm_lastdim", "scalar_scale",
                         "sum", "concat_lastdim"};
  for (const char* k : kinds) {
    int seen = 0;
    for (const auto& r : results) {
      if (r.family == k) ++seen;
    }
    CHECK(seen == 1);
  }
}

TEST_CASE("optimizer steps") {
  SUBCASE("SGD: w - lr*g") {
    Tensor<float> w = Tensor<float>::vector({1.f});
    Tape<float> tape;
    tape.watch(w);
    GradientMap<float> grads;
    grads.set_tape_id(w.tape_id);
    Tensor<float> g = Tensor<float>::vector({2.f});
    grads.set(w.node, g);
    Optimizer<float> opt(OptimizerKind::sgd);
    opt.step({{"w", &w}}, grads, 0.5f);
    CHECK(w.values(0, 0) == 0.0f);
  }
  SUBCASE("zero gradient is an SGD fixed point") {
    Tensor<float> w = Tensor<float>::vector({1.25f});
    Tape<float> tape;
    tape.watch(w);
    GradientMap<float> grads;
    grads.set_tape_id(w.tape_id);
    grads.set(w.node, Tensor<float>::vector({0.f}));
    Optimizer<float> opt(OptimizerKind::sgd);
    opt.step({{"w", &w}}, grads, 0.7f);
    CHECK(w.values(0, 0) == 1.25f);
  }
  SUBCASE("Adam first step has bias-corrected magnitude ~ lr") {
    // Hand oracle: m=0.1g, v=0.001g^2, mhat=g, vhat=g^2,
    // step = lr*g/(|g|+eps) = lr for g=1.
    Tensor<float> w = Tensor<float>::vector({0.5f});
    Tape<float> tape;
    tape.watch(w);
    GradientMap<float> grads;
    grads.set_tape_id(w.tape_id);
    grads.set(w.node, Tensor<float>::vector({1.f}));
    Optimizer<float> opt(OptimizerKind::adam);
    opt.step({{"w", &w}}, grads, 0.1f);
    CHECK(w.values(0, 0) == doctest::Approx(0.4).epsilon(1e-5));
  }
  SUBCASE("missing gradient errors") {
    Tensor<float> w = Tensor<float>::vector({1.f});
    GradientMap<float> grads;
    Optimizer<float> opt(OptimizerKind::sgd);
    CHECK_THROWS_WITH_AS(opt.step({{"w", &w}}, grads, 0.1f),
                         doctest::Contains("missing gradient"), ShapeError);
  }
}

TEST_CASE("stale tape handles are treated as constants, then caught by the optimizer") {
  Tensor<float> w = Tensor<float>::vector({1.f});
  {
    Tape<float> old_tape;
    old_tape.watch(w);
  }
  Tape<float> tape;  // w.node now refers to the dead tape
  auto loss = sum_all(&tape, relu(&tape, w));
  auto grads = backward(tape, loss);
  Optimizer<float> opt(OptimizerKind::sgd);
  CHECK_THROWS_AS(opt.step({{"w", &w}}, grads, 0.1f), ShapeError);
}
