#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace calcurve;

TEST_CASE("init is deterministic and seed-sensitive", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 4;
  spec.num_classes = 3;
  spec.init_seed = 42;
  Network net(spec);  // zero hidden layers: linear model
  ParamVector a = net.init_params();
  ParamVector b = net.init_params();
  REQUIRE(a.values == b.values);

  spec.init_seed = 43;
  ParamVector c = Network(spec).init_params();
  REQUIRE((a.values - c.values).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("parameter count matches the layout hand count", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 3072;
  spec.hidden = {{200, Activation::Tanh}, {200, Activation::Tanh}};
  spec.num_classes = 10;
  REQUIRE(Network(spec).param_count() == 656810);
}

TEST_CASE("invalid specs are rejected", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 0;
  spec.num_classes = 3;
  REQUIRE_THROWS_AS(Network(spec), SpecError);
  spec.input_dim = 2;
  spec.num_classes = 1;
  REQUIRE_THROWS_AS(Network(spec), SpecError);
  spec.num_classes = 3;
  spec.hidden = {{0, Activation::Tanh}};
  REQUIRE_THROWS_AS(Network(spec), SpecError);
}

TEST_CASE("zero linear network maps anything to zero logits", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 5;
  spec.num_classes = 4;
  Network net(spec);
  ParamVector params = net.zero_params();
  Matrix X = Matrix::Random(7, 5);
  LogitBatch out = net.forward(params, X, IntVector::Zero(7));
  REQUIRE(out.logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("linear network applied to basis vectors reads off weight rows", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 4;
  spec.num_classes = 4;
  Network net(spec);
  ParamVector params = net.zero_params();
  auto W = net.weight(params, 0);
  W.setIdentity();
  W(2, 3) = 0.5;
  for (Index j = 0; j < 4; ++j) {
    Matrix ej = Matrix::Zero(1, 4);
    ej(0, j) = 1.0;
    LogitBatch out = net.forward(params, ej, IntVector::Zero(1));
    for (Index k = 0; k < 4; ++k) REQUIRE(out.logits(0, k) == W(k, j));
  }
}

TEST_CASE("forward matches a straight-line scalar reimplementation", "[net]") {
  auto rng = oracles::rng_for(7);
  for (int trial = 0; trial < 10; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng);
    Network net(spec);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(3, spec.input_dim, rng);
    LogitBatch out = net.forward(params, X, IntVector::Zero(3));
    for (Index i = 0; i < 3; ++i) {
      std::vector<double> x(static_cast<size_t>(spec.input_dim));
      for (Index j = 0; j < spec.input_dim; ++j) x[static_cast<size_t>(j)] = X(i, j);
      std::vector<double> z = oracles::plain_forward(spec, params, x);
      for (Index k = 0; k < spec.num_classes; ++k)
        REQUIRE(out.logits(i, k) == Catch::Approx(z[static_cast<size_t>(k)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward rejects dimension mismatch and non-finite input", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 3;
  spec.num_classes = 2;
  Network net(spec);
  ParamVector params = net.init_params();
  REQUIRE_THROWS_AS(net.forward(params, Matrix::Zero(1, 4), IntVector::Zero(1)), SpecError);
  Matrix bad = Matrix::Zero(1, 3);
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(net.forward(params, bad, IntVector::Zero(1)), NumericalError);
}

TEST_CASE("softmax basics", "[net]") {
  Matrix z = Matrix::Zero(1, 10);
  ProbBatch p = softmax(LogitBatch{z, IntVector::Zero(1)});
  for (Index k = 0; k < 10; ++k) REQUIRE(p.probs(0, k) == Catch::Approx(0.1).margin(1e-15));

  Matrix z2(1, 2);
  z2 << 1.0, 0.0;
  ProbBatch p2 = softmax(LogitBatch{z2, IntVector::Zero(1)});
  const double e = std::exp(1.0);
  REQUIRE(p2.probs(0, 0) == Catch::Approx(e / (1 + e)).epsilon(1e-12));
  REQUIRE(p2.probs(0, 1) == Catch::Approx(1 / (1 + e)).epsilon(1e-12));

  Matrix z3(1, 2);
  z3 << 1000.0, 0.0;
  ProbBatch p3 = softmax(LogitBatch{z3, IntVector::Zero(1)});
  REQUIRE(p3.probs.allFinite());
  REQUIRE(p3.probs(0, 0) == Catch::Approx(1.0));
}

TEST_CASE("softmax rows sum to one and are shift invariant", "[net]") {
  auto rng = oracles::rng_for(11);
  Matrix z = oracles::random_matrix(50, 6, rng, 5.0);
  ProbBatch p = softmax(LogitBatch{z, IntVector::Zero(50)});
  for (Index i = 0; i < z.rows(); ++i)
    REQUIRE(std::abs(p.probs.row(i).sum() - 1.0) < 1e-9);

  Matrix shifted = z;
  shifted.array() += 3.25;
  ProbBatch q = softmax(LogitBatch{shifted, IntVector::Zero(50)});
  REQUIRE((p.probs - q.probs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("CE bias gradient of a zero linear net is uniform minus label frequency", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 3;
  spec.num_classes = 4;
  Network net(spec);
  ParamVector params = net.zero_params();
  auto rng = oracles::rng_for(3);
  Matrix X = oracles::random_matrix(8, 3, rng);
  IntVector y(8);
  y << 0, 0, 1, 1, 2, 2, 3, 3;
  ParamVector g = grad_params(net, params, X, y, LossKind::CE);
  auto bias_grad = net.bias(g, 0);
  for (Index k = 0; k < 4; ++k)
    REQUIRE(bias_grad[k] == Catch::Approx(0.25 - 0.25).margin(1e-15));

  IntVector skew(8);
  skew << 0, 0, 0, 0, 0, 0, 1, 2;
  ParamVector g2 = grad_params(net, params, X, skew, LossKind::CE);
  auto bias2 = net.bias(g2, 0);
  REQUIRE(bias2[0] == Catch::Approx(0.25 - 6.0 / 8.0).margin(1e-12));
  REQUIRE(bias2[3] == Catch::Approx(0.25 - 0.0).margin(1e-12));
}

TEST_CASE("grad_params rejects an empty batch", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 2;
  spec.num_classes = 2;
  Network net(spec);
  ParamVector params = net.init_params();
  REQUIRE_THROWS_AS(grad_params(net, params, Matrix(0, 2), IntVector(0), LossKind::CE), SpecError);
}

TEST_CASE("grad_params matches central finite differences on 20 tiny nets", "[net][grad]") {
  auto rng = oracles::rng_for(1234);
  for (int trial = 0; trial < 20; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng, /*tanh_only=*/true);
    Network net(spec);
    REQUIRE(net.param_count() <= 500);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(4, spec.input_dim, rng);
    IntVector y = oracles::random_labels(4, spec.num_classes, rng);
    const LossKind kind = trial % 2 == 0 ? LossKind::CE : LossKind::MSE;

    ParamVector g = grad_params(net, params, X, y, kind);
    Vector fd = oracles::fd_gradient(
        [&](const ParamVector& p) { return loss_value(net, p, X, y, kind); }, net, params, 1e-5);
    REQUIRE(oracles::max_rel_error(g.values, fd) < 1e-5);
  }
}

TEST_CASE("grad_input per head", "[net][grad]") {
  SECTION("logit head of a linear model is the weight row") {
    NetworkSpec spec;
    spec.input_dim = 5;
    spec.num_classes = 3;
    spec.init_seed = 9;
    Network net(spec);
    ParamVector params = net.init_params();
    Vector x = Vector::Random(5);
    for (Index k = 0; k < 3; ++k) {
      Vector g = grad_input(net, params, x, ScalarHead::Logit, k);
      Vector row = net.weight(params, 0).row(k).transpose();
      REQUIRE((g - row).cwiseAbs().maxCoeff() < 1e-14);
    }
  }
  SECTION("margin head of a linear model is label row minus runner-up row") {
    NetworkSpec spec;
    spec.input_dim = 4;
    spec.num_classes = 3;
    spec.init_seed = 10;
    Network net(spec);
    ParamVector params = net.init_params();
    Vector x = Vector::Random(4);
    LogitBatch z = net.forward(params, Matrix(x.transpose()), IntVector::Zero(1));
    const int y = 0;
    Index runner = -1;
    double best = -1e300;
    for (Index j = 1; j < 3; ++j)
      if (z.logits(0, j) > best) {
        best = z.logits(0, j);
        runner = j;
      }
    Vector g = grad_input(net, params, x, ScalarHead::MarginOfLabel, y);
    Vector want =
        net.weight(params, 0).row(y).transpose() - net.weight(params, 0).row(runner).transpose();
    REQUIRE((g - want).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("loss head matches input-side finite differences on tiny nets") {
    auto rng = oracles::rng_for(77);
    for (int trial = 0; trial < 8; ++trial) {
      NetworkSpec spec = oracles::random_tiny_spec(rng, /*tanh_only=*/true);
      Network net(spec);
      ParamVector params = net.init_params();
      Vector x = oracles::random_matrix(spec.input_dim, 1, rng).col(0);
      const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.num_classes));
      Vector g = grad_input(net, params, x, ScalarHead::LossOfLabel, y);
      Vector fd = oracles::fd_gradient_input(
          [&](const Vector& xx) {
            IntVector yy(1);
            yy[0] = y;
            return ce_loss(softmax(net.forward(params, Matrix(xx.transpose()), yy)));
          },
          x, 1e-5);
      REQUIRE(oracles::max_rel_error(g, fd) < 1e-5);
    }
  }
}

TEST_CASE("smoothness gradient closed form on a linear model", "[net][grad]") {
  NetworkSpec spec;
  spec.input_dim = 4;
  spec.num_classes = 3;
  spec.init_seed = 21;
  Network net(spec);
  ParamVector params = net.init_params();
  Vector x = Vector::Random(4);
  const int y = 1;
  LogitBatch z = net.forward(params, Matrix(x.transpose()), IntVector::Zero(1));
  Index runner = -1;
  double best = -1e300;
  for (Index j = 0; j < 3; ++j) {
    if (j == y) continue;
    if (z.logits(0, j) > best) {
      best = z.logits(0, j);
      runner = j;
    }
  }
  ParamVector g = second_order_smoothness_grad(net, params, x, y);
  Matrix W = net.weight(params, 0);
  Vector diff = W.row(y).transpose() - W.row(runner).transpose();
  Matrix expected = Matrix::Zero(3, 4);
  expected.row(y) = 2.0 * diff.transpose();
  expected.row(runner) = -2.0 * diff.transpose();
  REQUIRE((net.weight(g, 0) - expected).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(net.bias(g, 0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("smoothness gradient matches finite differences", "[net][grad]") {
  auto rng = oracles::rng_for(555);
  for (int trial = 0; trial < 8; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng, /*tanh_only=*/true);
    Network net(spec);
    ParamVector params = net.init_params();
    Vector x = oracles::random_matrix(spec.input_dim, 1, rng).col(0);
    const int y = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.num_classes));

    ParamVector g = second_order_smoothness_grad(net, params, x, y);
    Vector fd = oracles::fd_gradient(
        [&](const ParamVector& p) {
          Vector gx = grad_input(net, p, x, ScalarHead::MarginOfLabel, y);
          return gx.squaredNorm();
        },
        net, params, 1e-5);
    REQUIRE(oracles::max_rel_error(g.values, fd, 1e-4) < 1e-4);
  }
}

TEST_CASE("smoothness penalty is nonnegative", "[net]") {
  auto rng = oracles::rng_for(99);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Matrix X = oracles::random_matrix(6, spec.input_dim, rng);
  IntVector y = oracles::random_labels(6, spec.num_classes, rng);
  Forward fw = net.forward_cache(params, X);
  Matrix U = Network::margin_cotangents(LogitBatch{fw.logits, y});
  Vector penalty;
  net.smoothness_grad(params, fw, U, &penalty);
  REQUIRE(penalty.minCoeff() >= 0.0);
}

TEST_CASE("jvp and vjp are transpose-consistent", "[net]") {
  auto rng = oracles::rng_for(31);
  for (int trial = 0; trial < 10; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng);
    Network net(spec);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(3, spec.input_dim, rng);
    Forward fw = net.forward_cache(params, X);

    ParamVector v = net.zero_params();
    std::normal_distribution<double> dist;
    for (Index i = 0; i < v.size(); ++i) v.values[i] = dist(rng);
    Matrix U = oracles::random_matrix(3, spec.num_classes, rng);

    Matrix Jv = net.jvp_params(params, fw, v);
    Pullback JtU = net.backward(params, fw, U);
    const double lhs = (U.array() * Jv.array()).sum();
    const double rhs = JtU.params.values.dot(v.values);
    REQUIRE(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("jvp of the zero direction is zero", "[net]") {
  auto rng = oracles::rng_for(32);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Matrix X = oracles::random_matrix(2, spec.input_dim, rng);
  Forward fw = net.forward_cache(params, X);
  REQUIRE(net.jvp_params(params, fw, net.zero_params()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dense Jacobian via jvp agrees with row assembly via vjp", "[net]") {
  auto rng = oracles::rng_for(33);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Vector x = oracles::random_matrix(spec.input_dim, 1, rng).col(0);
  Matrix J = oracles::dense_jacobian(net, params, x);

  Forward fw = net.forward_cache(params, Matrix(x.transpose()));
  for (Index k = 0; k < spec.num_classes; ++k) {
    Matrix U = Matrix::Zero(1, spec.num_classes);
    U(0, k) = 1.0;
    Vector row = net.backward(params, fw, U).params.values;
    REQUIRE((J.row(k).transpose() - row).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("parameter-direction jvp of a linear model is the perturbation applied to x", "[net]") {
  NetworkSpec spec;
  spec.input_dim = 3;
  spec.num_classes = 2;
  spec.init_seed = 5;
  Network net(spec);
  ParamVector params = net.init_params();
  Vector x(3);
  x << 0.5, -1.0, 2.0;
  Forward fw = net.forward_cache(params, Matrix(x.transpose()));

  ParamVector dir = net.zero_params();
  auto dW = net.weight(dir, 0);
  dW << 1, 2, 3, 4, 5, 6;
  Matrix dZ = net.jvp_params(params, fw, dir);
  Vector want = dW * x;
  REQUIRE((dZ.row(0).transpose() - want).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("forward is bit-identical across repeated evaluation", "[net]") {
  auto rng = oracles::rng_for(64);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Matrix X = oracles::random_matrix(5, spec.input_dim, rng);
  LogitBatch a = net.forward(params, X, IntVector::Zero(5));
  LogitBatch b = net.forward(params, X, IntVector::Zero(5));
  REQUIRE(a.logits == b.logits);
}
