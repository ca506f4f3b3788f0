#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace calcurve;

TEST_CASE("ce_loss closed forms", "[loss]") {
  Matrix p = Matrix::Constant(4, 10, 0.1);
  REQUIRE(ce_loss(ProbBatch{p, IntVector::Zero(4)}) == Catch::Approx(std::log(10.0)).epsilon(1e-12));

  Matrix onehot = Matrix::Zero(3, 5);
  IntVector y(3);
  y << 1, 2, 4;
  for (Index i = 0; i < 3; ++i) onehot(i, y[i]) = 1.0;
  REQUIRE(ce_loss(ProbBatch{onehot, y}) == 0.0);

  Matrix half = Matrix::Constant(6, 2, 0.5);
  REQUIRE(ce_loss(ProbBatch{half, IntVector::Zero(6)}) ==
          Catch::Approx(std::log(2.0)).epsilon(1e-12));

  REQUIRE_THROWS_AS(ce_loss(ProbBatch{Matrix(0, 2), IntVector(0)}), SpecError);
}

TEST_CASE("ce_loss floors vanishing probabilities", "[loss]") {
  Matrix p = Matrix::Zero(1, 2);
  p(0, 1) = 1.0;
  const double v = ce_loss(ProbBatch{p, IntVector::Zero(1)});
  REQUIRE(std::isfinite(v));
  REQUIRE(v == Catch::Approx(-std::log(1e-12)));
}

TEST_CASE("mse_loss values and gradient", "[loss]") {
  IntVector y(1);
  y << 3;
  Matrix target = Matrix::Zero(1, 10);
  target(0, 3) = 1.0;
  REQUIRE(mse_loss(LogitBatch{target, y}) == 0.0);

  Matrix zero = Matrix::Zero(1, 10);
  REQUIRE(mse_loss(LogitBatch{zero, y}) == Catch::Approx(0.1).epsilon(1e-14));

  Matrix g = mse_grad_logits(LogitBatch{zero, y});
  for (Index k = 0; k < 10; ++k)
    REQUIRE(g(0, k) == Catch::Approx(k == 3 ? -0.2 : 0.0).margin(1e-15));

  REQUIRE_THROWS_AS(mse_loss(LogitBatch{Matrix(0, 3), IntVector(0)}), SpecError);
}

TEST_CASE("mse logit Hessian is constant (2/K) I by finite differences", "[loss]") {
  auto rng = oracles::rng_for(17);
  const Index K = 6;
  IntVector y(1);
  y << 2;
  for (int trial = 0; trial < 5; ++trial) {
    Vector z = oracles::random_matrix(K, 1, rng, 2.0).col(0);
    const double h = 1e-5;
    for (Index a = 0; a < K; ++a)
      for (Index b = 0; b < K; ++b) {
        Vector zp = z, zm = z;
        zp[a] += h;
        zm[a] -= h;
        auto grad_at = [&](const Vector& zz) {
          return mse_grad_logits(LogitBatch{zz.transpose(), y})(0, b);
        };
        const double hess = (grad_at(zp) - grad_at(zm)) / (2.0 * h);
        const double want = a == b ? 2.0 / static_cast<double>(K) : 0.0;
        REQUIRE(hess == Catch::Approx(want).margin(1e-8));
      }
  }
}

TEST_CASE("pgd with zero radius returns the clean input", "[loss]") {
  auto rng = oracles::rng_for(8);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Matrix X = oracles::random_matrix(4, spec.input_dim, rng);
  IntVector y = oracles::random_labels(4, spec.num_classes, rng);
  CalMOConfig cfg;
  cfg.epsilon = 0.0;
  PgdResult r = pgd_attack(net, params, X, y, cfg, false);
  REQUIRE(r.x_adv == X);
  REQUIRE_FALSE(r.aborted);
}

TEST_CASE("one-step pgd on a linear model matches the closed form", "[loss]") {
  NetworkSpec spec;
  spec.input_dim = 6;
  spec.num_classes = 3;
  spec.init_seed = 51;
  Network net(spec);
  ParamVector params = net.init_params();
  auto rng = oracles::rng_for(52);
  Matrix X = oracles::random_matrix(5, 6, rng);
  IntVector y = oracles::random_labels(5, 3, rng);

  CalMOConfig cfg;
  cfg.epsilon = 0.1;
  cfg.pgd_steps = 1;
  cfg.pgd_alpha = 0.05;
  PgdResult r = pgd_attack(net, params, X, y, cfg, false);

  ProbBatch p = softmax(net.forward(params, X, y));
  Matrix W = net.weight(params, 0);
  for (Index i = 0; i < 5; ++i) {
    Vector dz = p.probs.row(i).transpose();
    dz[y[i]] -= 1.0;
    Vector g = W.transpose() * dz;
    for (Index j = 0; j < 6; ++j) {
      const double sign = g[j] > 0 ? 1.0 : (g[j] < 0 ? -1.0 : 0.0);
      REQUIRE(r.x_adv(i, j) == Catch::Approx(X(i, j) + cfg.pgd_alpha * sign).margin(1e-12));
    }
  }
}

TEST_CASE("pgd increases CE on nearly all random instances", "[loss][slow]") {
  auto rng = oracles::rng_for(2024);
  int increased = 0;
  const int trials = 1000;
  CalMOConfig cfg;
  cfg.epsilon = 0.25;
  cfg.pgd_steps = 3;
  cfg.pgd_alpha = 0.1;
  for (int t = 0; t < trials; ++t) {
    NetworkSpec spec = oracles::random_tiny_spec(rng);
    Network net(spec);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(1, spec.input_dim, rng);
    IntVector y = oracles::random_labels(1, spec.num_classes, rng);
    PgdResult r = pgd_attack(net, params, X, y, cfg, false);
    const double before = ce_loss(softmax(net.forward(params, X, y)));
    const double after = ce_loss(softmax(net.forward(params, r.x_adv, y)));
    if (after >= before - 1e-12) ++increased;
    REQUIRE((r.x_adv - X).cwiseAbs().maxCoeff() <= cfg.epsilon + 1e-12);
  }
  REQUIRE(increased >= trials * 95 / 100);
}

TEST_CASE("calmo reduces to CE when both regularizers are off", "[loss]") {
  auto rng = oracles::rng_for(61);
  NetworkSpec spec = oracles::random_tiny_spec(rng);
  Network net(spec);
  ParamVector params = net.init_params();
  Matrix X = oracles::random_matrix(6, spec.input_dim, rng);
  IntVector y = oracles::random_labels(6, spec.num_classes, rng);
  CalMOConfig cfg;
  cfg.lambda_r = 0.0;
  cfg.lambda_s = 0.0;
  LossValue v = calmo_loss(net, params, X, y, cfg, false);
  REQUIRE(v.total == ce_loss(softmax(net.forward(params, X, y))));
  REQUIRE(v.rob_part == 0.0);
  REQUIRE(v.smooth_part == 0.0);
}

TEST_CASE("a network constant in x has zero robustness and smoothness parts", "[loss]") {
  NetworkSpec spec;
  spec.input_dim = 4;
  spec.hidden = {{5, Activation::Tanh}};
  spec.num_classes = 3;
  spec.init_seed = 77;
  Network net(spec);
  ParamVector params = net.init_params();
  net.weight(params, 0).setZero();  // first layer ignores the input
  auto rng = oracles::rng_for(78);
  Matrix X = oracles::random_matrix(5, 4, rng);
  IntVector y = oracles::random_labels(5, 3, rng);
  CalMOConfig cfg;
  LossValue v = calmo_loss(net, params, X, y, cfg, false);
  REQUIRE(v.rob_part == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(v.smooth_part == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("calmo components recombine to the total", "[loss]") {
  auto rng = oracles::rng_for(62);
  for (int trial = 0; trial < 10; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng);
    Network net(spec);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(5, spec.input_dim, rng);
    IntVector y = oracles::random_labels(5, spec.num_classes, rng);
    CalMOConfig cfg;
    cfg.epsilon = 0.2;
    cfg.pgd_alpha = 0.08;
    LossValue v = calmo_loss(net, params, X, y, cfg, false);
    REQUIRE(std::abs(v.total - v.ce_part - cfg.lambda_r * v.rob_part -
                     cfg.lambda_s * v.smooth_part) < 1e-10);
    REQUIRE(v.rob_part >= -1e-12);
    REQUIRE(v.smooth_part >= 0.0);
  }
}

TEST_CASE("calmo gradient matches finite differences with the attack frozen", "[loss][grad]") {
  auto rng = oracles::rng_for(63);
  for (int trial = 0; trial < 6; ++trial) {
    NetworkSpec spec = oracles::random_tiny_spec(rng, /*tanh_only=*/true);
    Network net(spec);
    ParamVector params = net.init_params();
    Matrix X = oracles::random_matrix(4, spec.input_dim, rng);
    IntVector y = oracles::random_labels(4, spec.num_classes, rng);
    CalMOConfig cfg;
    cfg.epsilon = 0.2;
    cfg.pgd_alpha = 0.08;

    // Freeze the adversarial points at the current parameters, then compare
    // the analytic gradient of the frozen objective with finite differences.
    PgdResult adv = pgd_attack(net, params, X, y, cfg, false);
    auto frozen_total = [&](const ParamVector& p) {
      ProbBatch pc = softmax(net.forward(p, X, y));
      ProbBatch pa = softmax(net.forward(p, adv.x_adv, y));
      double total = ce_loss(pc) + cfg.lambda_r * kl_rows(pc.probs, pa.probs).mean();
      Forward fw = net.forward_cache(p, X);
      Matrix U = Network::margin_cotangents(LogitBatch{fw.logits, y});
      total += cfg.lambda_s * net.input_grad(p, fw, U).rowwise().squaredNorm().mean();
      return total;
    };
    auto [g, v] = calmo_grad(net, params, X, y, cfg, false);
    REQUIRE(std::isfinite(v.total));
    Vector fd = oracles::fd_gradient(frozen_total, net, params, 1e-5);
    REQUIRE(oracles::max_rel_error(g.values, fd, 1e-4) < 1e-4);
  }
}

TEST_CASE("kl of identical rows is zero and nonnegative otherwise", "[loss]") {
  auto rng = oracles::rng_for(64);
  Matrix z = oracles::random_matrix(20, 5, rng, 3.0);
  ProbBatch p = softmax(LogitBatch{z, IntVector::Zero(20)});
  REQUIRE(kl_rows(p.probs, p.probs).cwiseAbs().maxCoeff() < 1e-14);

  Matrix z2 = oracles::random_matrix(20, 5, rng, 3.0);
  ProbBatch q = softmax(LogitBatch{z2, IntVector::Zero(20)});
  REQUIRE(kl_rows(p.probs, q.probs).minCoeff() >= -1e-12);
}

TEST_CASE("calmo config validation", "[loss]") {
  CalMOConfig cfg;
  cfg.lambda_r = -0.1;
  REQUIRE_THROWS_AS(cfg.validate(), SpecError);
  cfg = CalMOConfig{};
  cfg.pgd_steps = 0;
  REQUIRE_THROWS_AS(cfg.validate(), SpecError);
  cfg = CalMOConfig{};
  cfg.pgd_alpha = 2 * cfg.epsilon;
  REQUIRE(cfg.alpha_exceeds_radius());
  REQUIRE_NOTHROW(cfg.validate());
}
