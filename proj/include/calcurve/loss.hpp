#pragma once

// Training objectives: cross-entropy, per-coordinate MSE on logits against
// one-hot targets, and the margin-aware composite objective combining CE with
// a clean-vs-adversarial KL term and an input-gradient smoothness penalty.

#include "calcurve/net.hpp"

#include <optional>

namespace calcurve {

constexpr double kProbFloor = 1e-12;

enum class LossKind { CE, MSE, CalMO };

struct CalMOConfig {
  double lambda_r = 0.5;
  double lambda_s = 0.01;
  double epsilon = 8.0 / 255.0;  // L-inf radius in input units
  int pgd_steps = 3;
  double pgd_alpha = 2.0 / 255.0;
  bool random_start = false;

  void validate() const {
    if (lambda_r < 0 || lambda_s < 0) throw SpecError("calmo: lambda must be >= 0");
    if (epsilon < 0) throw SpecError("calmo: epsilon must be >= 0");
    if (pgd_steps < 1) throw SpecError("calmo: pgd_steps must be >= 1");
    if (pgd_alpha <= 0) throw SpecError("calmo: pgd_alpha must be > 0");
  }
  bool alpha_exceeds_radius() const { return pgd_alpha > epsilon && epsilon > 0; }
};

struct LossValue {
  double total = 0;
  double ce_part = 0;
  double rob_part = 0;
  double smooth_part = 0;
};

inline double ce_loss(const ProbBatch& batch) {
  if (batch.n() == 0) throw SpecError("ce_loss: empty batch");
  double sum = 0;
  for (Index i = 0; i < batch.n(); ++i)
    sum += -std::log(std::max(batch.probs(i, batch.labels[i]), kProbFloor));
  return sum / static_cast<double>(batch.n());
}

/// Mean over examples of (1/K) * sum_k (z_k - onehot_k)^2.
inline double mse_loss(const LogitBatch& batch) {
  if (batch.n() == 0) throw SpecError("mse_loss: empty batch");
  const Index K = batch.num_classes();
  double sum = 0;
  for (Index i = 0; i < batch.n(); ++i) {
    for (Index k = 0; k < K; ++k) {
      const double t = (k == batch.labels[i]) ? 1.0 : 0.0;
      const double e = batch.logits(i, k) - t;
      sum += e * e;
    }
  }
  return sum / static_cast<double>(batch.n() * K);
}

namespace detail {

inline Matrix onehot(const IntVector& labels, Index K) {
  Matrix T = Matrix::Zero(labels.size(), K);
  for (Index i = 0; i < labels.size(); ++i) T(i, labels[i]) = 1.0;
  return T;
}

inline Matrix sign(const Matrix& m) {
  return m.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Matrix floored_log(const Matrix& p) {
  return p.unaryExpr([](double v) { return std::log(std::max(v, kProbFloor)); });
}

// Row-wise H_z(p) * v with H_z(p) = diag(p) - p p^T.
inline Matrix hz_apply_rows(const Matrix& P, const Matrix& V) {
  Vector rowdot = (P.array() * V.array()).rowwise().sum();
  return (P.array() * (V.array().colwise() - rowdot.array())).matrix();
}

}  // namespace detail

/// Mean batch CE gradient with respect to the logits: (p - onehot)/n.
inline Matrix ce_grad_logits(const ProbBatch& probs) {
  return (probs.probs - detail::onehot(probs.labels, probs.num_classes())) /
         static_cast<double>(probs.n());
}

inline Matrix mse_grad_logits(const LogitBatch& batch) {
  const Index K = batch.num_classes();
  return (2.0 / static_cast<double>(K)) *
         (batch.logits - detail::onehot(batch.labels, K)) / static_cast<double>(batch.n());
}

struct PgdResult {
  Matrix x_adv;
  bool aborted = false;  // non-finite gradient encountered; clean inputs returned
};

/// Batched L-inf PGD ascent on the CE loss. Iterates
/// x <- clip_eps(x + alpha * sign(grad_x CE)), starting at the clean input
/// unless cfg.random_start. Inputs are clipped to [0,1] only when `bounded`.
inline PgdResult pgd_attack(const Network& net, const ParamVector& params, const Matrix& X,
                            const IntVector& y, const CalMOConfig& cfg, bool bounded,
                            std::uint64_t start_seed = 0x9E3779B97F4A7C15ULL) {
  cfg.validate();
  check_labels(y, net.spec().num_classes);
  if (cfg.epsilon == 0.0) return {X, false};
  Matrix Xa = X;
  if (cfg.random_start) {
    std::mt19937_64 rng(start_seed);
    std::uniform_real_distribution<double> dist(-cfg.epsilon, cfg.epsilon);
    for (Index c = 0; c < Xa.cols(); ++c)
      for (Index r = 0; r < Xa.rows(); ++r) Xa(r, c) += dist(rng);
    Xa = Xa.array().max(X.array() - cfg.epsilon).min(X.array() + cfg.epsilon).matrix();
    if (bounded) Xa = Xa.cwiseMax(0.0).cwiseMin(1.0);
  }
  for (int t = 0; t < cfg.pgd_steps; ++t) {
    Forward fw = net.forward_cache(params, Xa);
    ProbBatch p = softmax(LogitBatch{fw.logits, y});
    Matrix dZ = p.probs - detail::onehot(y, net.spec().num_classes);
    Matrix g = net.input_grad(params, fw, dZ);
    if (!g.allFinite()) return {X, true};
    Xa += cfg.pgd_alpha * detail::sign(g);
    Xa = Xa.array().max(X.array() - cfg.epsilon).min(X.array() + cfg.epsilon).matrix();
    if (bounded) Xa = Xa.cwiseMax(0.0).cwiseMin(1.0);
  }
  return {std::move(Xa), false};
}

inline Vector pgd_attack_single(const Network& net, const ParamVector& params, const Vector& x,
                                int y, const CalMOConfig& cfg, bool bounded) {
  IntVector labels(1);
  labels[0] = y;
  return pgd_attack(net, params, Matrix(x.transpose()), labels, cfg, bounded)
      .x_adv.row(0)
      .transpose();
}

/// Per-example KL(p || q) with the probability floor applied inside the logs.
inline Vector kl_rows(const Matrix& P, const Matrix& Q) {
  Matrix diff = detail::floored_log(P) - detail::floored_log(Q);
  return (P.array() * diff.array()).rowwise().sum();
}

inline LossValue calmo_loss(const Network& net, const ParamVector& params, const Matrix& X,
                            const IntVector& y, const CalMOConfig& cfg, bool bounded) {
  cfg.validate();
  if (X.rows() == 0) throw SpecError("calmo_loss: empty batch");
  Forward fw = net.forward_cache(params, X);
  ProbBatch p = softmax(LogitBatch{fw.logits, y});
  LossValue v;
  v.ce_part = ce_loss(p);
  if (cfg.lambda_r > 0) {
    PgdResult adv = pgd_attack(net, params, X, y, cfg, bounded);
    ProbBatch q = softmax(net.forward(params, adv.x_adv, y));
    v.rob_part = kl_rows(p.probs, q.probs).mean();
  }
  if (cfg.lambda_s > 0) {
    Matrix U = Network::margin_cotangents(LogitBatch{fw.logits, y});
    Matrix G = net.input_grad(params, fw, U);
    v.smooth_part = G.rowwise().squaredNorm().mean();
  }
  v.total = v.ce_part + cfg.lambda_r * v.rob_part + cfg.lambda_s * v.smooth_part;
  return v;
}

/// Gradient of the composite objective with the adversarial points treated as
/// constants (no differentiation through the attack). Returns the loss parts
/// alongside the gradient.
inline std::pair<ParamVector, LossValue> calmo_grad(const Network& net, const ParamVector& params,
                                                    const Matrix& X, const IntVector& y,
                                                    const CalMOConfig& cfg, bool bounded) {
  cfg.validate();
  if (X.rows() == 0) throw SpecError("calmo_grad: empty batch");
  const double n = static_cast<double>(X.rows());
  Forward fw = net.forward_cache(params, X);
  ProbBatch p = softmax(LogitBatch{fw.logits, y});

  LossValue v;
  v.ce_part = ce_loss(p);
  Matrix dZ_clean = ce_grad_logits(p);

  ParamVector grad = net.zero_params();
  if (cfg.lambda_r > 0) {
    PgdResult adv = pgd_attack(net, params, X, y, cfg, bounded);
    Forward fw_adv = net.forward_cache(params, adv.x_adv);
    ProbBatch q = softmax(LogitBatch{fw_adv.logits, y});
    v.rob_part = kl_rows(p.probs, q.probs).mean();
    Matrix logdiff = detail::floored_log(p.probs) - detail::floored_log(q.probs);
    dZ_clean += (cfg.lambda_r / n) * detail::hz_apply_rows(p.probs, logdiff);
    Matrix dZ_adv = (cfg.lambda_r / n) * (q.probs - p.probs);
    grad.values += net.backward(params, fw_adv, dZ_adv).params.values;
  }
  grad.values += net.backward(params, fw, dZ_clean).params.values;
  if (cfg.lambda_s > 0) {
    Matrix U = Network::margin_cotangents(LogitBatch{fw.logits, y});
    Vector penalty;
    ParamVector gs = net.smoothness_grad(params, fw, U, &penalty);
    v.smooth_part = penalty.mean();
    grad.values += cfg.lambda_s * gs.values;
  }
  v.total = v.ce_part + cfg.lambda_r * v.rob_part + cfg.lambda_s * v.smooth_part;
  return {std::move(grad), v};
}

/// Exact reverse-mode gradient of the mean batch loss.
inline ParamVector grad_params(const Network& net, const ParamVector& params, const Matrix& X,
                               const IntVector& y, LossKind kind,
                               const CalMOConfig* calmo = nullptr, bool bounded = false) {
  if (X.rows() == 0) throw SpecError("grad_params: empty batch");
  check_labels(y, net.spec().num_classes);
  switch (kind) {
    case LossKind::CE: {
      Forward fw = net.forward_cache(params, X);
      ProbBatch p = softmax(LogitBatch{fw.logits, y});
      return net.backward(params, fw, ce_grad_logits(p)).params;
    }
    case LossKind::MSE: {
      Forward fw = net.forward_cache(params, X);
      return net.backward(params, fw, mse_grad_logits(LogitBatch{fw.logits, y})).params;
    }
    case LossKind::CalMO: {
      if (!calmo) throw SpecError("grad_params: CalMO requires a config");
      return calmo_grad(net, params, X, y, *calmo, bounded).first;
    }
  }
  throw SpecError("grad_params: unknown loss kind");
}

/// Loss value under the configured objective (mean over the batch).
inline double loss_value(const Network& net, const ParamVector& params, const Matrix& X,
                         const IntVector& y, LossKind kind, const CalMOConfig* calmo = nullptr,
                         bool bounded = false) {
  switch (kind) {
    case LossKind::CE:
      return ce_loss(softmax(net.forward(params, X, y)));
    case LossKind::MSE:
      return mse_loss(net.forward(params, X, y));
    case LossKind::CalMO:
      if (!calmo) throw SpecError("loss_value: CalMO requires a config");
      return calmo_loss(net, params, X, y, *calmo, bounded).total;
  }
  throw SpecError("loss_value: unknown loss kind");
}

/// d/dtheta of ||grad_x m_theta(x, y)||^2 for a single example.
inline ParamVector second_order_smoothness_grad(const Network& net, const ParamVector& params,
                                                const Vector& x, int y) {
  IntVector labels(1);
  labels[0] = y;
  check_labels(labels, net.spec().num_classes);
  Forward fw = net.forward_cache(params, Matrix(x.transpose()));
  Matrix U = Network::margin_cotangents(LogitBatch{fw.logits, labels});
  return net.smoothness_grad(params, fw, U);
}

}  // namespace calcurve
