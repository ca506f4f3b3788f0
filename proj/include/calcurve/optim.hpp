#pragma once

// The six parameter-update rules: full-batch and stochastic gradient descent,
// AdamW with decoupled weight decay, Muon (momentum orthogonalized per weight
// matrix by an odd-polynomial Newton-Schulz iteration), SAM's two-gradient
// ascent-descent step, and BulkSGD, which projects gradients off the cached
// top curvature eigenvectors.

#include "calcurve/net.hpp"

#include <functional>

namespace calcurve {

enum class OptimizerKind { GD, SGD, AdamW, Muon, SAM, BulkSGD };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::GD;
  double lr = 0.01;
  Index batch_size = 0;  // 0 = full batch
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double sam_rho = 0.05;
  int muon_ns_steps = 5;
  double muon_a = 3.4445;
  double muon_b = -4.7750;
  double muon_c = 2.0315;
  Index bulk_k = 1;
  Index bulk_refresh_every = 50;

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw SpecError("optimizer: lr must be finite and >= 0");
    if (kind == OptimizerKind::SAM && sam_rho < 0) throw SpecError("optimizer: sam_rho must be >= 0");
    if (kind == OptimizerKind::Muon && muon_ns_steps < 1)
      throw SpecError("optimizer: muon_ns_steps must be >= 1");
    if (kind == OptimizerKind::BulkSGD && (bulk_k < 0 || bulk_refresh_every < 1))
      throw SpecError("optimizer: bulk_k >= 0 and bulk_refresh_every >= 1 required");
  }
};

struct OptimizerState {
  long step = 0;
  Vector m;             // AdamW first moment
  Vector v;             // AdamW second moment
  Vector momentum_buf;  // SGD/SAM/Muon momentum
  Matrix bulk_basis;    // P x k, orthonormal columns
  Vector bulk_eigenvalues;
  long bulk_last_refresh = -1;
};

namespace detail {

inline void require_finite(const ParamVector& grad, const char* who) {
  if (!grad.finite()) throw NumericalError(std::string(who) + ": non-finite gradient");
}

}  // namespace detail

/// Plain descent step theta <- theta - lr * g, with optional heavy-ball
/// momentum. GD and SGD share this rule; they differ only in whether the
/// caller hands in the full-dataset or a minibatch gradient.
inline void step_sgd(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                     const OptimizerConfig& cfg) {
  detail::require_finite(grad, "step_sgd");
  if (cfg.momentum > 0.0) {
    if (state.momentum_buf.size() != params.size()) state.momentum_buf = Vector::Zero(params.size());
    state.momentum_buf = cfg.momentum * state.momentum_buf + grad.values;
    params.values -= cfg.lr * state.momentum_buf;
  } else {
    params.values -= cfg.lr * grad.values;
  }
  ++state.step;
}

inline void step_gd(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                    const OptimizerConfig& cfg) {
  step_sgd(params, grad, state, cfg);
}

/// AdamW: decoupled weight decay applied before the bias-corrected adaptive
/// update.
inline void step_adamw(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                       const OptimizerConfig& cfg) {
  detail::require_finite(grad, "step_adamw");
  if (state.m.size() != params.size()) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
  }
  const long t = state.step + 1;
  params.values *= (1.0 - cfg.lr * cfg.weight_decay);
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad.values;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.values.cwiseProduct(grad.values);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  Vector mhat = state.m / bc1;
  Vector vhat = state.v / bc2;
  if (!state.m.allFinite() || !state.v.allFinite())
    throw NumericalError("step_adamw: non-finite moments");
  params.values -= cfg.lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
  state.step = t;
}

/// Odd-polynomial iteration pushing all singular values of a matrix toward 1
/// (an approximate polar factor).
inline Matrix newton_schulz(const Matrix& G, int steps, double a, double b, double c) {
  const double norm = G.norm();
  if (norm == 0.0) return G;
  Matrix X = G / (norm + 1e-7);
  const bool transposed = X.rows() > X.cols();
  if (transposed) X = X.transpose().eval();
  for (int i = 0; i < steps; ++i) {
    Matrix A = X * X.transpose();
    Matrix B = b * A + c * A * A;
    X = a * X + B * X;
  }
  if (transposed) X = X.transpose().eval();
  return X;
}

/// Muon: momentum is accumulated as m <- mu m + g; every 2-D weight block of
/// m is replaced by its approximate polar factor and scaled by
/// sqrt(max(rows, cols)); bias blocks take a plain momentum-SGD step.
inline void step_muon(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                      const OptimizerConfig& cfg) {
  detail::require_finite(grad, "step_muon");
  if (state.momentum_buf.size() != params.size()) state.momentum_buf = Vector::Zero(params.size());
  state.momentum_buf = cfg.momentum * state.momentum_buf + grad.values;
  for (const BlockShape& block : params.layout) {
    Eigen::Map<Matrix> target(params.values.data() + block.offset, block.rows, block.cols);
    Eigen::Map<const Matrix> buf(state.momentum_buf.data() + block.offset, block.rows,
                                 block.cols);
    if (block.is_bias) {
      target -= cfg.lr * buf;
      continue;
    }
    if (buf.norm() == 0.0) continue;  // skip orthogonalization of zero blocks
    const double scale = std::sqrt(static_cast<double>(std::max(block.rows, block.cols)));
    target -= cfg.lr * scale *
              newton_schulz(buf, cfg.muon_ns_steps, cfg.muon_a, cfg.muon_b, cfg.muon_c);
  }
  ++state.step;
}

using GradFn = std::function<ParamVector(const ParamVector&)>;

/// SAM: evaluate the gradient at theta + rho * g/||g|| and descend along it.
/// A zero perturbation (rho = 0 or g = 0) reduces to the plain step on the
/// same gradient, bit for bit.
inline void step_sam(ParamVector& params, OptimizerState& state, const OptimizerConfig& cfg,
                     const GradFn& base_grad_fn) {
  ParamVector g = base_grad_fn(params);
  detail::require_finite(g, "step_sam");
  const double norm = g.values.norm();
  if (cfg.sam_rho > 0.0 && norm > 0.0) {
    ParamVector ascent = params;
    ascent.values += (cfg.sam_rho / norm) * g.values;
    g = base_grad_fn(ascent);
    detail::require_finite(g, "step_sam");
  }
  OptimizerConfig base = cfg;
  step_sgd(params, g, state, base);
}

using TopKFn = std::function<std::pair<Matrix, Vector>(const ParamVector&)>;

/// BulkSGD: theta <- theta - lr (g - V V^T g) with V the cached top-k
/// curvature eigenbasis, refreshed every bulk_refresh_every steps through the
/// supplied probe.
inline void step_bulk_sgd(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                          const OptimizerConfig& cfg, const TopKFn& top_k_fn) {
  detail::require_finite(grad, "step_bulk_sgd");
  if (cfg.bulk_k > 0) {
    const bool stale = state.bulk_last_refresh < 0 ||
                       state.step - state.bulk_last_refresh >= cfg.bulk_refresh_every ||
                       state.bulk_basis.cols() != cfg.bulk_k ||
                       state.bulk_basis.rows() != params.size();
    if (stale) {
      auto [basis, eigenvalues] = top_k_fn(params);
      state.bulk_basis = std::move(basis);
      state.bulk_eigenvalues = std::move(eigenvalues);
      state.bulk_last_refresh = state.step;
    }
    Vector proj = grad.values - state.bulk_basis * (state.bulk_basis.transpose() * grad.values);
    params.values -= cfg.lr * proj;
  } else {
    params.values -= cfg.lr * grad.values;
  }
  ++state.step;
}

}  // namespace calcurve
