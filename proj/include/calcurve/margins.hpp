#pragma once

// True/predicted/robust logit margins, exponential margin moments in
// log-domain arithmetic, and executable inequality monitors for the softmax
// tail lemmas and the two margin theorems.

#include "calcurve/loss.hpp"
#include "calcurve/net.hpp"

#include <optional>
#include <string>

namespace calcurve {

constexpr double kBoundTol = 1e-9;
constexpr double kExpCap = 700.0;  // exponents are saturated here, with a flag

/// One evaluated inequality: lhs <= rhs up to tol. Surrogate reports depend
/// on a heuristic estimate (PGD robust margins, path-sampled Lipschitz
/// constants) and are tracked separately from theorem violations.
struct BoundReport {
  std::string bound_id;
  double lhs = 0;
  double rhs = 0;
  double slack = 0;  // rhs - lhs
  bool holds = false;
  double tol = kBoundTol;
  bool surrogate = false;
  long step = -1;
  std::string split;
  double cj_used = std::numeric_limits<double>::quiet_NaN();
};

inline BoundReport make_report(std::string id, double lhs, double rhs, double tol = kBoundTol,
                               bool surrogate = false) {
  BoundReport r;
  r.bound_id = std::move(id);
  r.lhs = lhs;
  r.rhs = rhs;
  r.slack = rhs - lhs;
  r.holds = r.slack >= -tol;
  r.tol = tol;
  r.surrogate = surrogate;
  return r;
}

/// m_i = z_{y_i} - max_{j != y_i} z_{ij}; negative iff misclassified.
inline Vector clean_margins(const LogitBatch& batch) {
  const Index n = batch.n(), K = batch.num_classes();
  if (K < 2) throw SpecError("clean_margins: needs K >= 2");
  Vector m(n);
  for (Index i = 0; i < n; ++i) {
    const Index y = batch.labels[i];
    double best = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < K; ++j)
      if (j != y) best = std::max(best, batch.logits(i, j));
    m[i] = batch.logits(i, y) - best;
  }
  return m;
}

/// Label-free margin: top logit minus runner-up, always >= 0.
inline Vector predicted_margins(const Matrix& logits) {
  const Index n = logits.rows(), K = logits.cols();
  if (K < 2) throw SpecError("predicted_margins: needs K >= 2");
  Vector m(n);
  for (Index i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity(), second = top;
    for (Index k = 0; k < K; ++k) {
      const double z = logits(i, k);
      if (z > top) {
        second = top;
        top = z;
      } else if (z > second) {
        second = z;
      }
    }
    m[i] = top - second;
  }
  return m;
}

struct RobustMarginResult {
  Vector robust;     // per-example margin lower envelope found by the search
  Vector lipschitz;  // max dual-norm (L1) margin gradient over visited points
};

namespace detail {

inline Vector rowwise_l1(const Matrix& m) { return m.cwiseAbs().rowwise().sum(); }

}  // namespace detail

/// Heuristic robust margins via PGD descending the margin head inside the
/// L-inf ball. The returned value is the minimum over all visited points
/// (which include the clean input), hence always <= the clean margin; it is
/// an upper estimate of the true infimum. The Lipschitz column is the max
/// L1 gradient norm (the dual norm of the L-inf ball) over the same points.
inline RobustMarginResult robust_margins_pgd(const Network& net, const ParamVector& params,
                                             const Matrix& X, const IntVector& y,
                                             const CalMOConfig& cfg, bool bounded) {
  cfg.validate();
  check_labels(y, net.spec().num_classes);
  Matrix Xa = X;
  Forward fw = net.forward_cache(params, Xa);
  LogitBatch lb{fw.logits, y};
  Vector m_min = clean_margins(lb);
  Matrix U = Network::margin_cotangents(lb);
  Matrix G = net.input_grad(params, fw, U);
  Vector lip = detail::rowwise_l1(G);
  if (cfg.epsilon == 0.0) return {std::move(m_min), std::move(lip)};

  for (int t = 0; t < cfg.pgd_steps; ++t) {
    Xa -= cfg.pgd_alpha * detail::sign(G);
    Xa = Xa.array().max(X.array() - cfg.epsilon).min(X.array() + cfg.epsilon).matrix();
    if (bounded) Xa = Xa.cwiseMax(0.0).cwiseMin(1.0);
    fw = net.forward_cache(params, Xa);
    lb.logits = fw.logits;
    m_min = m_min.cwiseMin(clean_margins(lb));
    U = Network::margin_cotangents(lb);
    G = net.input_grad(params, fw, U);
    lip = lip.cwiseMax(detail::rowwise_l1(G));
  }
  return {std::move(m_min), std::move(lip)};
}

inline double robust_margin(const Network& net, const ParamVector& params, const Vector& x,
                            int y, const CalMOConfig& cfg, bool bounded = false) {
  IntVector labels(1);
  labels[0] = y;
  return robust_margins_pgd(net, params, Matrix(x.transpose()), labels, cfg, bounded).robust[0];
}

/// Exhaustive grid search over the L-inf ball for low-dimensional inputs
/// (d <= 2): certifies the robust margin up to grid resolution.
inline RobustMarginResult robust_margins_grid(const Network& net, const ParamVector& params,
                                              const Matrix& X, const IntVector& y,
                                              double epsilon, int grid_points, bool bounded) {
  const Index d = X.cols();
  if (d > 2) throw SpecError("robust_margins_grid: only d <= 2 supported");
  if (grid_points < 2) throw SpecError("robust_margins_grid: need at least 2 grid points");
  check_labels(y, net.spec().num_classes);

  Vector offsets(grid_points);
  for (int i = 0; i < grid_points; ++i)
    offsets[i] = -epsilon + 2.0 * epsilon * i / (grid_points - 1);

  Vector m_min = Vector::Constant(X.rows(), std::numeric_limits<double>::infinity());
  Vector lip = Vector::Zero(X.rows());
  const int outer = (d == 2) ? grid_points : 1;
  for (int a = 0; a < outer; ++a) {
    for (int b = 0; b < grid_points; ++b) {
      Matrix Xp = X;
      if (d == 2) {
        Xp.col(0).array() += offsets[a];
        Xp.col(1).array() += offsets[b];
      } else {
        Xp.col(0).array() += offsets[b];
      }
      if (bounded) Xp = Xp.cwiseMax(0.0).cwiseMin(1.0);
      Forward fw = net.forward_cache(params, Xp);
      LogitBatch lb{fw.logits, y};
      m_min = m_min.cwiseMin(clean_margins(lb));
      Matrix U = Network::margin_cotangents(lb);
      lip = lip.cwiseMax(detail::rowwise_l1(net.input_grad(params, fw, U)));
    }
  }
  return {std::move(m_min), std::move(lip)};
}

struct QMoments {
  double q_d = 1;      // mean e^{-m}
  double q0 = 1;       // mean e^{-m_eps}
  double q_minus = 1;  // mean e^{-eps L} e^{-m_eps}
  double q_plus = 1;   // mean e^{+eps L} e^{-m_eps}
  bool saturated = false;
};

namespace detail {

/// mean of e^{v_i} via log-sum-exp, saturating at e^{kExpCap}.
inline double stable_exp_mean(const Vector& v, bool* saturated = nullptr) {
  if (v.size() == 0) throw SpecError("stable_exp_mean: empty input");
  const double M = v.maxCoeff();
  if (M == -std::numeric_limits<double>::infinity()) return 0.0;
  double s = 0;
  for (Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - M);
  const double lse = M + std::log(s) - std::log(static_cast<double>(v.size()));
  if (lse > kExpCap) {
    if (saturated) *saturated = true;
    return std::exp(kExpCap);
  }
  return std::exp(lse);
}

}  // namespace detail

inline QMoments q_moments(const Vector& m_clean, const Vector& m_eps, const Vector& lipschitz,
                          double epsilon) {
  if (m_clean.size() != m_eps.size() || m_clean.size() != lipschitz.size())
    throw SpecError("q_moments: size mismatch");
  QMoments q;
  q.q_d = detail::stable_exp_mean(-m_clean, &q.saturated);
  q.q0 = detail::stable_exp_mean(-m_eps, &q.saturated);
  q.q_minus =
      detail::stable_exp_mean((-epsilon * lipschitz.array() - m_eps.array()).matrix(), &q.saturated);
  q.q_plus =
      detail::stable_exp_mean((epsilon * lipschitz.array() - m_eps.array()).matrix(), &q.saturated);
  return q;
}

/// Softmax tail inequalities for one logit vector: the (K-1)e^{-m} upper
/// bound, the e^{-m}/(1+(K-1)e^{-m}) lower bound, and for m >= 0 the
/// (1/K)e^{-m} sandwich floor.
inline std::vector<BoundReport> lemma_tail_oracle(const Vector& z, int y, double tol = 1e-10) {
  const Index K = z.size();
  if (K < 2) throw SpecError("lemma_tail_oracle: needs K >= 2");
  if (y < 0 || y >= K) throw SpecError("lemma_tail_oracle: label out of range");
  if (!z.allFinite()) throw NumericalError("lemma_tail_oracle: non-finite logits");

  double runner_up = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < K; ++j)
    if (j != y) runner_up = std::max(runner_up, z[j]);
  const double m = z[y] - runner_up;

  // 1 - p_y = sigmoid(logsumexp_{j != y}(z_j - z_y)), computed stably.
  double mx = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < K; ++j)
    if (j != y) mx = std::max(mx, z[j] - z[y]);
  double s = 0;
  for (Index j = 0; j < K; ++j)
    if (j != y) s += std::exp(z[j] - z[y] - mx);
  const double lse = mx + std::log(s);
  const double one_minus_py = 1.0 / (1.0 + std::exp(-lse));

  std::vector<BoundReport> reports;
  reports.push_back(
      make_report("lemma-tail-upper", one_minus_py, static_cast<double>(K - 1) * std::exp(-m), tol));
  reports.push_back(
      make_report("lemma-tail-lower", 1.0 / (std::exp(m) + static_cast<double>(K - 1)),
                  one_minus_py, tol));
  if (m >= 0)
    reports.push_back(make_report("lemma-tail-sandwich",
                                  std::exp(-m) / static_cast<double>(K), one_minus_py, tol));
  return reports;
}

/// Inputs shared by the theorem monitors, all evaluated on one data slice.
struct MarginSummary {
  Vector clean;
  Vector robust;
  Vector predicted;
  Vector lipschitz;
  double epsilon = 0;
  double gamma = 0;  // min clean margin
  QMoments q;
};

inline MarginSummary summarize_margins(const LogitBatch& batch, const RobustMarginResult& rm,
                                       double epsilon) {
  MarginSummary ms;
  ms.clean = clean_margins(batch);
  ms.robust = rm.robust;
  ms.predicted = predicted_margins(batch.logits);
  ms.lipschitz = rm.lipschitz;
  ms.epsilon = epsilon;
  ms.gamma = ms.clean.minCoeff();
  ms.q = q_moments(ms.clean, ms.robust, ms.lipschitz, epsilon);
  return ms;
}

/// Overlap-regime monitors: valid for any distribution and any parameters.
/// The robust moment entering the right-hand sides only over-estimates the
/// search-based one, so a passing check implies the theorem's inequality.
inline std::vector<BoundReport> theorem_overlap_oracle(double ece_value,
                                                       std::optional<double> lambda_max,
                                                       const MarginSummary& ms, double cj,
                                                       Index K, double tol = kBoundTol) {
  std::vector<BoundReport> reports;
  const double Km1 = static_cast<double>(K - 1);
  reports.push_back(
      make_report("thm4.1-ece", ece_value, std::min(1.0, Km1 * ms.q.q0), tol));
  if (lambda_max) {
    BoundReport r = make_report("thm4.1-lmax", *lambda_max, 2.0 * cj * cj * Km1 * ms.q.q0, tol);
    r.cj_used = cj;
    reports.push_back(std::move(r));
  }
  return reports;
}

struct SeparableOracleResult {
  bool in_regime = false;  // gamma > 0; nothing is asserted otherwise
  std::vector<BoundReport> reports;
};

/// Interpolating-regime monitors. The six core inequalities are exact given
/// the estimator directions (power iteration under-estimates lambda_max, PGD
/// over-estimates the robust margin); the Q^- lower bound additionally leans
/// on the path-sampled Lipschitz surrogate and is marked as such.
inline SeparableOracleResult theorem_separable_oracle(double ece_value,
                                                      std::optional<double> lambda_max,
                                                      const MarginSummary& ms, double cj,
                                                      Index K, double tol = kBoundTol) {
  SeparableOracleResult result;
  if (ms.gamma <= 0) return result;
  result.in_regime = true;
  const double Kd = static_cast<double>(K);
  const double Km1 = Kd - 1.0;
  auto add = [&](BoundReport r) {
    r.cj_used = cj;
    result.reports.push_back(std::move(r));
  };
  add(make_report("thm4.2-sandwich-lower", ms.q.q_d / Kd, ece_value, tol));
  add(make_report("thm4.2-sandwich-upper", ece_value, Km1 * ms.q.q_d, tol));
  add(make_report("thm4.2-gamma", Km1 * ms.q.q_d, Km1 * std::exp(-ms.gamma), tol));
  if (lambda_max) {
    add(make_report("thm4.2-lmax-qd", *lambda_max, 2.0 * cj * cj * Km1 * ms.q.q_d, tol));
    add(make_report("thm4.2-lmax-ece", *lambda_max, 2.0 * cj * cj * Kd * Km1 * ece_value, tol));
  }
  add(make_report("thm4.2-robust-upper", ece_value, Km1 * ms.q.q0, tol));
  if (lambda_max)
    add(make_report("thm4.2-robust-lmax", *lambda_max, 2.0 * cj * cj * Km1 * ms.q.q0, tol));
  add(make_report("thm4.2-robust-lower", ms.q.q_minus / Kd, ece_value, tol,
                  /*surrogate=*/true));
  return result;
}

/// Label-free curvature bound through the predicted margin.
inline BoundReport label_free_gn_bound(double lambda_max, const Vector& predicted, double cj,
                                       Index K, double tol = kBoundTol) {
  const double moment = detail::stable_exp_mean(-predicted);
  BoundReport r = make_report("remB-labelfree-lmax", lambda_max,
                              2.0 * cj * cj * static_cast<double>(K - 1) * moment, tol);
  r.cj_used = cj;
  return r;
}

/// Checks m_eps >= m - eps * L_m with the search-based robust margin and the
/// path-sampled Lipschitz constant. Violations indicate the surrogate
/// under-estimated the local constant, not a theorem failure.
inline BoundReport lipschitz_lower_oracle(double clean_margin, double robust_margin,
                                          double lipschitz, double epsilon,
                                          double tol = kBoundTol) {
  return make_report("lipschitz-surrogate", clean_margin - epsilon * lipschitz, robust_margin,
                     tol, /*surrogate=*/true);
}

inline BoundReport lipschitz_lower_oracle(const Network& net, const ParamVector& params,
                                          const Vector& x, int y, const CalMOConfig& cfg,
                                          bool bounded = false, double tol = kBoundTol) {
  IntVector labels(1);
  labels[0] = y;
  Matrix X = x.transpose();
  RobustMarginResult rm = robust_margins_pgd(net, params, X, labels, cfg, bounded);
  Forward fw = net.forward_cache(params, X);
  const double m = clean_margins(LogitBatch{fw.logits, labels})[0];
  return lipschitz_lower_oracle(m, rm.robust[0], rm.lipschitz[0], cfg.epsilon, tol);
}

}  // namespace calcurve
