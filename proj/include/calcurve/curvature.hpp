#pragma once

// Matrix-free Gauss-Newton curvature probes: the logit Hessian of
// cross-entropy, GN-vector products built from one jvp and one vjp per batch,
// seeded power iteration with Gram-Schmidt deflation, and Jacobian operator
// norms (both the parameter Jacobian used by the curvature bounds and the
// input Jacobian).

#include "calcurve/loss.hpp"
#include "calcurve/net.hpp"

#include <Eigen/Eigenvalues>

namespace calcurve {

struct CurvatureProbeConfig {
  int power_iters = 100;
  double tol = 1e-6;  // relative eigenvalue change over a 5-iteration window
  int deflation_k = 1;
  Index probe_batch_size = 0;  // 0 = use the full slice
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (power_iters < 1) throw SpecError("curvature: power_iters must be >= 1");
    if (tol <= 0) throw SpecError("curvature: tol must be > 0");
  }
};

struct SharpnessEstimate {
  double lambda_max = 0;
  int iterations_used = 0;
  bool converged = false;
  double residual = 0;
};

/// H_z(p) = diag(p) - p p^T, the CE Hessian with respect to the logits.
inline Matrix logit_hessian(const Vector& p) {
  if (p.size() < 2 || p.minCoeff() < -1e-12 || std::abs(p.sum() - 1.0) > 1e-9)
    throw SpecError("logit_hessian: not a probability vector");
  return Matrix(p.asDiagonal()) - p * p.transpose();
}

enum class GnKind { CE, MSE };

/// Matrix-free multiplication by the empirical Gauss-Newton matrix
/// (1/n) sum_i J_i^T H_z(p_i) J_i of a dataset slice. The forward pass is
/// cached once so repeated applications (power iteration) reuse it.
class GnOperator {
 public:
  GnOperator(const Network& net, const ParamVector& params, const Matrix& X,
             GnKind kind = GnKind::CE)
      : net_(net), params_(params), fw_(net.forward_cache(params, X)), kind_(kind) {
    if (X.rows() == 0) throw SpecError("gn operator: empty slice");
    if (kind_ == GnKind::CE) {
      IntVector dummy = IntVector::Zero(X.rows());
      probs_ = softmax(LogitBatch{fw_.logits, dummy}).probs;
    }
    scratch_ = net.zero_params();
  }

  Index dim() const { return net_.param_count(); }
  Index n() const { return fw_.act[0].rows(); }

  Vector apply(const Vector& v) const {
    scratch_.values = v;
    Matrix dZ = net_.jvp_params(params_, fw_, scratch_);
    Matrix W;
    if (kind_ == GnKind::CE) {
      W = detail::hz_apply_rows(probs_, dZ);
    } else {
      W = (2.0 / static_cast<double>(net_.spec().num_classes)) * dZ;
    }
    W /= static_cast<double>(n());
    return net_.backward(params_, fw_, W, /*want_inputs=*/false).params.values;
  }

 private:
  const Network& net_;
  const ParamVector& params_;
  Forward fw_;
  Matrix probs_;
  GnKind kind_;
  mutable ParamVector scratch_;
};

inline ParamVector gn_vector_product(const Network& net, const ParamVector& params,
                                     const Matrix& X, const ParamVector& v,
                                     GnKind kind = GnKind::CE) {
  if (v.size() != net.param_count()) throw SpecError("gn_vector_product: size mismatch");
  GnOperator op(net, params, X, kind);
  ParamVector out = net.zero_params();
  out.values = op.apply(v.values);
  return out;
}

namespace detail {

inline Vector seeded_unit_vector(Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  Vector v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = dist(rng);
  return v;
}

inline void project_out(Vector& v, const Matrix& basis, Index cols) {
  for (Index j = 0; j < cols; ++j) v -= basis.col(j).dot(v) * basis.col(j);
}

}  // namespace detail

/// Power iteration on a PSD operator with optional deflation against the
/// first `deflate_cols` columns of `deflate`. Returns the Rayleigh-quotient
/// eigenvalue estimate and the final iterate.
template <typename ApplyFn>
inline std::pair<SharpnessEstimate, Vector> power_iteration(const ApplyFn& apply, Index dim,
                                                            const CurvatureProbeConfig& cfg,
                                                            const Matrix& deflate = Matrix(),
                                                            Index deflate_cols = 0) {
  cfg.validate();
  Vector v;
  for (int attempt = 0; attempt < 2; ++attempt) {
    v = detail::seeded_unit_vector(dim, cfg.rng_seed + static_cast<std::uint64_t>(attempt));
    detail::project_out(v, deflate, deflate_cols);
    const double nv = v.norm();
    if (nv > 1e-12) {
      v /= nv;
      break;
    }
    if (attempt == 1) throw NumericalError("power_iteration: start vector breakdown");
  }

  SharpnessEstimate est;
  std::vector<double> history;
  history.reserve(static_cast<size_t>(cfg.power_iters));
  for (int t = 1; t <= cfg.power_iters; ++t) {
    Vector w = apply(v);
    detail::project_out(w, deflate, deflate_cols);
    const double lambda = v.dot(w);
    est.lambda_max = lambda;
    est.iterations_used = t;
    est.residual = (w - lambda * v).norm();
    const double nw = w.norm();
    if (nw <= 1e-300) {
      // Operator annihilates the iterate: the deflated spectrum is zero.
      est.lambda_max = 0;
      est.residual = 0;
      est.converged = true;
      break;
    }
    v = w / nw;
    history.push_back(lambda);
    if (history.size() >= 6) {
      const double prev = history[history.size() - 6];
      if (std::abs(lambda - prev) <= cfg.tol * std::max(std::abs(lambda), 1e-300)) {
        est.converged = true;
        break;
      }
    }
  }
  return {est, v};
}

/// Top GN eigenvalue on a dataset slice via seeded power iteration.
inline SharpnessEstimate gn_sharpness(const Network& net, const ParamVector& params,
                                      const Matrix& X, const CurvatureProbeConfig& cfg,
                                      GnKind kind = GnKind::CE) {
  GnOperator op(net, params, X, kind);
  auto [est, vec] =
      power_iteration([&op](const Vector& v) { return op.apply(v); }, op.dim(), cfg);
  (void)vec;
  return est;
}

/// GN sharpness restricted to a single minibatch.
inline SharpnessEstimate batch_sharpness(const Network& net, const ParamVector& params,
                                         const Matrix& minibatch,
                                         const CurvatureProbeConfig& cfg,
                                         GnKind kind = GnKind::CE) {
  return gn_sharpness(net, params, minibatch, cfg, kind);
}

struct EigenBasis {
  Matrix vectors;      // dim x k, orthonormal columns
  Vector eigenvalues;  // nonincreasing
  bool converged = true;
};

/// Top-k GN eigenpairs by power iteration with Gram-Schmidt deflation.
inline EigenBasis top_k_eigenvectors(const Network& net, const ParamVector& params,
                                     const Matrix& X, Index k,
                                     const CurvatureProbeConfig& cfg, GnKind kind = GnKind::CE) {
  if (k < 1) throw SpecError("top_k_eigenvectors: k must be >= 1");
  GnOperator op(net, params, X, kind);
  EigenBasis basis;
  basis.vectors = Matrix::Zero(op.dim(), k);
  basis.eigenvalues = Vector::Zero(k);
  for (Index j = 0; j < k; ++j) {
    CurvatureProbeConfig sub = cfg;
    sub.rng_seed = cfg.rng_seed + static_cast<std::uint64_t>(j) * 7919ULL;
    auto [est, vec] = power_iteration([&op](const Vector& v) { return op.apply(v); }, op.dim(),
                                      sub, basis.vectors, j);
    basis.vectors.col(j) = vec;
    basis.eigenvalues[j] = est.lambda_max;
    basis.converged = basis.converged && est.converged;
  }
  // Deflation noise can slightly reorder near-degenerate pairs.
  std::vector<Index> order(static_cast<size_t>(k));
  for (Index j = 0; j < k; ++j) order[static_cast<size_t>(j)] = j;
  std::stable_sort(order.begin(), order.end(), [&basis](Index a, Index b) {
    return basis.eigenvalues[a] > basis.eigenvalues[b];
  });
  Matrix vs = basis.vectors;
  Vector es = basis.eigenvalues;
  for (Index j = 0; j < k; ++j) {
    basis.vectors.col(j) = vs.col(order[static_cast<size_t>(j)]);
    basis.eigenvalues[j] = es[order[static_cast<size_t>(j)]];
  }
  return basis;
}

enum class JacobianKind { Parameter, Input };

/// Operator norm of the logit Jacobian at a single input, via power iteration
/// on J J^T in logit space (each step is one vjp plus one jvp).
inline double jacobian_opnorm(const Network& net, const ParamVector& params, const Vector& x,
                              const CurvatureProbeConfig& cfg,
                              JacobianKind kind = JacobianKind::Parameter) {
  Matrix X = x.transpose();
  Forward fw = net.forward_cache(params, X);
  const Index K = net.spec().num_classes;
  ParamVector scratch = net.zero_params();
  auto apply = [&](const Vector& u) -> Vector {
    Matrix U = u.transpose();
    if (kind == JacobianKind::Parameter) {
      scratch.values = net.backward(params, fw, U, /*want_inputs=*/false).params.values;
      return net.jvp_params(params, fw, scratch).row(0).transpose();
    }
    Matrix g = net.input_grad(params, fw, U);
    return net.jvp_inputs(params, fw, g).row(0).transpose();
  };
  auto [est, vec] = power_iteration(apply, K, cfg);
  (void)vec;
  return std::sqrt(std::max(est.lambda_max, 0.0));
}

/// Exact per-example Jacobian operator norms for a batch: assembles each
/// example's K x K Gram matrix J J^T from K reverse passes and solves it
/// densely. Used to report the empirical C_J over a probe set.
inline Vector jacobian_opnorms_batch(const Network& net, const ParamVector& params,
                                     const Matrix& X,
                                     JacobianKind kind = JacobianKind::Parameter) {
  const Index n = X.rows();
  const Index K = net.spec().num_classes;
  Forward fw = net.forward_cache(params, X);
  Vector out(n);

  if (kind == JacobianKind::Input) {
    std::vector<Matrix> grads(static_cast<size_t>(K));
    for (Index k = 0; k < K; ++k) {
      Matrix U = Matrix::Zero(n, K);
      U.col(k).setOnes();
      grads[static_cast<size_t>(k)] = net.input_grad(params, fw, U);
    }
    Matrix gram(K, K);
    for (Index i = 0; i < n; ++i) {
      for (Index a = 0; a < K; ++a)
        for (Index b = a; b < K; ++b) {
          const double d =
              grads[static_cast<size_t>(a)].row(i).dot(grads[static_cast<size_t>(b)].row(i));
          gram(a, b) = d;
          gram(b, a) = d;
        }
      Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
      out[i] = std::sqrt(std::max(es.eigenvalues().maxCoeff(), 0.0));
    }
    return out;
  }

  // Parameter Jacobian: the per-example pullback for cotangent u is, per
  // layer, the outer product delta_l a_{l-1}^T plus the bias block delta_l,
  // so <J^T u, J^T w> = sum_l <delta_l^u, delta_l^w> (1 + ||a_{l-1}||^2).
  const Index L = net.num_hidden();
  std::vector<std::vector<Matrix>> chains(static_cast<size_t>(K));
  for (Index k = 0; k < K; ++k) {
    Matrix U = Matrix::Zero(n, K);
    U.col(k).setOnes();
    chains[static_cast<size_t>(k)] = net.backward_chain(params, fw, U);
  }
  Matrix act_sq(n, L + 1);
  for (Index l = 0; l <= L; ++l)
    act_sq.col(l) = fw.act[static_cast<size_t>(l)].rowwise().squaredNorm();
  Matrix gram(K, K);
  for (Index i = 0; i < n; ++i) {
    gram.setZero();
    for (Index l = 0; l <= L; ++l) {
      const double w = 1.0 + act_sq(i, l);
      for (Index a = 0; a < K; ++a)
        for (Index b = a; b < K; ++b) {
          const double d = chains[static_cast<size_t>(a)][static_cast<size_t>(l)].row(i).dot(
              chains[static_cast<size_t>(b)][static_cast<size_t>(l)].row(i));
          gram(a, b) += w * d;
          gram(b, a) = gram(a, b);
        }
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
    out[i] = std::sqrt(std::max(es.eigenvalues().maxCoeff(), 0.0));
  }
  return out;
}

}  // namespace calcurve
