#pragma once

// Test-only oracles, kept independent of the library's differentiation paths:
// central finite differences, a straight-line scalar reimplementation of the
// forward pass, and dense Gauss-Newton / Jacobian assembly fed to Eigen's
// dense eigensolvers.

#include "calcurve/calcurve.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <functional>
#include <random>

namespace oracles {

using namespace calcurve;

inline std::mt19937_64 rng_for(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  return m;
}

inline IntVector random_labels(Index n, Index K, std::mt19937_64& rng) {
  IntVector y(n);
  for (Index i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % static_cast<std::uint64_t>(K));
  return y;
}

/// A small random architecture with at most ~500 parameters.
inline NetworkSpec random_tiny_spec(std::mt19937_64& rng, bool tanh_only = false) {
  NetworkSpec spec;
  spec.input_dim = 2 + static_cast<Index>(rng() % 4);
  spec.num_classes = 2 + static_cast<Index>(rng() % 4);
  const Index depth = rng() % 3;  // 0..2 hidden layers
  for (Index l = 0; l < depth; ++l) {
    Activation a = (!tanh_only && (rng() % 3 == 0)) ? Activation::Relu : Activation::Tanh;
    spec.hidden.push_back({3 + static_cast<Index>(rng() % 6), a});
  }
  spec.init_seed = rng();
  return spec;
}

/// Central finite differences of a scalar function of the parameters.
inline Vector fd_gradient(const std::function<double(const ParamVector&)>& f,
                          const Network& net, const ParamVector& at, double h = 1e-5) {
  Vector g(at.size());
  ParamVector p = at;
  for (Index i = 0; i < at.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + h;
    const double up = f(p);
    p.values[i] = orig - h;
    const double down = f(p);
    p.values[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  (void)net;
  return g;
}

inline Vector fd_gradient_input(const std::function<double(const Vector&)>& f, const Vector& at,
                                double h = 1e-5) {
  Vector g(at.size());
  Vector x = at;
  for (Index i = 0; i < at.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const Vector& got, const Vector& want, double floor = 1e-6) {
  double worst = 0;
  for (Index i = 0; i < got.size(); ++i) {
    const double denom = std::max({std::abs(want[i]), std::abs(got[i]), floor});
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

/// Straight-line scalar reimplementation of the forward pass (no Eigen
/// expressions, no shared code with Network::forward_cache).
inline std::vector<double> plain_forward(const NetworkSpec& spec, const ParamVector& params,
                                         const std::vector<double>& x) {
  std::vector<double> act = x;
  size_t offset = 0;
  std::vector<std::pair<size_t, Activation>> layers;
  for (const auto& h : spec.hidden) layers.push_back({static_cast<size_t>(h.width), h.activation});
  layers.push_back({static_cast<size_t>(spec.num_classes), Activation::Tanh});  // act unused

  for (size_t l = 0; l < layers.size(); ++l) {
    const size_t out_dim = layers[l].first;
    const size_t in_dim = act.size();
    // Column-major weight block, rows = out_dim.
    std::vector<double> next(out_dim, 0.0);
    for (size_t c = 0; c < in_dim; ++c)
      for (size_t r = 0; r < out_dim; ++r)
        next[r] += params.values[static_cast<Index>(offset + c * out_dim + r)] * act[c];
    offset += out_dim * in_dim;
    for (size_t r = 0; r < out_dim; ++r) next[r] += params.values[static_cast<Index>(offset + r)];
    offset += out_dim;
    if (l + 1 < layers.size()) {
      for (double& v : next)
        v = layers[l].second == Activation::Tanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
    }
    act = std::move(next);
  }
  return act;
}

/// Dense per-example parameter Jacobian (K x P), assembled column by column
/// from jvp on coordinate directions.
inline Matrix dense_jacobian(const Network& net, const ParamVector& params, const Vector& x) {
  const Index P = net.param_count();
  const Index K = net.spec().num_classes;
  Matrix X = x.transpose();
  Forward fw = net.forward_cache(params, X);
  Matrix J(K, P);
  ParamVector dir = net.zero_params();
  for (Index p = 0; p < P; ++p) {
    dir.values.setZero();
    dir.values[p] = 1.0;
    J.col(p) = net.jvp_params(params, fw, dir).row(0).transpose();
  }
  return J;
}

/// Dense empirical Gauss-Newton matrix (1/n) sum_i J_i^T H_i J_i.
inline Matrix dense_gn(const Network& net, const ParamVector& params, const Matrix& X,
                       GnKind kind = GnKind::CE) {
  const Index P = net.param_count();
  const Index K = net.spec().num_classes;
  Matrix H = Matrix::Zero(P, P);
  for (Index i = 0; i < X.rows(); ++i) {
    Matrix J = dense_jacobian(net, params, X.row(i).transpose());
    Matrix Hz;
    if (kind == GnKind::CE) {
      ProbBatch p = softmax(net.forward(params, X.row(i), IntVector::Zero(1)));
      Hz = logit_hessian(p.probs.row(0).transpose());
    } else {
      Hz = (2.0 / static_cast<double>(K)) * Matrix::Identity(K, K);
    }
    H += J.transpose() * Hz * J;
  }
  return H / static_cast<double>(X.rows());
}

inline double dense_lambda_max(const Matrix& H) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(H, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

/// Largest principal angle between the spans of two orthonormal column sets.
inline double subspace_angle(const Matrix& A, const Matrix& B) {
  Eigen::JacobiSVD<Matrix> svd(A.transpose() * B);
  const double c = std::min(1.0, svd.singularValues().minCoeff());
  return std::acos(c);
}

}  // namespace oracles
