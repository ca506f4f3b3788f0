#pragma once

// Dense feed-forward classifier with exact reverse-mode (vjp), forward-mode
// (jvp), input-gradient heads, and the nested second-order pass that
// differentiates an input-gradient norm with respect to the parameters.
// Everything is float64 and deterministic for a fixed seed.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace calcurve {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

/// Raised when a computation produces non-finite intermediates.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { Tanh, Relu };
enum class InitScheme { UniformFanIn, GaussianScaled };

struct HiddenSpec {
  Index width = 0;
  Activation activation = Activation::Tanh;
};

struct NetworkSpec {
  Index input_dim = 0;
  std::vector<HiddenSpec> hidden;
  Index num_classes = 0;
  std::uint64_t init_seed = 0;
  InitScheme init_scheme = InitScheme::UniformFanIn;
};

/// One contiguous block of the flat parameter vector. Weight blocks are
/// rows x cols (column-major within the flat array), bias blocks have cols=1.
struct BlockShape {
  Index layer = 0;
  bool is_bias = false;
  Index rows = 0;
  Index cols = 1;
  Index offset = 0;
  Index size() const { return rows * cols; }
};

struct ParamVector {
  Vector values;
  std::vector<BlockShape> layout;

  Index size() const { return values.size(); }
  bool finite() const { return values.allFinite(); }
};

struct LogitBatch {
  Matrix logits;     // n x K
  IntVector labels;  // n
  Index n() const { return logits.rows(); }
  Index num_classes() const { return logits.cols(); }
};

struct ProbBatch {
  Matrix probs;      // n x K, rows on the simplex
  IntVector labels;  // n
  Index n() const { return probs.rows(); }
  Index num_classes() const { return probs.cols(); }
};

inline void check_labels(const IntVector& labels, Index num_classes) {
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw SpecError("label out of range at index " + std::to_string(i));
  }
}

/// Numerically stable softmax (max-subtraction per row).
inline ProbBatch softmax(const LogitBatch& batch) {
  if (!batch.logits.allFinite()) throw NumericalError("softmax: non-finite logits");
  Matrix p = batch.logits;
  for (Index i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return ProbBatch{std::move(p), batch.labels};
}

namespace detail {

inline double act_eval(Activation a, double x) {
  return a == Activation::Tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

// First derivative expressed through the pre-activation value.
// relu'(0) is taken as 0.
inline double act_d1(Activation a, double x) {
  if (a == Activation::Relu) return x > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

// Second derivative; identically zero for relu (a.e.).
inline double act_d2(Activation a, double x) {
  if (a == Activation::Relu) return 0.0;
  const double t = std::tanh(x);
  return -2.0 * t * (1.0 - t * t);
}

}  // namespace detail

/// Cached forward pass over a batch. act[0] is the input matrix; pre[l] and
/// act[l+1] are the pre-/post-activation matrices of hidden layer l; logits
/// come from the final affine layer.
struct Forward {
  std::vector<Matrix> act;  // act[0] = X, act[l] = sigma(pre[l-1])
  std::vector<Matrix> pre;  // hidden pre-activations only
  Matrix logits;
};

/// Parameter-space gradient contributions produced by a reverse pass.
struct Pullback {
  ParamVector params;
  Matrix inputs;  // n x d, per-example input cotangents
};

class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    if (spec_.input_dim < 1) throw SpecError("input_dim must be >= 1");
    if (spec_.num_classes < 2) throw SpecError("num_classes must be >= 2");
    for (const auto& h : spec_.hidden)
      if (h.width < 1) throw SpecError("hidden width must be >= 1");
    Index in = spec_.input_dim;
    Index offset = 0;
    Index layer = 0;
    for (const auto& h : spec_.hidden) {
      layout_.push_back({layer, false, h.width, in, offset});
      offset += h.width * in;
      layout_.push_back({layer, true, h.width, 1, offset});
      offset += h.width;
      in = h.width;
      ++layer;
    }
    layout_.push_back({layer, false, spec_.num_classes, in, offset});
    offset += spec_.num_classes * in;
    layout_.push_back({layer, true, spec_.num_classes, 1, offset});
    offset += spec_.num_classes;
    param_count_ = offset;
  }

  const NetworkSpec& spec() const { return spec_; }
  Index param_count() const { return param_count_; }
  Index num_layers() const { return static_cast<Index>(spec_.hidden.size()) + 1; }
  Index num_hidden() const { return static_cast<Index>(spec_.hidden.size()); }
  const std::vector<BlockShape>& layout() const { return layout_; }

  Activation hidden_activation(Index l) const { return spec_.hidden[static_cast<size_t>(l)].activation; }

  Eigen::Map<const Matrix> weight(const ParamVector& p, Index layer) const {
    const BlockShape& b = layout_[static_cast<size_t>(2 * layer)];
    return {p.values.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<const Vector> bias(const ParamVector& p, Index layer) const {
    const BlockShape& b = layout_[static_cast<size_t>(2 * layer + 1)];
    return {p.values.data() + b.offset, b.rows};
  }
  Eigen::Map<Matrix> weight(ParamVector& p, Index layer) const {
    const BlockShape& b = layout_[static_cast<size_t>(2 * layer)];
    return {p.values.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<Vector> bias(ParamVector& p, Index layer) const {
    const BlockShape& b = layout_[static_cast<size_t>(2 * layer + 1)];
    return {p.values.data() + b.offset, b.rows};
  }

  ParamVector zero_params() const {
    ParamVector p;
    p.values = Vector::Zero(param_count_);
    p.layout = layout_;
    return p;
  }

  /// Deterministic initialization from spec.init_seed.
  ParamVector init_params() const {
    ParamVector p = zero_params();
    std::mt19937_64 rng(spec_.init_seed);
    for (Index l = 0; l < num_layers(); ++l) {
      const Index fan_in = layout_[static_cast<size_t>(2 * l)].cols;
      auto W = weight(p, l);
      auto b = bias(p, l);
      if (spec_.init_scheme == InitScheme::UniformFanIn) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (Index c = 0; c < W.cols(); ++c)
          for (Index r = 0; r < W.rows(); ++r) W(r, c) = dist(rng);
        for (Index r = 0; r < b.size(); ++r) b[r] = dist(rng);
      } else {
        const double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::normal_distribution<double> dist(0.0, sigma);
        for (Index c = 0; c < W.cols(); ++c)
          for (Index r = 0; r < W.rows(); ++r) W(r, c) = dist(rng);
        b.setZero();
      }
    }
    return p;
  }

  /// Forward pass with cached activations (needed by every gradient pass).
  Forward forward_cache(const ParamVector& params, const Matrix& X) const {
    if (X.cols() != spec_.input_dim) throw SpecError("forward: input_dim mismatch");
    if (!X.allFinite()) throw NumericalError("forward: non-finite input");
    Forward fw;
    const Index L = num_hidden();
    fw.act.reserve(static_cast<size_t>(L) + 1);
    fw.pre.reserve(static_cast<size_t>(L));
    fw.act.push_back(X);
    for (Index l = 0; l < L; ++l) {
      const Activation a = hidden_activation(l);
      Matrix pre = fw.act.back() * weight(params, l).transpose();
      pre.rowwise() += bias(params, l).transpose();
      Matrix act = pre.unaryExpr([a](double v) { return detail::act_eval(a, v); });
      fw.pre.push_back(std::move(pre));
      fw.act.push_back(std::move(act));
    }
    fw.logits = fw.act.back() * weight(params, L).transpose();
    fw.logits.rowwise() += bias(params, L).transpose();
    if (!fw.logits.allFinite()) throw NumericalError("forward: non-finite logits");
    return fw;
  }

  LogitBatch forward(const ParamVector& params, const Matrix& X, const IntVector& labels) const {
    check_labels(labels, spec_.num_classes);
    Forward fw = forward_cache(params, X);
    return LogitBatch{std::move(fw.logits), labels};
  }

  /// Reverse pass: given cotangent dZ (n x K) at the logits, accumulate the
  /// parameter pullback J^T dZ (summed over the batch) and, optionally, the
  /// per-example input pullback.
  Pullback backward(const ParamVector& params, const Forward& fw, const Matrix& dZ,
                    bool want_inputs = true) const {
    Pullback out;
    out.params = zero_params();
    const Index L = num_hidden();
    Matrix delta = dZ;
    for (Index l = L; l >= 0; --l) {
      weight(out.params, l).noalias() += delta.transpose() * fw.act[static_cast<size_t>(l)];
      bias(out.params, l) += delta.colwise().sum().transpose();
      if (l == 0) {
        if (want_inputs) out.inputs = delta * weight(params, l);
        break;
      }
      Matrix dA = delta * weight(params, l);
      const Activation a = hidden_activation(l - 1);
      delta = dA.array() * fw.pre[static_cast<size_t>(l - 1)].unaryExpr([a](double v) {
        return detail::act_d1(a, v);
      }).array();
    }
    if (!out.params.finite()) throw NumericalError("backward: non-finite gradient");
    return out;
  }

  /// Cotangents at each affine layer's output for the reverse pass seeded with
  /// dZ: chain[L] = dZ and chain[l] is the cotangent at hidden pre-activation
  /// l. Together with the cached activations this determines every
  /// per-example parameter pullback.
  std::vector<Matrix> backward_chain(const ParamVector& params, const Forward& fw,
                                     const Matrix& dZ) const {
    const Index L = num_hidden();
    std::vector<Matrix> chain(static_cast<size_t>(L) + 1);
    chain[static_cast<size_t>(L)] = dZ;
    for (Index l = L; l >= 1; --l) {
      Matrix dA = chain[static_cast<size_t>(l)] * weight(params, l);
      const Activation a = hidden_activation(l - 1);
      chain[static_cast<size_t>(l - 1)] =
          dA.array() * fw.pre[static_cast<size_t>(l - 1)].unaryExpr([a](double v) {
            return detail::act_d1(a, v);
          }).array();
    }
    return chain;
  }

  /// Forward-mode pass in a parameter direction v: returns dZ = J v, one row
  /// per example.
  Matrix jvp_params(const ParamVector& params, const Forward& fw, const ParamVector& v) const {
    if (v.size() != param_count_) throw SpecError("jvp: direction size mismatch");
    const Index L = num_hidden();
    Matrix dA = Matrix::Zero(fw.act[0].rows(), fw.act[0].cols());
    for (Index l = 0; l < L; ++l) {
      Matrix dPre = dA * weight(params, l).transpose() +
                    fw.act[static_cast<size_t>(l)] * weight(v, l).transpose();
      dPre.rowwise() += bias(v, l).transpose();
      const Activation a = hidden_activation(l);
      dA = dPre.array() * fw.pre[static_cast<size_t>(l)].unaryExpr([a](double x) {
        return detail::act_d1(a, x);
      }).array();
    }
    Matrix dZ = dA * weight(params, L).transpose() +
                fw.act[static_cast<size_t>(L)] * weight(v, L).transpose();
    dZ.rowwise() += bias(v, L).transpose();
    return dZ;
  }

  /// Forward-mode pass in an input direction dX (n x d): returns dZ.
  Matrix jvp_inputs(const ParamVector& params, const Forward& fw, const Matrix& dX) const {
    if (dX.cols() != spec_.input_dim || dX.rows() != fw.act[0].rows())
      throw SpecError("jvp: input direction shape mismatch");
    const Index L = num_hidden();
    Matrix dA = dX;
    for (Index l = 0; l < L; ++l) {
      Matrix dPre = dA * weight(params, l).transpose();
      const Activation a = hidden_activation(l);
      dA = dPre.array() * fw.pre[static_cast<size_t>(l)].unaryExpr([a](double x) {
        return detail::act_d1(a, x);
      }).array();
    }
    return dA * weight(params, L).transpose();
  }

  /// Per-example input gradients of the scalars u_i . z_i, i.e. row i of the
  /// result is (J_x^T u_i)^T for that example's input Jacobian.
  Matrix input_grad(const ParamVector& params, const Forward& fw, const Matrix& U) const {
    const Index L = num_hidden();
    Matrix delta = U;
    for (Index l = L; l >= 1; --l) {
      Matrix dA = delta * weight(params, l);
      const Activation a = hidden_activation(l - 1);
      delta = dA.array() * fw.pre[static_cast<size_t>(l - 1)].unaryExpr([a](double v) {
        return detail::act_d1(a, v);
      }).array();
    }
    return delta * weight(params, 0);
  }

  /// Margin cotangent rows u_i = e_{y_i} - e_{j*_i}, with the runner-up j*
  /// chosen by smallest index among argmax_{j != y} z_j.
  static Matrix margin_cotangents(const LogitBatch& batch) {
    const Index n = batch.n(), K = batch.num_classes();
    Matrix U = Matrix::Zero(n, K);
    for (Index i = 0; i < n; ++i) {
      const Index y = batch.labels[i];
      Index best = -1;
      double bestv = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < K; ++j) {
        if (j == y) continue;
        if (batch.logits(i, j) > bestv) {
          bestv = batch.logits(i, j);
          best = j;
        }
      }
      U(i, y) = 1.0;
      U(i, best) -= 1.0;
    }
    return U;
  }

  /// d/dtheta of mean_i ||grad_x m(x_i, y_i)||^2, computed by an exact second
  /// reverse pass through the input-gradient computation (no finite
  /// differences). Also returns the per-example penalty values.
  ParamVector smoothness_grad(const ParamVector& params, const Forward& fw, const Matrix& U,
                              Vector* penalty_out = nullptr) const {
    const Index L = num_hidden();
    const Index n = fw.act[0].rows();
    const double inv_n = 1.0 / static_cast<double>(n);

    // Backward-for-g chain, keeping intermediates.
    // C[L] = U * W_L; V[l] = C[l] .* s'(P[l]); C[l-1] = V[l] * W_{l-1 idx}.
    std::vector<Matrix> C(static_cast<size_t>(L) + 1), V(static_cast<size_t>(L) + 1);
    std::vector<Matrix> d1(static_cast<size_t>(L)), d2(static_cast<size_t>(L));
    for (Index l = 0; l < L; ++l) {
      const Activation a = hidden_activation(l);
      d1[static_cast<size_t>(l)] =
          fw.pre[static_cast<size_t>(l)].unaryExpr([a](double v) { return detail::act_d1(a, v); });
      d2[static_cast<size_t>(l)] =
          fw.pre[static_cast<size_t>(l)].unaryExpr([a](double v) { return detail::act_d2(a, v); });
    }
    C[static_cast<size_t>(L)] = U * weight(params, L);
    for (Index l = L; l >= 1; --l) {
      V[static_cast<size_t>(l)] =
          C[static_cast<size_t>(l)].array() * d1[static_cast<size_t>(l - 1)].array();
      C[static_cast<size_t>(l - 1)] = V[static_cast<size_t>(l)] * weight(params, l - 1);
    }
    const Matrix& G = C[0];  // n x d input gradients
    if (penalty_out) *penalty_out = G.rowwise().squaredNorm();

    ParamVector grad = zero_params();
    // Adjoint sweep over the backward chain, bottom-up.
    Matrix Cbar = (2.0 * inv_n) * G;
    std::vector<Matrix> Pbar(static_cast<size_t>(L));
    for (Index l = 1; l <= L; ++l) {
      // op C[l-1] = V[l] * W_{l-1}
      weight(grad, l - 1).noalias() += V[static_cast<size_t>(l)].transpose() * Cbar;
      Matrix Vbar = Cbar * weight(params, l - 1).transpose();
      // op V[l] = C[l] .* d1[l-1]
      Pbar[static_cast<size_t>(l - 1)] =
          Vbar.array() * C[static_cast<size_t>(l)].array() * d2[static_cast<size_t>(l - 1)].array();
      Cbar = Vbar.array() * d1[static_cast<size_t>(l - 1)].array();
    }
    // op C[L] = U * W_L (U constant a.e.)
    weight(grad, L).noalias() += U.transpose() * Cbar;

    // Adjoints flowing through the cached forward chain.
    Matrix Abar;  // adjoint of act[l]; empty means zero
    for (Index l = L - 1; l >= 0; --l) {
      Matrix Pb = Pbar[static_cast<size_t>(l)];
      if (Abar.size() > 0) Pb.array() += Abar.array() * d1[static_cast<size_t>(l)].array();
      weight(grad, l).noalias() += Pb.transpose() * fw.act[static_cast<size_t>(l)];
      bias(grad, l) += Pb.colwise().sum().transpose();
      Abar = Pb * weight(params, l);
    }
    if (!grad.finite()) throw NumericalError("smoothness_grad: non-finite gradient");
    return grad;
  }

 private:
  NetworkSpec spec_;
  std::vector<BlockShape> layout_;
  Index param_count_ = 0;
};

enum class ScalarHead { MarginOfLabel, Logit, LossOfLabel };

/// Gradient of a scalar head with respect to a single input x.
inline Vector grad_input(const Network& net, const ParamVector& params, const Vector& x,
                         ScalarHead head, Index index) {
  if (x.size() != net.spec().input_dim) throw SpecError("grad_input: dimension mismatch");
  Matrix X = x.transpose();
  Forward fw = net.forward_cache(params, X);
  const Index K = net.spec().num_classes;
  Matrix U(1, K);
  switch (head) {
    case ScalarHead::Logit:
      if (index < 0 || index >= K) throw SpecError("grad_input: class index out of range");
      U = Matrix::Zero(1, K);
      U(0, index) = 1.0;
      break;
    case ScalarHead::MarginOfLabel: {
      IntVector y(1);
      y[0] = static_cast<int>(index);
      check_labels(y, K);
      U = Network::margin_cotangents(LogitBatch{fw.logits, y});
      break;
    }
    case ScalarHead::LossOfLabel: {
      IntVector y(1);
      y[0] = static_cast<int>(index);
      check_labels(y, K);
      ProbBatch p = softmax(LogitBatch{fw.logits, y});
      U = p.probs;
      U(0, index) -= 1.0;  // d(-log softmax_y)/dz = p - onehot
      break;
    }
  }
  return net.input_grad(params, fw, U).row(0).transpose();
}

}  // namespace calcurve
