#pragma once

// Binned calibration metrics (ECE, MCE, reliability tables), a kernel
// calibration error on (confidence, correctness) pairs, and the mean
// misconfidence that binned ECE collapses to at perfect accuracy.

#include "calcurve/net.hpp"

#include <algorithm>
#include <numeric>

namespace calcurve {

struct BinningScheme {
  std::vector<double> edges;  // 0 = a_0 < ... < a_M = 1

  static BinningScheme equal_width(int M) {
    if (M < 1) throw SpecError("binning: M must be >= 1");
    BinningScheme s;
    s.edges.resize(static_cast<size_t>(M) + 1);
    for (int m = 0; m <= M; ++m) s.edges[static_cast<size_t>(m)] = static_cast<double>(m) / M;
    s.edges.front() = 0.0;
    s.edges.back() = 1.0;
    return s;
  }

  Index num_bins() const { return static_cast<Index>(edges.size()) - 1; }

  void validate() const {
    if (edges.size() < 2 || edges.front() != 0.0 || edges.back() != 1.0)
      throw SpecError("binning: edges must run from 0 to 1");
    for (size_t i = 1; i < edges.size(); ++i)
      if (edges[i] <= edges[i - 1]) throw SpecError("binning: edges must be strictly increasing");
  }

  // Bins are half-open (a_{m-1}, a_m]; confidence exactly 0 lands in bin 0.
  Index bin_of(double conf) const {
    auto it = std::lower_bound(edges.begin() + 1, edges.end(), conf);
    Index b = static_cast<Index>(it - edges.begin()) - 1;
    return std::clamp<Index>(b, 0, num_bins() - 1);
  }
};

/// Predicted label (smallest arg-max index) and confidence per example.
inline std::pair<IntVector, Vector> predictions(const ProbBatch& batch) {
  const Index n = batch.n(), K = batch.num_classes();
  IntVector labels_hat(n);
  Vector conf(n);
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    double bestv = batch.probs(i, 0);
    for (Index k = 1; k < K; ++k)
      if (batch.probs(i, k) > bestv) {
        bestv = batch.probs(i, k);
        best = k;
      }
    labels_hat[i] = static_cast<int>(best);
    conf[i] = bestv;
  }
  return {std::move(labels_hat), std::move(conf)};
}

struct BinRow {
  double low = 0, high = 0;
  Index count = 0;
  double acc = 0, conf = 0;  // (0, 0) for empty bins
};

struct ReliabilityTable {
  std::vector<BinRow> rows;
  Index n = 0;
};

inline ReliabilityTable reliability(const ProbBatch& batch, const BinningScheme& scheme) {
  scheme.validate();
  if (batch.n() == 0) throw SpecError("reliability: empty batch");
  auto [labels_hat, conf] = predictions(batch);
  ReliabilityTable table;
  table.n = batch.n();
  table.rows.resize(static_cast<size_t>(scheme.num_bins()));
  std::vector<double> acc_sum(table.rows.size(), 0.0), conf_sum(table.rows.size(), 0.0);
  for (size_t m = 0; m < table.rows.size(); ++m) {
    table.rows[m].low = scheme.edges[m];
    table.rows[m].high = scheme.edges[m + 1];
  }
  for (Index i = 0; i < batch.n(); ++i) {
    const size_t m = static_cast<size_t>(scheme.bin_of(conf[i]));
    table.rows[m].count += 1;
    acc_sum[m] += (labels_hat[i] == batch.labels[i]) ? 1.0 : 0.0;
    conf_sum[m] += conf[i];
  }
  for (size_t m = 0; m < table.rows.size(); ++m) {
    if (table.rows[m].count > 0) {
      table.rows[m].acc = acc_sum[m] / static_cast<double>(table.rows[m].count);
      table.rows[m].conf = conf_sum[m] / static_cast<double>(table.rows[m].count);
    }
  }
  return table;
}

inline double ece(const ReliabilityTable& table) {
  double value = 0;
  for (const BinRow& row : table.rows)
    value += static_cast<double>(row.count) / static_cast<double>(table.n) *
             std::abs(row.acc - row.conf);
  return value;
}

inline double ece(const ProbBatch& batch, const BinningScheme& scheme) {
  return ece(reliability(batch, scheme));
}

inline double mce(const ProbBatch& batch, const BinningScheme& scheme) {
  ReliabilityTable table = reliability(batch, scheme);
  double value = 0;
  for (const BinRow& row : table.rows)
    if (row.count > 0) value = std::max(value, std::abs(row.acc - row.conf));
  return value;
}

/// Quadratic-form kernel calibration error on (confidence, correctness)
/// residuals with a Gaussian kernel on confidences:
///   (1/(n(n-1))) sum_{i != j} k(c_i, c_j) (s_i - c_i)(s_j - c_j).
/// bandwidth <= 0 selects the median pairwise confidence distance.
inline double kce(const ProbBatch& batch, double bandwidth = 0.0) {
  const Index n = batch.n();
  if (n < 2) throw SpecError("kce: needs at least 2 samples");
  auto [labels_hat, conf] = predictions(batch);
  Vector r(n);
  for (Index i = 0; i < n; ++i)
    r[i] = ((labels_hat[i] == batch.labels[i]) ? 1.0 : 0.0) - conf[i];

  double h = bandwidth;
  if (h <= 0.0) {
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(n) * (static_cast<size_t>(n) - 1) / 2);
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j) dists.push_back(std::abs(conf[i] - conf[j]));
    auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    h = *mid;
    if (h <= 0.0) h = std::accumulate(dists.begin(), dists.end(), 0.0) /
                      static_cast<double>(dists.size());
    if (h <= 0.0) h = 1.0;  // constant confidences: kernel degenerates to 1
  }

  const double inv2h2 = 1.0 / (2.0 * h * h);
  double sum = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = conf[i] - conf[j];
      sum += std::exp(-d * d * inv2h2) * r[i] * r[j];
    }
  return sum / (static_cast<double>(n) * static_cast<double>(n - 1));
}

/// (1/n) sum_i (1 - p_i[y_i]). Equals binned ECE whenever accuracy is 1.
inline double mean_misconfidence(const ProbBatch& batch) {
  if (batch.n() == 0) throw SpecError("mean_misconfidence: empty batch");
  double sum = 0;
  for (Index i = 0; i < batch.n(); ++i) sum += 1.0 - batch.probs(i, batch.labels[i]);
  return sum / static_cast<double>(batch.n());
}

}  // namespace calcurve
