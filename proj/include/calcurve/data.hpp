#pragma once

// Dataset ingestion and generation: the CIFAR-10 binary distribution format
// (3073-byte records, label byte then channel-planar pixels), synthetic
// Gaussian mixtures with controllable class overlap, and deterministic
// shuffled splits.

#include "calcurve/net.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace calcurve {

struct LabeledDataset {
  Matrix features;  // n x d
  IntVector labels;
  Index num_classes = 0;
  bool bounded = false;  // features confined to [0,1]
  std::string name;
  std::uint64_t source_seed = 0;

  Index n() const { return features.rows(); }
  Index dim() const { return features.cols(); }
};

struct SplitSpec {
  Index train_n = 0;
  Index val_n = 0;
  std::uint64_t subsample_seed = 0;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr Index kCifarPixels = 3072;
constexpr Index kCifarRecord = kCifarPixels + 1;

/// Parses one CIFAR-10 binary file: a sequence of 3073-byte records, one
/// label byte followed by 3072 pixel bytes (32x32, channel-planar R,G,B,
/// row-major). Pixels are scaled to [0,1] by /255; record order is kept.
inline LabeledDataset load_cifar10_file(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw FormatError("cifar10: missing file " + path);
  const std::uintmax_t size = fs::file_size(path);
  if (size == 0 || size % static_cast<std::uintmax_t>(kCifarRecord) != 0)
    throw FormatError("cifar10: file size " + std::to_string(size) +
                      " is not a multiple of 3073 in " + path);
  const Index n = static_cast<Index>(size / static_cast<std::uintmax_t>(kCifarRecord));

  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar10: cannot open " + path);
  LabeledDataset ds;
  ds.features.resize(n, kCifarPixels);
  ds.labels.resize(n);
  ds.num_classes = 10;
  ds.bounded = true;
  ds.name = "cifar10:" + fs::path(path).filename().string();
  std::vector<unsigned char> record(static_cast<size_t>(kCifarRecord));
  for (Index i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
    if (!in) throw FormatError("cifar10: short read in " + path);
    if (record[0] > 9)
      throw FormatError("cifar10: label byte " + std::to_string(record[0]) + " > 9 in " + path);
    ds.labels[i] = record[0];
    for (Index j = 0; j < kCifarPixels; ++j)
      ds.features(i, j) = static_cast<double>(record[static_cast<size_t>(j) + 1]) / 255.0;
  }
  return ds;
}

inline LabeledDataset concat(const std::vector<LabeledDataset>& parts, std::string name) {
  if (parts.empty()) throw SpecError("concat: no parts");
  Index total = 0;
  for (const auto& p : parts) total += p.n();
  LabeledDataset ds;
  ds.features.resize(total, parts[0].dim());
  ds.labels.resize(total);
  ds.num_classes = parts[0].num_classes;
  ds.bounded = parts[0].bounded;
  ds.name = std::move(name);
  Index at = 0;
  for (const auto& p : parts) {
    ds.features.middleRows(at, p.n()) = p.features;
    ds.labels.segment(at, p.n()) = p.labels;
    at += p.n();
  }
  return ds;
}

/// The five training batches, concatenated in order.
inline LabeledDataset load_cifar10(const std::string& dir) {
  std::vector<LabeledDataset> parts;
  for (int i = 1; i <= 5; ++i)
    parts.push_back(load_cifar10_file(dir + "/data_batch_" + std::to_string(i) + ".bin"));
  return concat(parts, "cifar10:train");
}

inline LabeledDataset load_cifar10_test(const std::string& dir) {
  LabeledDataset ds = load_cifar10_file(dir + "/test_batch.bin");
  ds.name = "cifar10:test";
  return ds;
}

/// Gaussian mixture with K classes centered at separation * u_k for fixed
/// orthonormalized directions u_k (orthogonal-ish when d < K) and unit
/// isotropic noise. Deterministic per seed; unbounded features.
inline LabeledDataset gen_gaussian_mixture(Index K, Index d, Index n_per_class,
                                           double class_separation, std::uint64_t seed) {
  if (K < 2 || d < 1 || n_per_class < 1) throw SpecError("gen_gaussian_mixture: invalid dims");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;

  Matrix dirs(d, K);
  for (Index k = 0; k < K; ++k)
    for (Index j = 0; j < d; ++j) dirs(j, k) = normal(rng);
  for (Index k = 0; k < K; ++k) {  // modified Gram-Schmidt
    for (Index p = 0; p < std::min(k, d); ++p)
      dirs.col(k) -= dirs.col(p).dot(dirs.col(k)) * dirs.col(p);
    const double nv = dirs.col(k).norm();
    if (nv < 1e-12) throw NumericalError("gen_gaussian_mixture: degenerate direction draw");
    dirs.col(k) /= nv;
  }

  LabeledDataset ds;
  const Index n = K * n_per_class;
  ds.features.resize(n, d);
  ds.labels.resize(n);
  ds.num_classes = K;
  ds.bounded = false;
  ds.name = "gaussian-mixture";
  ds.source_seed = seed;
  Index at = 0;
  for (Index k = 0; k < K; ++k) {
    for (Index i = 0; i < n_per_class; ++i, ++at) {
      for (Index j = 0; j < d; ++j)
        ds.features(at, j) = class_separation * dirs(j, k) + normal(rng);
      ds.labels[at] = static_cast<int>(k);
    }
  }
  return ds;
}

namespace detail {

// Hand-rolled Fisher-Yates so splits are identical on every platform.
inline std::vector<Index> permutation(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  for (Index i = n - 1; i > 0; --i) {
    const Index j = static_cast<Index>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

}  // namespace detail

inline LabeledDataset take(const LabeledDataset& ds, const std::vector<Index>& rows,
                           std::string name = "") {
  LabeledDataset out;
  out.features.resize(static_cast<Index>(rows.size()), ds.dim());
  out.labels.resize(static_cast<Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = ds.features.row(rows[i]);
    out.labels[static_cast<Index>(i)] = ds.labels[rows[i]];
  }
  out.num_classes = ds.num_classes;
  out.bounded = ds.bounded;
  out.name = name.empty() ? ds.name : std::move(name);
  out.source_seed = ds.source_seed;
  return out;
}

/// Deterministic shuffled split into disjoint train/validation sets.
inline std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds,
                                                       const SplitSpec& spec) {
  if (spec.train_n < 0 || spec.val_n < 0 || spec.train_n + spec.val_n > ds.n())
    throw SpecError("split: oversubscribed (train_n + val_n > n)");
  std::vector<Index> perm = detail::permutation(ds.n(), spec.subsample_seed);
  std::vector<Index> train_idx(perm.begin(), perm.begin() + spec.train_n);
  std::vector<Index> val_idx(perm.begin() + spec.train_n,
                             perm.begin() + spec.train_n + spec.val_n);
  return {take(ds, train_idx, ds.name + ":train"), take(ds, val_idx, ds.name + ":val")};
}

/// m distinct row indices drawn deterministically from [0, n).
inline std::vector<Index> sample_indices(Index n, Index m, std::uint64_t seed) {
  if (m > n) throw SpecError("sample_indices: m > n");
  std::vector<Index> perm = detail::permutation(n, seed);
  perm.resize(static_cast<size_t>(m));
  return perm;
}

}  // namespace calcurve
