#pragma once

// Binary formats. Network checkpoints are magic "CALC1", a u32 length-prefixed
// JSON spec header, then the flat parameter array as little-endian float64.
// Optimizer state ("CALO1") and generated datasets ("CALD1") follow the same
// header-then-doubles pattern. Round-trips are bit-exact.

#include "calcurve/data.hpp"
#include "calcurve/net.hpp"
#include "calcurve/optim.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <fstream>

namespace calcurve {

using nlohmann::json;

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("checkpoint: truncated u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError("checkpoint: truncated u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

inline void write_magic(std::ostream& out, const char* magic) { out.write(magic, 5); }

inline void expect_magic(std::istream& in, const char* magic, const std::string& path) {
  char buf[5];
  in.read(buf, 5);
  if (!in || std::string(buf, 5) != magic)
    throw FormatError("bad magic in " + path + " (expected " + magic + ")");
}

inline void write_vector(std::ostream& out, const Vector& v) {
  write_u64(out, static_cast<std::uint64_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) write_f64(out, v[i]);
}

inline Vector read_vector(std::istream& in) {
  const auto n = static_cast<Index>(read_u64(in));
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = read_f64(in);
  return v;
}

}  // namespace detail

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }
inline std::string to_string(InitScheme s) {
  return s == InitScheme::UniformFanIn ? "uniform-fan-in" : "gaussian-scaled";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw SpecError("unknown activation: " + s);
}

inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "uniform-fan-in") return InitScheme::UniformFanIn;
  if (s == "gaussian-scaled") return InitScheme::GaussianScaled;
  throw SpecError("unknown init scheme: " + s);
}

inline json spec_to_json(const NetworkSpec& spec) {
  json hidden = json::array();
  for (const auto& h : spec.hidden)
    hidden.push_back({{"width", h.width}, {"activation", to_string(h.activation)}});
  return json{{"input_dim", spec.input_dim},
              {"hidden", hidden},
              {"num_classes", spec.num_classes},
              {"init_seed", spec.init_seed},
              {"init_scheme", to_string(spec.init_scheme)}};
}

inline NetworkSpec spec_from_json(const json& j) {
  NetworkSpec spec;
  spec.input_dim = j.at("input_dim").get<Index>();
  for (const auto& h : j.at("hidden"))
    spec.hidden.push_back(
        {h.at("width").get<Index>(), activation_from_string(h.at("activation").get<std::string>())});
  spec.num_classes = j.at("num_classes").get<Index>();
  spec.init_seed = j.value("init_seed", std::uint64_t{0});
  spec.init_scheme = init_scheme_from_string(j.value("init_scheme", "uniform-fan-in"));
  return spec;
}

inline void save_network(const std::string& path, const NetworkSpec& spec,
                         const ParamVector& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  detail::write_magic(out, "CALC1");
  const std::string header = spec_to_json(spec).dump();
  detail::write_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_u64(out, static_cast<std::uint64_t>(params.size()));
  for (Index i = 0; i < params.size(); ++i) detail::write_f64(out, params.values[i]);
  if (!out) throw FormatError("write failed for " + path);
}

inline std::pair<NetworkSpec, ParamVector> load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  detail::expect_magic(in, "CALC1", path);
  const std::uint32_t len = detail::read_u32(in);
  std::string header(len, '\0');
  in.read(header.data(), len);
  if (!in) throw FormatError("checkpoint: truncated header in " + path);
  NetworkSpec spec = spec_from_json(json::parse(header));
  Network net(spec);
  const auto count = static_cast<Index>(detail::read_u64(in));
  if (count != net.param_count())
    throw FormatError("checkpoint: parameter count mismatch in " + path);
  ParamVector params = net.zero_params();
  for (Index i = 0; i < count; ++i) params.values[i] = detail::read_f64(in);
  if (!in) throw FormatError("checkpoint: truncated parameters in " + path);
  return {std::move(spec), std::move(params)};
}

inline void save_optimizer_state(const std::string& path, const OptimizerState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  detail::write_magic(out, "CALO1");
  const json header{{"step", state.step},
                    {"bulk_last_refresh", state.bulk_last_refresh},
                    {"bulk_cols", state.bulk_basis.cols()},
                    {"bulk_rows", state.bulk_basis.rows()}};
  const std::string hs = header.dump();
  detail::write_u32(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  detail::write_vector(out, state.m);
  detail::write_vector(out, state.v);
  detail::write_vector(out, state.momentum_buf);
  detail::write_vector(out, state.bulk_eigenvalues);
  detail::write_u64(out, static_cast<std::uint64_t>(state.bulk_basis.size()));
  for (Index c = 0; c < state.bulk_basis.cols(); ++c)
    for (Index r = 0; r < state.bulk_basis.rows(); ++r)
      detail::write_f64(out, state.bulk_basis(r, c));
  if (!out) throw FormatError("write failed for " + path);
}

inline OptimizerState load_optimizer_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  detail::expect_magic(in, "CALO1", path);
  const std::uint32_t len = detail::read_u32(in);
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  if (!in) throw FormatError("optimizer state: truncated header in " + path);
  const json header = json::parse(hs);
  OptimizerState state;
  state.step = header.at("step").get<long>();
  state.bulk_last_refresh = header.at("bulk_last_refresh").get<long>();
  const auto rows = header.at("bulk_rows").get<Index>();
  const auto cols = header.at("bulk_cols").get<Index>();
  state.m = detail::read_vector(in);
  state.v = detail::read_vector(in);
  state.momentum_buf = detail::read_vector(in);
  state.bulk_eigenvalues = detail::read_vector(in);
  const auto basis_size = static_cast<Index>(detail::read_u64(in));
  if (basis_size != rows * cols) throw FormatError("optimizer state: basis size mismatch");
  state.bulk_basis.resize(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) state.bulk_basis(r, c) = detail::read_f64(in);
  if (!in) throw FormatError("optimizer state: truncated buffers in " + path);
  return state;
}

/// Generated-dataset container used by the gen-data subcommand.
inline void save_dataset(const std::string& path, const LabeledDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  detail::write_magic(out, "CALD1");
  const json header{{"n", ds.n()},           {"dim", ds.dim()},
                    {"num_classes", ds.num_classes}, {"bounded", ds.bounded},
                    {"name", ds.name},       {"source_seed", ds.source_seed}};
  const std::string hs = header.dump();
  detail::write_u32(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (Index i = 0; i < ds.n(); ++i) {
    detail::write_u32(out, static_cast<std::uint32_t>(ds.labels[i]));
    for (Index j = 0; j < ds.dim(); ++j) detail::write_f64(out, ds.features(i, j));
  }
  if (!out) throw FormatError("write failed for " + path);
}

inline LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  detail::expect_magic(in, "CALD1", path);
  const std::uint32_t len = detail::read_u32(in);
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  if (!in) throw FormatError("dataset: truncated header in " + path);
  const json header = json::parse(hs);
  LabeledDataset ds;
  const auto n = header.at("n").get<Index>();
  const auto dim = header.at("dim").get<Index>();
  ds.num_classes = header.at("num_classes").get<Index>();
  ds.bounded = header.at("bounded").get<bool>();
  ds.name = header.at("name").get<std::string>();
  ds.source_seed = header.at("source_seed").get<std::uint64_t>();
  ds.features.resize(n, dim);
  ds.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<int>(detail::read_u32(in));
    for (Index j = 0; j < dim; ++j) ds.features(i, j) = detail::read_f64(in);
  }
  if (!in) throw FormatError("dataset: truncated rows in " + path);
  check_labels(ds.labels, ds.num_classes);
  return ds;
}

}  // namespace calcurve
