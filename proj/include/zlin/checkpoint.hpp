#pragma once

// Network checkpoints (.zlin), little-endian:
//   "ZLIN" | u16 version | u8 scalar bytes (4 or 8) | u32 layer count
//   per layer: u8 kind | f64 threshold or drop rate | u32 rows | u32 cols
//              | weights (row-major) | bias (rows)
//              | u8 standardized | [mean (rows) | inv_std (rows)]

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "zlin/binary_io.hpp"
#include "zlin/layers.hpp"

namespace zlin {

inline constexpr std::uint16_t checkpoint_version = 1;

namespace detail {

template <Scalar File, Scalar T>
void read_values(binary::Reader& r, T* dst, std::size_t n) {
  if constexpr (std::is_same_v<File, T>) {
    r.read_array(dst, n);
  } else {
    std::vector<File> tmp(n);
    r.read_array(tmp.data(), n);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(tmp[i]);
  }
}

template <Scalar File, Scalar T>
Network<T> read_layers(binary::Reader& r, std::uint32_t count) {
  Network<T> net;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = r.read<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(Activation::sigmoid))
      throw FormatError("checkpoint: layer " + std::to_string(i) + " has unknown kind " + std::to_string(kind));
    Layer<T> layer;
    layer.kind = LayerKind{static_cast<Activation>(kind), r.read<double>()};
    const std::size_t rows = r.read<std::uint32_t>(), cols = r.read<std::uint32_t>();
    if (layer.kind.type == Activation::dropout && (rows != 0 || cols != 0))
      throw FormatError("checkpoint: dropout layer " + std::to_string(i) + " carries weights");
    layer.weights = Matrix<T>(rows, cols);
    layer.bias.resize(rows);
    read_values<File>(r, layer.weights.data(), layer.weights.size());
    read_values<File>(r, layer.bias.data(), rows);
    if (r.read<std::uint8_t>() != 0) {
      Standardization<T> s;
      s.mean.resize(rows);
      s.inv_std.resize(rows);
      read_values<File>(r, s.mean.data(), rows);
      read_values<File>(r, s.inv_std.data(), rows);
      layer.standardize = std::move(s);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace detail

template <Scalar T>
void save_checkpoint(std::ostream& out, const Network<T>& net) {
  out.write("ZLIN", 4);
  binary::write<std::uint16_t>(out, checkpoint_version);
  binary::write<std::uint8_t>(out, sizeof(T));
  binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    binary::write<std::uint8_t>(out, static_cast<std::uint8_t>(l.kind.type));
    binary::write<double>(out, l.kind.param);
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.rows()));
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.cols()));
    binary::write_array(out, l.weights.data(), l.weights.size());
    binary::write_array(out, l.bias.data(), l.bias.size());
    binary::write<std::uint8_t>(out, l.standardize ? 1 : 0);
    if (l.standardize) {
      binary::write_array(out, l.standardize->mean.data(), l.standardize->mean.size());
      binary::write_array(out, l.standardize->inv_std.data(), l.standardize->inv_std.size());
    }
  }
}

/// Reads a checkpoint written at either precision. Values are converted when
/// the file precision differs from T; otherwise the round trip is bit-exact.
template <Scalar T>
Network<T> load_checkpoint(std::istream& in, const std::string& what = "checkpoint") {
  binary::Reader r(in, what);
  char magic[4];
  r.read_bytes(magic, 4);
  if (std::string(magic, 4) != "ZLIN") throw FormatError(what + ": not a zlin checkpoint (bad magic)");
  const auto version = r.read<std::uint16_t>();
  if (version != checkpoint_version)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(checkpoint_version) + ")");
  const auto bytes = r.read<std::uint8_t>();
  const auto count = r.read<std::uint32_t>();
  Network<T> net;
  if (bytes == 4) {
    net = detail::read_layers<float, T>(r, count);
  } else if (bytes == 8) {
    net = detail::read_layers<double, T>(r, count);
  } else {
    throw FormatError(what + ": unsupported scalar width " + std::to_string(bytes));
  }
  if (!r.at_end()) throw FormatError(what + ": trailing bytes after offset " + std::to_string(r.offset()));
  return net;
}

template <Scalar T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  save_checkpoint(out, net);
  if (!out) throw std::runtime_error("error writing checkpoint " + path.string());
}

template <Scalar T>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return load_checkpoint<T>(in, path.string());
}

}  // namespace zlin
