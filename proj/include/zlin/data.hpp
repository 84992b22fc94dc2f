#pragma once

// Datasets: CIFAR-10 binary and HIGGS CSV loaders, synthetic generators,
// contrast normalization + PCA whitening, and pixel-space augmentation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "zlin/binary_io.hpp"
#include "zlin/numcore.hpp"

namespace zlin {

template <Scalar T>
struct Dataset {
  Matrix<T> features;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dims() const { return features.cols(); }

  void validate() const {
    if (features.rows() != labels.size()) {
      throw ShapeError("dataset: " + std::to_string(features.rows()) + " feature rows but " +
                       std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
        throw ShapeError("dataset: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                         " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out{gather_rows(features, rows), {}, classes};
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(labels[r]);
    return out;
  }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    return subset(rows);
  }
};

template <Scalar To, Scalar From>
Dataset<To> cast_dataset(const Dataset<From>& d) {
  return {cast<To>(d.features), d.labels, d.classes};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

inline constexpr std::size_t cifar_side = 32;
inline constexpr std::size_t cifar_pixels = 3 * cifar_side * cifar_side;
inline constexpr std::size_t cifar_record = 1 + cifar_pixels;

inline Dataset<float> load_cifar10(std::span<const std::filesystem::path> paths) {
  std::vector<unsigned char> bytes;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot open CIFAR-10 file " + p.string());
    std::vector<unsigned char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() % cifar_record != 0) {
      throw FormatError(p.string() + ": truncated record at byte offset " +
                        std::to_string(file.size() / cifar_record * cifar_record) + " (file is " +
                        std::to_string(file.size()) + " bytes, records are " + std::to_string(cifar_record) + ")");
    }
    for (std::size_t off = 0; off < file.size(); off += cifar_record) {
      if (file[off] > 9) {
        throw FormatError(p.string() + ": label " + std::to_string(file[off]) + " > 9 at byte offset " +
                          std::to_string(off));
      }
    }
    bytes.insert(bytes.end(), file.begin(), file.end());
  }
  const std::size_t n = bytes.size() / cifar_record;
  Dataset<float> d{Matrix<float>(n, cifar_pixels), std::vector<int>(n), 10};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * cifar_record;
    d.labels[i] = rec[0];
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < cifar_pixels; ++j) row[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return d;
}

inline Dataset<float> load_cifar10(const std::filesystem::path& path) {
  return load_cifar10(std::span<const std::filesystem::path>(&path, 1));
}

/// Writes features (in [0,1], quantized to 1/255) in the CIFAR-10 binary layout.
template <Scalar T>
void write_cifar10(const std::filesystem::path& path, const Dataset<T>& d) {
  if (d.dims() != cifar_pixels) throw ShapeError("write_cifar10: rows must have 3072 pixels");
  d.validate();
  if (d.classes > 10) throw ShapeError("write_cifar10: at most 10 classes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  std::vector<char> rec(cifar_record);
  for (std::size_t i = 0; i < d.size(); ++i) {
    rec[0] = static_cast<char>(d.labels[i]);
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < cifar_pixels; ++j) {
      const double v = std::clamp(static_cast<double>(row[j]), 0.0, 1.0);
      rec[1 + j] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// HIGGS CSV: label, then 28 features per line.

inline constexpr std::size_t higgs_features = 28;

inline Dataset<float> load_higgs(const std::filesystem::path& path, std::optional<std::size_t> limit = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open HIGGS file " + path.string());
  std::vector<float> values;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  double field[higgs_features + 1];
  while ((!limit || labels.size() < *limit) && std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    std::size_t count = 0;
    while (true) {
      while (p < end && *p == ' ') ++p;
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc{}) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad number in field " +
                         std::to_string(count + 1));
      }
      if (count == higgs_features + 1) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": more than " +
                         std::to_string(higgs_features + 1) + " fields");
      }
      field[count++] = v;
      p = next;
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      if (*p != ',') {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": unexpected character '" +
                         std::string(1, *p) + "'");
      }
      ++p;
    }
    if (count != higgs_features + 1) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(higgs_features + 1) + " fields, found " + std::to_string(count));
    }
    if (field[0] != 0.0 && field[0] != 1.0) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": label must be 0 or 1");
    }
    labels.push_back(static_cast<int>(field[0]));
    for (std::size_t j = 1; j <= higgs_features; ++j) values.push_back(static_cast<float>(field[j]));
  }
  const std::size_t n = labels.size();
  return {Matrix<float>(n, higgs_features, std::move(values)), std::move(labels), 2};
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Per row: subtract the row mean, divide by the row std (floored at 1e-8).
template <Scalar T>
void contrast_normalize(Matrix<T>& x) {
  const std::size_t d = x.cols();
  if (d == 0) return;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    double m = 0.0;
    for (T v : row) m += v;
    m /= static_cast<double>(d);
    double ss = 0.0;
    for (T v : row) ss += (v - m) * (v - m);
    const double sd = std::max(std::sqrt(ss / static_cast<double>(d)), 1e-8);
    for (auto& v : row) v = static_cast<T>((v - m) / sd);
  }
}

struct WhitenOptions {
  double variance_fraction = 0.99;
  bool contrast_normalize = true;
  double epsilon = 1e-5;
};

struct Whitener {
  bool contrast = true;
  double epsilon = 1e-5;
  double variance_fraction = 0.99;
  std::vector<double> mean;
  std::vector<double> eigenvalues;  // all of them, descending
  Matrix<double> basis;             // dims x retained
  std::vector<double> scale;        // 1/sqrt(lambda + epsilon), per retained component

  std::size_t input_dim() const { return mean.size(); }
  std::size_t retained() const { return basis.cols(); }

  /// Single application only: whitening an already-whitened matrix is a
  /// contract violation (and a shape error unless retained == dims).
  template <Scalar T>
  Matrix<T> apply(const Matrix<T>& x) const {
    if (x.cols() != input_dim()) {
      throw ShapeError("whitener fitted on " + std::to_string(input_dim()) + " dims applied to " + x.shape());
    }
    Matrix<double> c = cast<double>(x);
    if (contrast) contrast_normalize(c);
    for (std::size_t i = 0; i < c.rows(); ++i) {
      auto row = c.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] -= mean[j];
    }
    Matrix<double> projector = basis;
    for (std::size_t r = 0; r < projector.rows(); ++r) {
      auto row = projector.row(r);
      for (std::size_t k = 0; k < row.size(); ++k) row[k] *= scale[k];
    }
    return cast<T>(matmul(c, projector));
  }

  void save(std::ostream& out) const {
    out.write("ZWHT", 4);
    binary::write<std::uint16_t>(out, 1);
    binary::write<std::uint8_t>(out, contrast ? 1 : 0);
    binary::write(out, epsilon);
    binary::write(out, variance_fraction);
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(input_dim()));
    binary::write<std::uint32_t>(out, static_cast<std::uint32_t>(retained()));
    binary::write_array(out, mean.data(), mean.size());
    binary::write_array(out, eigenvalues.data(), eigenvalues.size());
    binary::write_array(out, basis.data(), basis.size());
    binary::write_array(out, scale.data(), scale.size());
  }

  static Whitener load(std::istream& in) {
    binary::Reader r(in, "whitener");
    char magic[4];
    r.read_bytes(magic, 4);
    if (std::string(magic, 4) != "ZWHT") throw FormatError("whitener: bad magic");
    if (auto v = r.read<std::uint16_t>(); v != 1) throw FormatError("whitener: unsupported version " + std::to_string(v));
    Whitener w;
    w.contrast = r.read<std::uint8_t>() != 0;
    w.epsilon = r.read<double>();
    w.variance_fraction = r.read<double>();
    const auto d = r.read<std::uint32_t>();
    const auto k = r.read<std::uint32_t>();
    w.mean.resize(d);
    w.eigenvalues.resize(d);
    w.basis = Matrix<double>(d, k);
    w.scale.resize(k);
    r.read_array(w.mean.data(), d);
    r.read_array(w.eigenvalues.data(), d);
    r.read_array(w.basis.data(), w.basis.size());
    r.read_array(w.scale.data(), k);
    return w;
  }
};

/// Smallest k whose leading eigenvalue mass reaches `fraction` of the total
/// (negative round-off eigenvalues count as zero).
inline std::size_t retained_components(std::span<const double> eigenvalues_desc, double fraction) {
  double total = 0.0;
  for (double v : eigenvalues_desc) total += std::max(v, 0.0);
  if (total <= 0.0) return 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < eigenvalues_desc.size(); ++k) {
    acc += std::max(eigenvalues_desc[k], 0.0);
    if (acc >= fraction * total) return k + 1;
  }
  return eigenvalues_desc.size();
}

/// Fits contrast normalization (optional), centering and PCA whitening on
/// the training rows only.
template <Scalar T>
Whitener fit_whitener(const Matrix<T>& train, const WhitenOptions& opt = {}) {
  if (train.rows() < 2) throw std::invalid_argument("fit_whitener: need at least 2 examples");
  if (!(opt.variance_fraction > 0.0 && opt.variance_fraction <= 1.0)) {
    throw std::invalid_argument("fit_whitener: variance fraction must lie in (0,1]");
  }
  Matrix<double> x = cast<double>(train);
  if (opt.contrast_normalize) contrast_normalize(x);
  Whitener w;
  w.contrast = opt.contrast_normalize;
  w.epsilon = opt.epsilon;
  w.variance_fraction = opt.variance_fraction;
  w.mean.assign(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) w.mean[j] += row[j];
  }
  for (auto& m : w.mean) m /= static_cast<double>(x.rows());
  auto eig = symmetric_eig(covariance(x, w.mean));
  const std::size_t k = retained_components(eig.values, opt.variance_fraction);
  if (k == 0) throw NumericError("fit_whitener: input has zero variance");
  w.eigenvalues = eig.values;
  w.basis = Matrix<double>(x.cols(), k);
  w.scale.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    w.scale[c] = 1.0 / std::sqrt(std::max(eig.values[c], 0.0) + opt.epsilon);
    for (std::size_t r = 0; r < x.cols(); ++r) w.basis(r, c) = eig.vectors(r, c);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Augmentation on raw 32x32x3 channel-major images

namespace image {

inline std::size_t index(std::size_t channel, std::size_t y, std::size_t x) {
  return channel * cifar_side * cifar_side + y * cifar_side + x;
}

template <Scalar T>
void flip_horizontal(std::span<T> img) {
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < cifar_side; ++y)
      for (std::size_t x = 0; x < cifar_side / 2; ++x) std::swap(img[index(c, y, x)], img[index(c, y, cifar_side - 1 - x)]);
}

/// Nearest-neighbour rotation about the image centre; uncovered pixels are 0.
template <Scalar T>
void rotate(std::span<T> img, double degrees) {
  std::vector<T> src(img.begin(), img.end());
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double centre = (cifar_side - 1) / 2.0;
  const auto side = static_cast<long>(cifar_side);
  for (std::size_t y = 0; y < cifar_side; ++y) {
    for (std::size_t x = 0; x < cifar_side; ++x) {
      const double dx = static_cast<double>(x) - centre, dy = static_cast<double>(y) - centre;
      // inverse map: rotate the output coordinate back by -a
      const long sx = std::lround(ca * dx + sa * dy + centre);
      const long sy = std::lround(-sa * dx + ca * dy + centre);
      const bool inside = sx >= 0 && sx < side && sy >= 0 && sy < side;
      for (std::size_t c = 0; c < 3; ++c) {
        img[index(c, y, x)] = inside ? src[index(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))] : T{0};
      }
    }
  }
}

/// out(y, x) = in(y - dy, x - dx), zero padded.
template <Scalar T>
void shift(std::span<T> img, int dx, int dy) {
  std::vector<T> src(img.begin(), img.end());
  const int side = static_cast<int>(cifar_side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const int sx = x - dx, sy = y - dy;
      const bool inside = sx >= 0 && sx < side && sy >= 0 && sy < side;
      for (std::size_t c = 0; c < 3; ++c) {
        img[index(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x))] =
            inside ? src[index(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))] : T{0};
      }
    }
  }
}

}  // namespace image

struct AugmentOps {
  bool flip = true;
  bool rotate = true;
  bool shift = true;
  double probability = 0.5;
  double max_degrees = 15.0;
  int max_shift = 4;
};

/// Each row independently receives each enabled op with `probability`.
/// Row i draws from rng.derive(ids[i]) (or derive(i) without ids), so the
/// result does not depend on batch composition or thread count.
template <Scalar T>
void augment(Matrix<T>& batch, const Rng& rng, const AugmentOps& ops, std::span<const std::size_t> ids = {},
             std::size_t workers = 1) {
  if (batch.cols() != cifar_pixels) {
    throw ShapeError("augment: rows must be 32x32x3 images (3072 values), got " + batch.shape());
  }
  if (!ids.empty() && ids.size() != batch.rows()) throw ShapeError("augment: id count differs from batch rows");
  parallel_for(batch.rows(), workers, [&](std::size_t i) {
    Rng r = rng.derive(ids.empty() ? i : ids[i]);
    auto img = batch.row(i);
    if (ops.flip && r.bernoulli(ops.probability)) image::flip_horizontal(img);
    if (ops.rotate && r.bernoulli(ops.probability)) image::rotate(img, r.uniform(-ops.max_degrees, ops.max_degrees));
    if (ops.shift && r.bernoulli(ops.probability)) {
      const int dx = static_cast<int>(r.uniform_int(-ops.max_shift, ops.max_shift));
      const int dy = static_cast<int>(r.uniform_int(-ops.max_shift, ops.max_shift));
      image::shift(img, dx, dy);
    }
  });
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthKind { gauss_mixture, subspace, cifar_like };

struct SynthOptions {
  SynthKind kind = SynthKind::gauss_mixture;
  std::size_t n = 0;
  std::size_t dims = 2;
  std::size_t classes = 2;
  double separation = 6.0;     // gauss_mixture: distance between class means, in units of sigma
  std::size_t subspace_dim = 0;  // subspace: 0 means dims / 4 (at least 1)
  std::uint64_t template_seed = 0x5eedc1fa;  // cifar_like: class appearance, shared across splits
};

namespace detail {

inline Matrix<double> orthonormal_rows(Rng& rng, std::size_t k, std::size_t d) {
  Matrix<double> u(k, d);
  for (std::size_t r = 0; r < k; ++r) {
    auto row = u.row(r);
    for (auto& v : row) v = rng.gaussian();
    for (std::size_t p = 0; p < r; ++p) {
      auto prev = u.row(p);
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += row[j] * prev[j];
      for (std::size_t j = 0; j < d; ++j) row[j] -= dot * prev[j];
    }
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : row) v /= norm;
  }
  return u;
}

struct ImageTemplate {
  double freq, angle, colour[3], blob_x, blob_y, blob_r, blob_colour[3];
};

inline std::vector<ImageTemplate> image_templates(std::uint64_t seed, std::size_t classes) {
  Rng rng(seed);
  std::vector<ImageTemplate> t(classes);
  for (auto& c : t) {
    c.freq = rng.uniform(1.0, 4.0);
    c.angle = rng.uniform(0.0, std::numbers::pi);
    for (double& v : c.colour) v = rng.uniform(-1.0, 1.0);
    c.blob_x = rng.uniform(8.0, 24.0);
    c.blob_y = rng.uniform(8.0, 24.0);
    c.blob_r = rng.uniform(3.0, 7.0);
    for (double& v : c.blob_colour) v = rng.uniform(-1.0, 1.0);
  }
  return t;
}

// Grating + blob in a class-specific colour over a random low-frequency
// background, with per-example jitter and a little pixel noise. Most of the
// variance sits in smooth components, as in natural images. Values are
// quantized to 1/255.
inline constexpr double background_amp = 0.08, pixel_noise = 0.012;
inline void render_image(const ImageTemplate& t, Rng& rng, std::span<double> img) {
  constexpr int waves = 6;
  struct Wave {
    double kx, ky, phase, amp[3];
  } bg[waves];
  for (auto& w : bg) {
    const double scale = 2 * std::numbers::pi / static_cast<double>(cifar_side);
    w.kx = scale * rng.uniform(-3.0, 3.0);
    w.ky = scale * rng.uniform(-3.0, 3.0);
    w.phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double a = rng.uniform(0.0, background_amp);
    for (double& v : w.amp) v = a * rng.uniform(0.6, 1.0);
  }
  const double grey = rng.uniform(0.25, 0.75);
  double tint[3];
  for (double& v : tint) v = rng.uniform(-0.12, 0.12);
  const double amp = rng.uniform(0.03, 0.12);
  const double angle = t.angle + 0.35 * rng.gaussian();
  const double freq = t.freq * rng.uniform(0.8, 1.25);
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double bx = t.blob_x + 3.0 * rng.gaussian(), by = t.blob_y + 3.0 * rng.gaussian();
  const double blob_amp = rng.uniform(0.0, 0.15);
  const double k = 2 * std::numbers::pi * freq / static_cast<double>(cifar_side);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < cifar_side; ++y) {
    for (std::size_t x = 0; x < cifar_side; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double wave = std::sin(k * (ca * fx + sa * fy) + phase);
      const double blob = std::exp(-((fx - bx) * (fx - bx) + (fy - by) * (fy - by)) / (2 * t.blob_r * t.blob_r));
      double base[3] = {0, 0, 0};
      for (const auto& w : bg) {
        const double s = std::sin(w.kx * fx + w.ky * fy + w.phase);
        for (std::size_t c = 0; c < 3; ++c) base[c] += w.amp[c] * s;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double v = grey + tint[c] + base[c] + amp * wave * t.colour[c] + blob_amp * blob * t.blob_colour[c] +
                   pixel_noise * rng.gaussian();
        v = std::clamp(v, 0.0, 1.0);
        img[image::index(c, y, x)] = std::round(v * 255.0) / 255.0;
      }
    }
  }
}

}  // namespace detail

/// Reproducible synthetic datasets. Labels cycle through the classes.
///  gauss_mixture: unit-variance Gaussians, class means pairwise `separation` apart.
///  subspace: rows in a random subspace_dim-dimensional subspace with
///            coordinates uniform in [2,4] (strongly positive projections).
///  cifar_like: 3072-dim images in the CIFAR layout, 10 classes by default.
inline Dataset<double> synth_dataset(const SynthOptions& opt, Rng& rng) {
  if (opt.dims == 0 || opt.classes == 0) throw std::invalid_argument("synth_dataset: dims and classes must be >= 1");
  Dataset<double> d;
  d.classes = opt.classes;
  d.labels.resize(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) d.labels[i] = static_cast<int>(i % opt.classes);
  switch (opt.kind) {
    case SynthKind::gauss_mixture: {
      // Means at (sep/sqrt2) e_c are pairwise `sep` apart; with more classes
      // than dims, random unit directions are used instead.
      Matrix<double> means(opt.classes, opt.dims);
      const double r = opt.separation / std::numbers::sqrt2;
      if (opt.classes <= opt.dims) {
        for (std::size_t c = 0; c < opt.classes; ++c) means(c, c) = r;
      } else {
        for (std::size_t c = 0; c < opt.classes; ++c) {
          auto row = means.row(c);
          double norm = 0.0;
          for (auto& v : row) {
            v = rng.gaussian();
            norm += v * v;
          }
          for (auto& v : row) v *= r / std::sqrt(norm);
        }
      }
      d.features = Matrix<double>(opt.n, opt.dims);
      for (std::size_t i = 0; i < opt.n; ++i) {
        auto row = d.features.row(i);
        auto m = means.row(static_cast<std::size_t>(d.labels[i]));
        for (std::size_t j = 0; j < opt.dims; ++j) row[j] = m[j] + rng.gaussian();
      }
      break;
    }
    case SynthKind::subspace: {
      const std::size_t k = opt.subspace_dim ? opt.subspace_dim : std::max<std::size_t>(1, opt.dims / 4);
      if (k > opt.dims) throw std::invalid_argument("synth_dataset: subspace larger than ambient dimension");
      auto basis = detail::orthonormal_rows(rng, k, opt.dims);
      d.features = Matrix<double>(opt.n, opt.dims);
      std::vector<double> coef(k);
      for (std::size_t i = 0; i < opt.n; ++i) {
        for (auto& c : coef) c = rng.uniform(2.0, 4.0);
        d.labels[i] = static_cast<int>((std::max_element(coef.begin(), coef.end()) - coef.begin()) % opt.classes);
        auto row = d.features.row(i);
        for (std::size_t p = 0; p < k; ++p) {
          auto b = basis.row(p);
          for (std::size_t j = 0; j < opt.dims; ++j) row[j] += coef[p] * b[j];
        }
      }
      break;
    }
    case SynthKind::cifar_like: {
      if (opt.dims != cifar_pixels) throw std::invalid_argument("synth_dataset: cifar_like requires dims = 3072");
      auto templates = detail::image_templates(opt.template_seed, opt.classes);
      d.features = Matrix<double>(opt.n, cifar_pixels);
      for (std::size_t i = 0; i < opt.n; ++i) {
        detail::render_image(templates[static_cast<std::size_t>(d.labels[i])], rng, d.features.row(i));
      }
      break;
    }
  }
  return d;
}

}  // namespace zlin
