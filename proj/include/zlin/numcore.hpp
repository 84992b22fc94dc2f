#pragma once

// Dense row-major matrices, a portable seeded RNG, symmetric eigensolvers and
// the handful of statistics the rest of the library needs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "zlin/errors.hpp"

#ifdef ZLIN_HAVE_LAPACKE
#include <lapacke.h>
#endif

namespace zlin {

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <Scalar T>
using Vector = std::vector<T>;

template <Scalar To, Scalar From>
Matrix<To> cast(const Matrix<From>& m) {
  if constexpr (std::is_same_v<To, From>) {
    return m;
  } else {
    std::vector<To> out(m.size());
    std::transform(m.values().begin(), m.values().end(), out.begin(),
                   [](From v) { return static_cast<To>(v); });
    return Matrix<To>(m.rows(), m.cols(), std::move(out));
  }
}

template <Scalar T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <Scalar T>
bool all_finite(const Matrix<T>& m) {
  return all_finite<T>(m.values());
}

// ---------------------------------------------------------------------------
// Threading helper

/// Runs fn(index) for index in [0, count) on up to `workers` threads.
/// Each index is handled by exactly one call; the assignment of indices to
/// threads does not affect what each call computes.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Arithmetic

namespace detail {

// Rows [row_begin, row_end) of a*b, i-k-j order with double accumulators.
template <Scalar T>
void matmul_rows(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, std::size_t row_begin,
                 std::size_t row_end) {
  const std::size_t n = b.cols();
  const std::size_t inner = a.cols();
  std::vector<double> acc(n);
  for (std::size_t i = row_begin; i < row_end; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const T* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    T* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
  }
}

}  // namespace detail

/// a·b. Output rows may be split across `workers` threads; each output entry
/// is always accumulated by one thread in the same order, so the result does
/// not depend on the worker count.
template <Scalar T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, std::size_t workers = 1) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape() + " by " + b.shape());
  }
  Matrix<T> out(a.rows(), b.cols());
  if (workers <= 1 || a.rows() < 2 * workers) {
    detail::matmul_rows(a, b, out, 0, a.rows());
  } else {
    const std::size_t chunk = (a.rows() + workers - 1) / workers;
    parallel_for(workers, workers, [&](std::size_t w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(a.rows(), begin + chunk);
      if (begin < end) detail::matmul_rows(a, b, out, begin, end);
    });
  }
  return out;
}

template <Scalar T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> t(m.cols(), m.rows());
  constexpr std::size_t block = 32;
  for (std::size_t i0 = 0; i0 < m.rows(); i0 += block) {
    for (std::size_t j0 = 0; j0 < m.cols(); j0 += block) {
      const std::size_t i1 = std::min(m.rows(), i0 + block);
      const std::size_t j1 = std::min(m.cols(), j0 + block);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t(j, i) = m(i, j);
    }
  }
  return t;
}

namespace detail {
template <Scalar T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}
}  // namespace detail

template <Scalar T>
Matrix<T> operator+(Matrix<T> a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

template <Scalar T>
Matrix<T> operator-(Matrix<T> a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "subtract");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

template <Scalar T>
Matrix<T> operator*(T s, Matrix<T> a) {
  for (auto& v : a.values()) v *= s;
  return a;
}

template <Scalar T>
Matrix<T> hadamard(Matrix<T> a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] *= bv[i];
  return a;
}

/// Adds `bias` to every row.
template <Scalar T>
void add_row_vector(Matrix<T>& m, std::span<const T> bias) {
  if (bias.size() != m.cols()) {
    throw ShapeError("add_row_vector: bias length " + std::to_string(bias.size()) +
                     " vs matrix " + m.shape());
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

template <Scalar T>
Vector<T> column_sums(const Matrix<T>& m) {
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
  }
  return Vector<T>(acc.begin(), acc.end());
}

template <Scalar T>
Vector<T> matvec(const Matrix<T>& m, std::span<const T> v) {
  if (v.size() != m.cols()) {
    throw ShapeError("matvec: " + m.shape() + " times vector of length " + std::to_string(v.size()));
  }
  Vector<T> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double acc = 0.0;
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc += static_cast<double>(r[j]) * v[j];
    out[i] = static_cast<T>(acc);
  }
  return out;
}

template <Scalar T>
double frobenius_norm(const Matrix<T>& m) {
  double s = 0.0;
  for (T v : m.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

template <Scalar T>
double max_abs(std::span<const T> v) {
  double best = 0.0;
  for (T x : v) best = std::max(best, static_cast<double>(std::abs(x)));
  return best;
}

template <Scalar T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double best = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    best = std::max(best, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
  }
  return best;
}

template <Scalar T>
double nonzero_fraction(const Matrix<T>& m) {
  if (m.empty()) return 0.0;
  const auto nz = std::count_if(m.values().begin(), m.values().end(), [](T v) { return v != T{0}; });
  return static_cast<double>(nz) / static_cast<double>(m.size());
}

/// Rows of `m` picked by `indices`, in that order.
template <Scalar T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> indices) {
  Matrix<T> out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = m.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random numbers: splitmix64 seeding a xoshiro256** generator.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
    has_spare_ = false;
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    // Lemire's nearly-divisionless rejection.
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * span;
    auto low = static_cast<std::uint64_t>(m);
    if (low < span) {
      const std::uint64_t threshold = -span % span;
      while (low < threshold) {
        m = static_cast<__uint128_t>(next_u64()) * span;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return lo + static_cast<std::int64_t>(m >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double gaussian(double mean, double stddev) noexcept { return mean + stddev * gaussian(); }

  /// Independent stream keyed by `index`; does not advance this generator.
  Rng derive(std::uint64_t index) const noexcept {
    std::uint64_t mix = state_[0] ^ rotl(state_[2], 23);
    mix ^= splitmix64_value(index + 0x632BE59BD9B4E019ULL);
    return Rng(splitmix64_value(mix));
  }

  template <typename It>
  void shuffle(It first, It last) noexcept {
    const auto n = static_cast<std::int64_t>(last - first);
    for (std::int64_t i = n - 1; i > 0; --i) {
      std::swap(first[i], first[uniform_int(0, i)]);
    }
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t splitmix64_value(std::uint64_t x) noexcept { return splitmix64(x); }

  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::vector<double> rng_gaussian(Rng& rng, std::size_t n, double mean, double stddev) {
  if (stddev < 0.0) throw std::invalid_argument("rng_gaussian: negative standard deviation");
  std::vector<double> out(n);
  for (auto& v : out) v = mean + stddev * rng.gaussian();
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double stddev(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Inverse standard normal CDF (Acklam's rational approximation refined by
/// one Halley step).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p must lie in (0,1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x = 0.0;
  if (p < p_low) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and a
/// normal CDF using the sample mean and (population) standard deviation.
inline double ks_gaussian(std::span<const double> samples) {
  if (samples.size() < 100) {
    throw std::invalid_argument("ks_gaussian: need at least 100 samples, got " +
                                std::to_string(samples.size()));
  }
  const double mu = mean(samples);
  const double sigma = stddev(samples);
  if (!(sigma > 0.0)) throw NumericError("ks_gaussian: samples have zero variance");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = normal_cdf((sorted[i] - mu) / sigma);
    d = std::max({d, std::abs(static_cast<double>(i + 1) / n - f), std::abs(f - static_cast<double>(i) / n)});
  }
  return std::min(d, 1.0);
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Matrix<double> vectors;      // column k pairs with values[k]
};

enum class EigenMethod {
  automatic,       // lapack when built with it, else tridiagonal_ql
  tridiagonal_ql,  // Householder reduction + implicit QL, O(n^3) once
  jacobi,          // cyclic Jacobi rotations
  lapack,          // LAPACK dsyevd (divide and conquer); needs ZLIN_HAVE_LAPACKE
};

inline constexpr bool lapack_available() {
#ifdef ZLIN_HAVE_LAPACKE
  return true;
#else
  return false;
#endif
}

namespace detail {

inline void require_symmetric(const Matrix<double>& a) {
  if (a.rows() != a.cols()) throw ShapeError("symmetric_eig: matrix is not square: " + a.shape());
  const double scale = std::max(1.0, max_abs<double>(a.values()));
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = i + 1; j < a.cols(); ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-8 * scale) {
        std::ostringstream msg;
        msg << "symmetric_eig: matrix is not symmetric at (" << i << "," << j << ")";
        throw NumericError(msg.str());
      }
    }
  }
}

inline EigenDecomposition sorted_descending(std::vector<double> values, const Matrix<double>& vecs) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return values[x] > values[y]; });
  EigenDecomposition out{std::vector<double>(n), Matrix<double>(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = values[order[k]];
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = vecs(i, order[k]);
  }
  return out;
}

// Householder tridiagonalization followed by implicit QL (the EISPACK
// tred2/tql2 pair). Works on a column-major copy so the inner loops that run
// down a column are contiguous.
inline EigenDecomposition tridiagonal_ql(const Matrix<double>& a) {
  const std::size_t n = a.rows();
  std::vector<double> vstore(a.values().begin(), a.values().end());  // symmetric: row == column major
  auto V = [&](std::size_t r, std::size_t c) -> double& { return vstore[c * n + r]; };
  std::vector<double> d(n), e(n);
  if (n == 0) return {{}, Matrix<double>()};

  for (std::size_t j = 0; j < n; ++j) d[j] = V(n - 1, j);
  for (std::size_t i = n - 1; i > 0; --i) {
    double scale = 0.0;
    double h = 0.0;
    for (std::size_t k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (std::size_t j = 0; j < i; ++j) {
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
        V(j, i) = 0.0;
      }
    } else {
      for (std::size_t k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (std::size_t j = 0; j < i; ++j) e[j] = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        V(j, i) = f;
        g = e[j] + V(j, j) * f;
        const double* col = &V(0, j);
        for (std::size_t k = j + 1; k < i; ++k) {
          g += col[k] * d[k];
          e[k] += col[k] * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (std::size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        double* col = &V(0, j);
        for (std::size_t k = j; k < i; ++k) col[k] -= (f * e[k] + g * d[k]);
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
      }
    }
    d[i] = h;
  }

  for (std::size_t i = 0; i + 1 < n; ++i) {
    V(n - 1, i) = V(i, i);
    V(i, i) = 1.0;
    const double h = d[i + 1];
    double* next = &V(0, i + 1);
    if (h != 0.0) {
      for (std::size_t k = 0; k <= i; ++k) d[k] = next[k] / h;
      for (std::size_t j = 0; j <= i; ++j) {
        double* col = &V(0, j);
        double g = 0.0;
        for (std::size_t k = 0; k <= i; ++k) g += next[k] * col[k];
        for (std::size_t k = 0; k <= i; ++k) col[k] -= g * d[k];
      }
    }
    for (std::size_t k = 0; k <= i; ++k) next[k] = 0.0;
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = V(n - 1, j);
    V(n - 1, j) = 0.0;
  }
  V(n - 1, n - 1) = 1.0;
  e[0] = 0.0;

  // Implicit QL on the tridiagonal (d, e).
  for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;
  double f = 0.0;
  double tst1 = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  constexpr int max_iterations = 60;
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n) {
      if (std::abs(e[m]) <= eps * tst1) break;
      ++m;
    }
    if (m == n) m = n - 1;
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > max_iterations) {
          throw NumericError("symmetric_eig: QL iteration did not converge for eigenvalue " +
                             std::to_string(l));
        }
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;
        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (std::size_t ii = m; ii-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[ii];
          h = c * p;
          r = std::hypot(p, e[ii]);
          e[ii + 1] = s * r;
          s = e[ii] / r;
          c = p / r;
          p = c * d[ii] - s * g;
          d[ii + 1] = h + s * (c * g + s * d[ii]);
          double* ci = &V(0, ii);
          double* cj = &V(0, ii + 1);
          for (std::size_t k = 0; k < n; ++k) {
            const double t = cj[k];
            cj[k] = s * ci[k] + c * t;
            ci[k] = c * ci[k] - s * t;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }

  Matrix<double> vecs(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) vecs(r, c) = V(r, c);
  return sorted_descending(std::move(d), vecs);
}

// Cyclic Jacobi rotations; converged when the off-diagonal Frobenius norm
// drops below 1e-10 (relative to ||A||_F when that exceeds 1).
inline EigenDecomposition jacobi(const Matrix<double>& input) {
  const std::size_t n = input.rows();
  Matrix<double> a = input;
  Matrix<double> v = Matrix<double>::identity(n);
  const double tol = 1e-10 * std::max(1.0, frobenius_norm(a));
  constexpr int max_sweeps = 100;
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  int sweep = 0;
  while (off_norm() >= tol) {
    if (++sweep > max_sweeps) throw NumericError("symmetric_eig: Jacobi did not converge in 100 sweeps");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  return sorted_descending(std::move(values), v);
}

#ifdef ZLIN_HAVE_LAPACKE
inline EigenDecomposition lapack_syevd(const Matrix<double>& a) {
  const std::size_t n = a.rows();
  if (n == 0) return {{}, Matrix<double>()};
  Matrix<double> v = a;
  std::vector<double> w(n);
  const auto ni = static_cast<lapack_int>(n);
  const lapack_int info = LAPACKE_dsyevd(LAPACK_ROW_MAJOR, 'V', 'U', ni, v.data(), ni, w.data());
  if (info != 0) throw NumericError("symmetric_eig: dsyevd failed with info " + std::to_string(info));
  return sorted_descending(std::move(w), v);
}
#endif

}  // namespace detail

/// Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix.
inline EigenDecomposition symmetric_eig(const Matrix<double>& a, EigenMethod method = EigenMethod::automatic) {
  detail::require_symmetric(a);
  if (!all_finite(a)) throw NumericError("symmetric_eig: non-finite input");
  if (method == EigenMethod::automatic) method = lapack_available() ? EigenMethod::lapack : EigenMethod::tridiagonal_ql;
  switch (method) {
    case EigenMethod::jacobi: return detail::jacobi(a);
    case EigenMethod::lapack:
#ifdef ZLIN_HAVE_LAPACKE
      return detail::lapack_syevd(a);
#else
      throw std::invalid_argument("symmetric_eig: built without LAPACK");
#endif
    default: return detail::tridiagonal_ql(a);
  }
}

/// Covariance (divided by n) of the rows of `x` about `mean`, accumulated in double.
template <Scalar T>
Matrix<double> covariance(const Matrix<T>& x, std::span<const double> mean) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (mean.size() != d) throw ShapeError("covariance: mean length mismatch");
  Matrix<double> cov(d, d);
  // Rows are processed in blocks so each output row is touched once per
  // block instead of once per example.
  constexpr std::size_t block = 64;
  std::vector<double> centered(block * d);
  for (std::size_t r0 = 0; r0 < n; r0 += block) {
    const std::size_t nb = std::min(block, n - r0);
    for (std::size_t r = 0; r < nb; ++r) {
      auto row = x.row(r0 + r);
      for (std::size_t j = 0; j < d; ++j) centered[r * d + j] = static_cast<double>(row[j]) - mean[j];
    }
    for (std::size_t i = 0; i < d; ++i) {
      double* out = cov.data() + i * d;
      for (std::size_t r = 0; r < nb; ++r) {
        const double* c = centered.data() + r * d;
        const double ci = c[i];
        if (ci == 0.0) continue;
        for (std::size_t j = i; j < d; ++j) out[j] += ci * c[j];
      }
    }
  }
  const double inv = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      cov(i, j) *= inv;
      cov(j, i) = cov(i, j);
    }
  }
  return cov;
}

}  // namespace zlin
