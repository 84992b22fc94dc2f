#pragma once

// Read-only instrumentation: activation sparsity, update density of
// linear/nonlinear pairs, CLT and spike-mass simulations, activation
// histograms, and a finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <optional>

#include "zlin/layers.hpp"

namespace zlin {

namespace detail {

// Parameterised layers other than the classifier head.
template <Scalar T>
std::vector<std::size_t> hidden_layer_indices(const Network<T>& net) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params()) idx.push_back(i);
  if (!idx.empty()) idx.pop_back();
  return idx;
}

template <Scalar T>
double zero_fraction(const Matrix<T>& m) {
  if (m.size() == 0) return 0.0;
  std::size_t zeros = 0;
  for (T v : m.values()) zeros += v == T{0};
  return static_cast<double>(zeros) / static_cast<double>(m.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sparsity

struct LayerSparsity {
  std::size_t layer = 0;  // index into Network::layers
  std::size_t depth = 0;  // 1-based among hidden layers
  Activation kind = Activation::linear;
  double zero_fraction = 0.0;
};

struct SparsityReport {
  std::size_t epoch = 0;
  std::vector<LayerSparsity> layers;
};

/// Exact-zero fraction of each hidden layer's activation (before
/// standardization), Eval mode.
template <Scalar T>
SparsityReport sparsity_probe(const Network<T>& net, const Matrix<T>& probe, std::size_t epoch = 0,
                              std::size_t workers = 1) {
  if (probe.rows() == 0) throw std::invalid_argument("sparsity_probe: empty probe set");
  Rng unused(0);
  auto trace = forward(net, probe, Mode::eval, unused, workers);
  SparsityReport rep;
  rep.epoch = epoch;
  std::size_t depth = 0;
  for (auto i : detail::hidden_layer_indices(net)) {
    rep.layers.push_back({i, ++depth, net.layers[i].kind.type, detail::zero_fraction(trace.activations[i])});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Update density

struct LayerDensity {
  std::size_t layer = 0;
  Activation kind = Activation::linear;
  double batch = 0.0;     // nonzero fraction of the minibatch update
  double per_case = 0.0;  // mean nonzero fraction of single-example updates
};

/// A linear layer l followed by a nonlinear layer i (dropout between them
/// is skipped). Densities of the equivalent absorbed update.
struct PairDensity {
  std::size_t linear_layer = 0;
  std::size_t nonlinear_layer = 0;
  double batch = 0.0;
  double per_case = 0.0;
};

struct DensityReport {
  std::vector<LayerDensity> layers;
  std::vector<PairDensity> pairs;
};

struct DensityOptions {
  std::size_t per_case_examples = 32;  // first k rows of the batch
  double lr = 1e-3;                    // update = -lr * gradient
};

namespace detail {

template <Scalar T>
std::vector<std::pair<std::size_t, std::size_t>> linear_nonlinear_pairs(const Network<T>& net) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const auto hidden = hidden_layer_indices(net);
  for (std::size_t k = 0; k + 1 < hidden.size(); ++k) {
    const auto a = hidden[k], b = hidden[k + 1];
    if (net.layers[a].kind.type == Activation::linear && is_nonlinear(net.layers[b].kind.type)) pairs.push_back({a, b});
  }
  return pairs;
}

// Folds a linear layer's standardization into its weight (or update) rows.
template <Scalar T>
Matrix<T> fold_rows(const Layer<T>& linear, Matrix<T> w) {
  if (!linear.standardize) return w;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (auto& v : w.row(r)) v *= linear.standardize->inv_std[r];
  return w;
}

template <Scalar T>
void densities(const Network<T>& net, const GradientSet<T>& g, double lr, std::vector<double>& layer_out,
               std::vector<double>& pair_out) {
  const auto hidden = hidden_layer_indices(net);
  std::vector<std::size_t> all = hidden;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params() && std::find(all.begin(), all.end(), i) == all.end()) all.push_back(i);
  layer_out.clear();
  for (auto i : all) layer_out.push_back(nonzero_fraction(g.layers[i].weights));
  pair_out.clear();
  for (auto [l, i] : linear_nonlinear_pairs(net)) {
    const auto& lin = net.layers[l];
    const auto& nl = net.layers[i];
    Matrix<T> dwi = static_cast<T>(-lr) * g.layers[i].weights;
    Matrix<T> dwl = fold_rows(lin, static_cast<T>(-lr) * g.layers[l].weights);
    pair_out.push_back(nonzero_fraction(equivalent_update(dwi, dwl, nl.weights, fold_rows(lin, lin.weights))));
  }
}

}  // namespace detail

/// Train-mode gradients on one batch; densities of the resulting updates
/// for the whole batch and averaged over single training cases.
template <Scalar T>
DensityReport update_density_probe(const Network<T>& net, const Matrix<T>& x, std::span<const int> labels, Rng& rng,
                                   const DensityOptions& opt = {}) {
  if (x.rows() == 0) throw std::invalid_argument("update_density_probe: empty batch");
  DensityReport rep;
  std::vector<std::size_t> all = detail::hidden_layer_indices(net);
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params() && std::find(all.begin(), all.end(), i) == all.end()) all.push_back(i);
  const auto pairs = detail::linear_nonlinear_pairs(net);

  std::vector<double> lay, par;
  {
    auto trace = forward(net, x, Mode::train, rng);
    auto g = backward(net, trace, labels);
    detail::densities(net, g.grads, opt.lr, lay, par);
  }
  for (std::size_t k = 0; k < all.size(); ++k) rep.layers.push_back({all[k], net.layers[all[k]].kind.type, lay[k], 0.0});
  for (std::size_t k = 0; k < pairs.size(); ++k) rep.pairs.push_back({pairs[k].first, pairs[k].second, par[k], 0.0});

  const std::size_t cases = std::min(opt.per_case_examples, x.rows());
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t row[1] = {c};
    auto xc = gather_rows<T>(x, row);
    auto trace = forward(net, xc, Mode::train, rng);
    auto g = backward(net, trace, labels.subspan(c, 1));
    detail::densities(net, g.grads, opt.lr, lay, par);
    for (std::size_t k = 0; k < lay.size(); ++k) rep.layers[k].per_case += lay[k] / static_cast<double>(cases);
    for (std::size_t k = 0; k < par.size(); ++k) rep.pairs[k].per_case += par[k] / static_cast<double>(cases);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Weighted sums of independent inputs

enum class InputShape { uniform, rademacher, exponential };

inline const char* to_string(InputShape s) {
  switch (s) {
    case InputShape::uniform: return "uniform";
    case InputShape::rademacher: return "rademacher";
    case InputShape::exponential: return "exponential";
  }
  return "?";
}

struct InputDist {
  double mean = 0.0;
  double var = 1.0;
  InputShape shape = InputShape::uniform;

  /// One draw with this mean and variance.
  double sample(Rng& rng) const {
    double unit = 0.0;  // zero mean, unit variance
    switch (shape) {
      case InputShape::uniform: unit = rng.uniform(-std::sqrt(3.0), std::sqrt(3.0)); break;
      case InputShape::rademacher: unit = rng.bernoulli(0.5) ? 1.0 : -1.0; break;
      case InputShape::exponential: unit = -std::log1p(-rng.uniform()) - 1.0; break;
    }
    return mean + std::sqrt(var) * unit;
  }
};

namespace detail {

inline void check_sum_inputs(std::span<const InputDist> dists, std::span<const double> weights, std::size_t n) {
  if (dists.size() < n || weights.size() < n) {
    throw ShapeError("need " + std::to_string(n) + " inputs and weights, have " + std::to_string(dists.size()) +
                     " and " + std::to_string(weights.size()));
  }
}

// Mean and std of sum_j w_j x_j over the first n inputs.
inline std::pair<double, double> sum_moments(std::span<const InputDist> dists, std::span<const double> weights,
                                             std::size_t n) {
  double mu = 0.0, var = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    mu += weights[j] * dists[j].mean;
    var += weights[j] * weights[j] * dists[j].var;
  }
  if (!(var > 0.0)) throw NumericError("weighted sum has zero total variance");
  return {mu, std::sqrt(var)};
}

}  // namespace detail

/// `samples` draws of (sum_j<n w_j x_j - mean) / std.
inline std::vector<double> standardized_sums(std::span<const InputDist> dists, std::span<const double> weights,
                                             std::size_t n, std::size_t samples, Rng& rng) {
  detail::check_sum_inputs(dists, weights, n);
  const auto [mu, sd] = detail::sum_moments(dists, weights, n);
  std::vector<double> out(samples);
  for (auto& s : out) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += weights[j] * dists[j].sample(rng);
    s = (acc - mu) / sd;
  }
  return out;
}

struct CltPoint {
  std::size_t n = 0;
  double ks = 0.0;
};

/// KS distance to a Gaussian of the standardized weighted sum, per N.
inline std::vector<CltPoint> clt_probe(std::span<const InputDist> dists, std::span<const double> weights,
                                       std::span<const std::size_t> n_values, std::size_t samples, Rng& rng) {
  std::vector<CltPoint> out;
  for (auto n : n_values) {
    auto s = standardized_sums(dists, weights, n, samples, rng);
    out.push_back({n, ks_gaussian(s)});
  }
  return out;
}

/// Per-N mean and spread of the KS distance over independent repeats.
struct KsEnvelope {
  std::vector<std::size_t> n;
  std::vector<double> mean;
  std::vector<double> sd;

  /// mean[k+1] <= mean[k] + factor * (Monte-Carlo noise), with the noise
  /// taken as the larger of the two repeat standard deviations.
  bool non_increasing(double factor = 2.0) const {
    for (std::size_t k = 0; k + 1 < mean.size(); ++k) {
      if (mean[k + 1] > mean[k] + factor * std::max(sd[k], sd[k + 1])) return false;
    }
    return true;
  }
};

inline KsEnvelope clt_envelope(std::span<const InputDist> dists, std::span<const double> weights,
                               std::span<const std::size_t> n_values, std::size_t samples, std::size_t repeats,
                               const Rng& rng) {
  if (repeats < 2) throw std::invalid_argument("clt_envelope: need at least 2 repeats");
  std::vector<std::vector<double>> ks(n_values.size());
  for (std::size_t r = 0; r < repeats; ++r) {
    Rng rr = rng.derive(r);
    auto pts = clt_probe(dists, weights, n_values, samples, rr);
    for (std::size_t k = 0; k < pts.size(); ++k) ks[k].push_back(pts[k].ks);
  }
  KsEnvelope env;
  env.n.assign(n_values.begin(), n_values.end());
  for (auto& v : ks) {
    env.mean.push_back(mean(v));
    // sample standard deviation of the repeats
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    env.sd.push_back(std::sqrt(ss / static_cast<double>(v.size() - 1)));
  }
  return env;
}

struct SpikeMass {
  double empirical = 0.0;  // fraction of ReLU(b + sum) that is exactly zero
  double predicted = 0.0;  // Phi(-(b + mu) / sigma)
};

inline SpikeMass spike_mass_check(double bias, std::span<const double> weights, std::span<const InputDist> dists,
                                  std::size_t samples, Rng& rng) {
  const std::size_t n = weights.size();
  detail::check_sum_inputs(dists, weights, n);
  const auto [mu, sd] = detail::sum_moments(dists, weights, n);
  if (samples == 0) throw std::invalid_argument("spike_mass_check: need samples");
  std::size_t zeros = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    double y = bias;
    for (std::size_t j = 0; j < n; ++j) y += weights[j] * dists[j].sample(rng);
    zeros += std::max(y, 0.0) == 0.0;
  }
  return {static_cast<double>(zeros) / static_cast<double>(samples), normal_cdf(-(bias + mu) / sd)};
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges over the nonzero range
  std::vector<std::size_t> counts;
  std::size_t zero_count = 0;  // exact zeros, kept out of the bins
  std::vector<double> samples;

  std::size_t total() const {
    std::size_t t = zero_count;
    for (auto c : counts) t += c;
    return t;
  }
  double zero_fraction() const { return samples.empty() ? 0.0 : static_cast<double>(zero_count) / samples.size(); }
};

inline Histogram make_histogram(std::vector<double> samples, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram: need at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : samples) {
    if (v == 0.0) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (lo > hi) lo = hi = 0.0;
  if (lo == hi) hi = lo + 1.0;
  h.edges.resize(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) h.edges[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(bins);
  for (double v : samples) {
    if (v == 0.0) {
      ++h.zero_count;
      continue;
    }
    auto k = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    h.counts[std::min(k, bins - 1)]++;
  }
  h.samples = std::move(samples);
  return h;
}

/// Histogram of layer `layer`'s activations (before standardization) over
/// the probe set, Eval mode. `unit` restricts to one output unit.
template <Scalar T>
Histogram activation_histogram(const Network<T>& net, const Matrix<T>& probe, std::size_t layer, std::size_t bins,
                               std::optional<std::size_t> unit = std::nullopt) {
  if (probe.rows() == 0) throw std::invalid_argument("activation_histogram: empty probe set");
  if (layer >= net.layers.size() || !net.layers[layer].has_params()) {
    throw std::out_of_range("activation_histogram: layer " + std::to_string(layer) + " is not a parameterised layer");
  }
  if (unit && *unit >= net.layers[layer].fan_out()) throw std::out_of_range("activation_histogram: unit out of range");
  Rng unused(0);
  auto trace = forward(net, probe, Mode::eval, unused);
  const auto& a = trace.activations[layer];
  std::vector<double> samples;
  if (unit) {
    for (std::size_t i = 0; i < a.rows(); ++i) samples.push_back(a(i, *unit));
  } else {
    samples.assign(a.values().begin(), a.values().end());
  }
  return make_histogram(std::move(samples), bins);
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t coords_per_tensor = 20;
  std::size_t max_resamples = 200;  // per tensor
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t resampled = 0;  // coordinates rejected for straddling a kink
  std::size_t tensors = 0;
  std::size_t worst_layer = 0;
};

/// Central differences on random coordinates of every parameter tensor,
/// compared against backward (Eval mode, so dropout is off). Relative error
/// |a - n| / max(|a|, |n|), absolute below 1e-10. Coordinates whose
/// perturbation moves any unit across its kink are resampled.
inline GradCheckResult grad_check(const Network<double>& network, const Matrix<double>& x, std::span<const int> labels,
                                  const GradCheckOptions& opt = {}) {
  Network<double> net = network;
  Rng unused(0);
  auto loss_at = [&]() {
    auto t = forward(net, x, Mode::eval, unused);
    const double l = cross_entropy(t.probabilities, labels);
    if (!std::isfinite(l)) throw NumericError("grad_check: loss is not finite");
    return l;
  };
  auto kinks = [&]() {
    auto t = forward(net, x, Mode::eval, unused);
    std::vector<bool> sig;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      const auto& k = net.layers[i].kind;
      if (k.type != Activation::relu && k.type != Activation::zero_bias_relu) continue;
      const double th = k.threshold();
      for (double z : t.pre[i].values()) sig.push_back(z > th);
    }
    return sig;
  };
  auto base_trace = forward(net, x, Mode::eval, unused);
  auto analytic = backward(net, base_trace, labels);
  if (!std::isfinite(analytic.loss)) throw NumericError("grad_check: loss is not finite");
  const auto base = kinks();
  Rng rng(opt.seed);
  GradCheckResult res;

  auto check_tensor = [&](std::span<double> params, std::span<const double> grads, std::size_t layer) {
    if (params.empty()) return;
    ++res.tensors;
    std::vector<std::size_t> coords(params.size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    rng.shuffle(coords.begin(), coords.end());
    std::size_t accepted = 0, rejected = 0;
    for (std::size_t c : coords) {
      if (accepted >= opt.coords_per_tensor || rejected > opt.max_resamples) break;
      double& p = params[c];
      const double saved = p;
      p = saved + opt.eps;
      const double lp = loss_at();
      const bool kp = kinks() != base;
      p = saved - opt.eps;
      const double lm = loss_at();
      const bool km = kinks() != base;
      p = saved;
      if (kp || km) {
        ++rejected;
        ++res.resampled;
        continue;
      }
      const double numeric = (lp - lm) / (2 * opt.eps);
      const double a = grads[c];
      const double denom = std::max(std::abs(a), std::abs(numeric));
      const double err = denom < 1e-10 ? std::abs(a - numeric) : std::abs(a - numeric) / denom;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_layer = layer;
      }
      ++accepted;
      ++res.checked;
    }
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto& layer = net.layers[i];
    if (!layer.has_params()) continue;
    check_tensor(layer.weights.values(), analytic.grads.layers[i].weights.values(), i);
    if (layer.trains_bias()) check_tensor(layer.bias, analytic.grads.layers[i].bias, i);
  }
  return res;
}

}  // namespace zlin
