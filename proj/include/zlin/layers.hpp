#pragma once

// Fully connected layers, forward/backward propagation, and the algebra
// relating a nonlinear layer stacked on a linear bottleneck to a single
// equivalent layer.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zlin/numcore.hpp"

namespace zlin {

enum class Activation : std::uint8_t {
  linear = 0,
  relu = 1,
  zero_bias_relu = 2,  // h = z * 1(z > threshold), no learned bias
  dropout = 3,
  sigmoid = 4,  // histogram probes only
};

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::zero_bias_relu: return "zero_bias_relu";
    case Activation::dropout: return "dropout";
    case Activation::sigmoid: return "sigmoid";
  }
  return "unknown";
}

inline bool is_nonlinear(Activation a) {
  return a == Activation::relu || a == Activation::zero_bias_relu || a == Activation::sigmoid;
}

struct LayerKind {
  Activation type = Activation::linear;
  double param = 0.0;  // threshold for zero_bias_relu, drop rate for dropout

  static LayerKind linear() { return {Activation::linear, 0.0}; }
  static LayerKind relu() { return {Activation::relu, 0.0}; }
  static LayerKind zero_bias_relu(double threshold) { return {Activation::zero_bias_relu, threshold}; }
  static LayerKind dropout(double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0,1)");
    return {Activation::dropout, rate};
  }
  static LayerKind sigmoid() { return {Activation::sigmoid, 0.0}; }

  double threshold() const { return type == Activation::zero_bias_relu ? param : 0.0; }
  double rate() const { return type == Activation::dropout ? param : 0.0; }

  bool operator==(const LayerKind&) const = default;
};

/// Fixed affine map (h - mean) * inv_std applied after the activation.
template <Scalar T>
struct Standardization {
  Vector<T> mean;
  Vector<T> inv_std;
  bool operator==(const Standardization&) const = default;
};

template <Scalar T>
struct Layer {
  LayerKind kind;
  Matrix<T> weights;  // fan_out x fan_in; empty for dropout
  Vector<T> bias;     // fan_out; identically zero for zero_bias_relu
  std::optional<Standardization<T>> standardize;

  bool has_params() const { return kind.type != Activation::dropout; }
  bool trains_bias() const { return has_params() && kind.type != Activation::zero_bias_relu; }
  std::size_t fan_in() const { return weights.cols(); }
  std::size_t fan_out() const { return weights.rows(); }

  std::size_t parameter_count() const {
    if (!has_params()) return 0;
    return weights.size() + (trains_bias() ? bias.size() : 0);
  }

  bool operator==(const Layer&) const = default;

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  static Layer dense(LayerKind kind, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    if (kind.type == Activation::dropout) throw std::invalid_argument("Layer::dense: use Layer::dropout");
    if (fan_in == 0 || fan_out == 0) throw ShapeError("Layer::dense: zero-sized layer");
    Layer layer{kind, Matrix<T>(fan_out, fan_in), Vector<T>(fan_out, T{0}), std::nullopt};
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& w : layer.weights.values()) w = static_cast<T>(rng.uniform(-limit, limit));
    return layer;
  }

  static Layer dropout(double rate) { return Layer{LayerKind::dropout(rate), {}, {}, std::nullopt}; }
};

/// Ordered layer stack; the last parameterised layer is the classifier head
/// and the network output is its softmax.
template <Scalar T>
struct Network {
  std::vector<Layer<T>> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }
  std::size_t input_dim() const {
    for (const auto& l : layers)
      if (l.has_params()) return l.fan_in();
    return 0;
  }
  std::size_t output_dim() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (it->has_params()) return it->fan_out();
    return 0;
  }
  bool operator==(const Network&) const = default;
};

template <Scalar To, Scalar From>
Network<To> cast_network(const Network<From>& net) {
  Network<To> out;
  for (const auto& l : net.layers) {
    Layer<To> c{l.kind, cast<To>(l.weights), Vector<To>(l.bias.begin(), l.bias.end()), std::nullopt};
    if (l.standardize) {
      c.standardize = Standardization<To>{Vector<To>(l.standardize->mean.begin(), l.standardize->mean.end()),
                                          Vector<To>(l.standardize->inv_std.begin(), l.standardize->inv_std.end())};
    }
    out.layers.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Architecture descriptions

struct HiddenSpec {
  std::size_t units = 0;
  Activation kind = Activation::relu;
  bool operator==(const HiddenSpec&) const = default;
};

struct Architecture {
  std::vector<HiddenSpec> hidden;
  std::size_t classes = 0;
  bool operator==(const Architecture&) const = default;
};

/// Parameter count of a chain of fully connected layers. `sizes[0]` is the
/// input layer; every later entry contributes size[i-1]*size[i] weights plus
/// size[i] biases (zero-bias units contribute no biases).
inline std::size_t count_params(std::span<const HiddenSpec> sizes) {
  std::size_t total = 0;
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    total += sizes[i - 1].units * sizes[i].units;
    if (sizes[i].kind != Activation::zero_bias_relu) total += sizes[i].units;
  }
  return total;
}

inline std::size_t count_params(const Architecture& arch, std::size_t input_dim) {
  std::vector<HiddenSpec> chain{{input_dim, Activation::linear}};
  chain.insert(chain.end(), arch.hidden.begin(), arch.hidden.end());
  if (arch.classes > 0) chain.push_back({arch.classes, Activation::linear});
  return count_params(chain);
}

struct DropoutRates {
  double input = 0.0;
  double hidden = 0.0;
};

inline LayerKind kind_for(Activation a, double zae_threshold = 0.0) {
  switch (a) {
    case Activation::linear: return LayerKind::linear();
    case Activation::relu: return LayerKind::relu();
    case Activation::zero_bias_relu: return LayerKind::zero_bias_relu(zae_threshold);
    case Activation::sigmoid: return LayerKind::sigmoid();
    case Activation::dropout: break;
  }
  throw std::invalid_argument("kind_for: dropout is not a hidden layer kind");
}

/// Randomly initialised network. Dropout goes on the input and after every
/// nonlinear hidden layer, never after a linear bottleneck.
template <Scalar T>
Network<T> build_network(const Architecture& arch, std::size_t input_dim, const DropoutRates& dropout,
                         Rng& rng) {
  if (input_dim == 0) throw ShapeError("build_network: input dimension is zero");
  if (arch.classes == 0) throw ShapeError("build_network: class count is zero");
  Network<T> net;
  if (dropout.input > 0.0) net.layers.push_back(Layer<T>::dropout(dropout.input));
  std::size_t width = input_dim;
  for (const auto& h : arch.hidden) {
    net.layers.push_back(Layer<T>::dense(kind_for(h.kind), width, h.units, rng));
    if (dropout.hidden > 0.0 && is_nonlinear(h.kind)) net.layers.push_back(Layer<T>::dropout(dropout.hidden));
    width = h.units;
  }
  net.layers.push_back(Layer<T>::dense(LayerKind::linear(), width, arch.classes, rng));
  return net;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { train, eval };

template <Scalar T>
struct ForwardTrace {
  std::vector<Matrix<T>> inputs;       // inputs[i] feeds layer i; inputs.back() are the logits
  std::vector<Matrix<T>> pre;          // pre-activations (empty for dropout)
  std::vector<Matrix<T>> activations;  // post-activation, before standardization
  std::vector<Matrix<T>> masks;        // dropout masks (Train mode only), scaled by 1/keep
  Matrix<T> probabilities;

  const Matrix<T>& logits() const { return inputs.back(); }
  const Matrix<T>& output() const { return probabilities; }
};

namespace detail {

template <Scalar T>
T activate(const LayerKind& kind, T z) {
  switch (kind.type) {
    case Activation::relu: return z > T{0} ? z : T{0};
    case Activation::zero_bias_relu: return z > static_cast<T>(kind.param) ? z : T{0};
    case Activation::sigmoid: return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
    default: return z;
  }
}

template <Scalar T>
T activation_slope(const LayerKind& kind, T z, T h) {
  switch (kind.type) {
    case Activation::relu: return z > T{0} ? T{1} : T{0};
    // The threshold indicator is held constant under differentiation.
    case Activation::zero_bias_relu: return z > static_cast<T>(kind.param) ? T{1} : T{0};
    case Activation::sigmoid: return h * (T{1} - h);
    default: return T{1};
  }
}

template <Scalar T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    if (z.empty()) continue;
    const double zmax = static_cast<double>(*std::max_element(z.begin(), z.end()));
    double sum = 0.0;
    for (T v : z) sum += std::exp(static_cast<double>(v) - zmax);
    auto out = p.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) {
      out[j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - zmax) / sum);
    }
  }
  return p;
}

template <Scalar T>
void check_finite(const Matrix<T>& m, std::size_t layer) {
  if (!all_finite(m)) {
    throw NumericError("non-finite activation at layer " + std::to_string(layer) +
                       "; try a smaller learning rate");
  }
}

}  // namespace detail

/// Single-layer transform used by forward and by the pretraining code.
/// Returns pre-activation and activation (before standardization).
template <Scalar T>
std::pair<Matrix<T>, Matrix<T>> layer_transform(const Layer<T>& layer, const Matrix<T>& x,
                                                std::size_t workers = 1) {
  if (x.cols() != layer.fan_in()) {
    throw ShapeError("layer input has " + std::to_string(x.cols()) + " columns, layer expects " +
                     std::to_string(layer.fan_in()));
  }
  Matrix<T> z = matmul(x, transpose(layer.weights), workers);
  add_row_vector<T>(z, layer.bias);
  Matrix<T> h = z;
  if (layer.kind.type != Activation::linear) {
    for (auto& v : h.values()) v = detail::activate(layer.kind, v);
  }
  return {std::move(z), std::move(h)};
}

template <Scalar T>
void apply_standardization(const Standardization<T>& s, Matrix<T>& h) {
  if (s.mean.size() != h.cols() || s.inv_std.size() != h.cols()) {
    throw ShapeError("standardization width does not match layer output");
  }
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto r = h.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - s.mean[j]) * s.inv_std[j];
  }
}

/// Batch in rows. Dropout uses inverted scaling in Train mode and is the
/// identity in Eval mode.
template <Scalar T>
ForwardTrace<T> forward(const Network<T>& net, const Matrix<T>& input, Mode mode, Rng& rng,
                        std::size_t workers = 1) {
  if (const auto d = net.input_dim(); d != 0 && input.cols() != d) {
    throw ShapeError("forward: input has " + std::to_string(input.cols()) + " columns, network expects " +
                     std::to_string(d));
  }
  ForwardTrace<T> trace;
  const std::size_t n = net.layers.size();
  trace.inputs.reserve(n + 1);
  trace.pre.resize(n);
  trace.activations.resize(n);
  trace.masks.resize(n);
  trace.inputs.push_back(input);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& layer = net.layers[i];
    const Matrix<T>& x = trace.inputs.back();
    if (layer.kind.type == Activation::dropout) {
      Matrix<T> out = x;
      if (mode == Mode::train && layer.kind.rate() > 0.0) {
        const double keep = 1.0 - layer.kind.rate();
        Matrix<T> mask(x.rows(), x.cols());
        const T scale = static_cast<T>(1.0 / keep);
        for (auto& m : mask.values()) m = rng.bernoulli(keep) ? scale : T{0};
        out = hadamard(std::move(out), mask);
        trace.masks[i] = std::move(mask);
      }
      trace.activations[i] = out;
      trace.inputs.push_back(std::move(out));
      continue;
    }
    auto [z, h] = layer_transform(layer, x, workers);
    detail::check_finite(z, i);
    Matrix<T> out = h;
    if (layer.standardize) apply_standardization(*layer.standardize, out);
    trace.pre[i] = std::move(z);
    trace.activations[i] = std::move(h);
    trace.inputs.push_back(std::move(out));
  }
  trace.probabilities = detail::softmax_rows(trace.inputs.back());
  return trace;
}

template <Scalar T>
struct LayerGradient {
  Matrix<T> weights;
  Vector<T> bias;
};

template <Scalar T>
struct GradientSet {
  std::vector<LayerGradient<T>> layers;  // parallel to Network::layers; empty for dropout
};

template <Scalar T>
struct BackwardResult {
  double loss = 0.0;
  GradientSet<T> grads;
  Matrix<T> input_grad;  // dLoss/dInput, batch x input_dim
};

/// Mean cross-entropy of softmax probabilities against integer labels.
template <Scalar T>
double cross_entropy(const Matrix<T>& probabilities, std::span<const int> labels) {
  if (labels.size() != probabilities.rows()) throw ShapeError("cross_entropy: label count mismatch");
  if (labels.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= probabilities.cols()) throw std::out_of_range("label out of range");
    loss -= std::log(std::max(static_cast<double>(probabilities(i, y)), 1e-300));
  }
  return loss / static_cast<double>(labels.size());
}

/// Back-propagates an arbitrary gradient on the logits.
template <Scalar T>
BackwardResult<T> backward_from_logits(const Network<T>& net, const ForwardTrace<T>& trace,
                                       Matrix<T> grad, std::size_t workers = 1) {
  const std::size_t n = net.layers.size();
  if (trace.inputs.size() != n + 1 || trace.pre.size() != n) {
    throw ShapeError("backward: trace does not belong to this network");
  }
  BackwardResult<T> out;
  out.grads.layers.resize(n);
  for (std::size_t idx = n; idx-- > 0;) {
    const auto& layer = net.layers[idx];
    if (grad.rows() != trace.inputs[idx + 1].rows() || grad.cols() != trace.inputs[idx + 1].cols()) {
      throw ShapeError("backward: trace does not belong to this network (layer " + std::to_string(idx) + ")");
    }
    if (layer.kind.type == Activation::dropout) {
      if (!trace.masks[idx].empty()) grad = hadamard(std::move(grad), trace.masks[idx]);
      continue;
    }
    if (layer.standardize) {
      for (std::size_t i = 0; i < grad.rows(); ++i) {
        auto r = grad.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] *= layer.standardize->inv_std[j];
      }
    }
    if (layer.kind.type != Activation::linear) {
      const auto z = trace.pre[idx].values();
      const auto h = trace.activations[idx].values();
      auto g = grad.values();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] *= detail::activation_slope(layer.kind, z[k], h[k]);
    }
    auto& lg = out.grads.layers[idx];
    lg.weights = matmul(transpose(grad), trace.inputs[idx], workers);
    lg.bias = layer.trains_bias() ? column_sums(grad) : Vector<T>(layer.fan_out(), T{0});
    grad = matmul(grad, layer.weights, workers);
  }
  out.input_grad = std::move(grad);
  return out;
}

/// Mean cross-entropy loss and gradients for every parameter.
template <Scalar T>
BackwardResult<T> backward(const Network<T>& net, const ForwardTrace<T>& trace, std::span<const int> labels,
                           std::size_t workers = 1) {
  const auto& p = trace.probabilities;
  if (labels.size() != p.rows()) throw ShapeError("backward: label count does not match batch");
  const double loss = cross_entropy(p, labels);
  Matrix<T> grad = p;
  const T inv_batch = labels.empty() ? T{0} : static_cast<T>(1.0 / static_cast<double>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto r = grad.row(i);
    r[static_cast<std::size_t>(labels[i])] -= T{1};
    for (auto& v : r) v *= inv_batch;
  }
  auto out = backward_from_logits(net, trace, std::move(grad), workers);
  out.loss = loss;
  return out;
}

template <Scalar T>
GradientSet<T> zero_gradients(const Network<T>& net) {
  GradientSet<T> g;
  g.layers.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    if (!l.has_params()) continue;
    g.layers[i].weights = Matrix<T>(l.fan_out(), l.fan_in());
    g.layers[i].bias = Vector<T>(l.fan_out(), T{0});
  }
  return g;
}

/// a += scale * b, layer by layer.
template <Scalar T>
void accumulate(GradientSet<T>& a, const GradientSet<T>& b, double scale) {
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    auto aw = a.layers[i].weights.values();
    auto bw = b.layers[i].weights.values();
    for (std::size_t k = 0; k < aw.size(); ++k) aw[k] = static_cast<T>(aw[k] + scale * bw[k]);
    auto& ab = a.layers[i].bias;
    const auto& bb = b.layers[i].bias;
    for (std::size_t k = 0; k < ab.size(); ++k) ab[k] = static_cast<T>(ab[k] + scale * bb[k]);
  }
}

struct GradientOptions {
  std::size_t workers = 1;
  std::size_t shard_rows = 0;  // 0: the whole minibatch is one shard
};

/// Minibatch loss and gradients with the batch split into fixed-size shards.
/// Shard s draws its dropout masks from `step_rng.derive(s)`, and shard
/// results are combined by a pairwise tree over shard index, so the result is
/// identical for any worker count.
template <Scalar T>
BackwardResult<T> batch_gradients(const Network<T>& net, const Matrix<T>& x, std::span<const int> labels,
                                  const Rng& step_rng, const GradientOptions& opt = {}) {
  const std::size_t rows = x.rows();
  const std::size_t shard = opt.shard_rows == 0 ? std::max<std::size_t>(rows, 1) : opt.shard_rows;
  const std::size_t shards = rows == 0 ? 1 : (rows + shard - 1) / shard;
  std::vector<BackwardResult<T>> parts(shards);
  std::vector<std::size_t> part_rows(shards, 0);
  parallel_for(shards, opt.workers, [&](std::size_t s) {
    const std::size_t begin = s * shard;
    const std::size_t end = std::min(rows, begin + shard);
    std::vector<std::size_t> idx;
    for (std::size_t r = begin; r < end; ++r) idx.push_back(r);
    Matrix<T> xs = gather_rows<T>(x, idx);
    Rng rng = step_rng.derive(s);
    auto trace = forward(net, xs, Mode::train, rng);
    parts[s] = backward(net, trace, labels.subspan(begin, end - begin));
    part_rows[s] = end - begin;
  });
  if (shards == 1) return std::move(parts[0]);
  // Shard results are means; reweight by shard size, then tree-reduce.
  for (std::size_t s = 0; s < shards; ++s) {
    const double w = static_cast<double>(part_rows[s]) / static_cast<double>(rows);
    GradientSet<T> scaled = zero_gradients(net);
    accumulate(scaled, parts[s].grads, w);
    parts[s].grads = std::move(scaled);
    parts[s].loss *= w;
  }
  for (std::size_t stride = 1; stride < shards; stride *= 2) {
    for (std::size_t s = 0; s + stride < shards; s += 2 * stride) {
      accumulate(parts[s].grads, parts[s + stride].grads, 1.0);
      parts[s].loss += parts[s + stride].loss;
    }
  }
  return std::move(parts[0]);
}

/// Class predictions (argmax of Eval-mode output).
template <Scalar T>
std::vector<int> predict(const Network<T>& net, const Matrix<T>& x, std::size_t workers = 1) {
  Rng unused(0);
  auto trace = forward(net, x, Mode::eval, unused, workers);
  std::vector<int> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto p = trace.probabilities.row(i);
    out[i] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear-layer absorption

/// The single layer equivalent to `linear` followed by `nonlinear`:
/// w = w_i w_l, b = w_i b_l + b_i. A standardization on the linear layer is
/// folded into (w_l, b_l) first; the nonlinear layer keeps its own. Absorbing
/// into a zero-bias layer generally yields a nonzero bias.
template <Scalar T>
Layer<T> absorb_linear(const Layer<T>& nonlinear, const Layer<T>& linear) {
  if (linear.kind.type != Activation::linear) throw std::invalid_argument("absorb_linear: second layer is not linear");
  if (nonlinear.fan_in() != linear.fan_out()) {
    throw ShapeError("absorb_linear: inner dimension mismatch, " + nonlinear.weights.shape() + " after " +
                     linear.weights.shape());
  }
  Matrix<T> wl = linear.weights;
  Vector<T> bl = linear.bias;
  if (linear.standardize) {
    const auto& s = *linear.standardize;
    for (std::size_t r = 0; r < wl.rows(); ++r) {
      for (auto& v : wl.row(r)) v *= s.inv_std[r];
      bl[r] = (bl[r] - s.mean[r]) * s.inv_std[r];
    }
  }
  Layer<T> out{nonlinear.kind, matmul(nonlinear.weights, wl), matvec<T>(nonlinear.weights, bl),
               nonlinear.standardize};
  for (std::size_t r = 0; r < out.bias.size(); ++r) out.bias[r] += nonlinear.bias[r];
  return out;
}

/// Change of the absorbed weight w = w_i w_l when the pair is updated by
/// (dw_i, dw_l): dw_i dw_l + w_i dw_l + dw_i w_l.
template <Scalar T>
Matrix<T> equivalent_update(const Matrix<T>& dw_i, const Matrix<T>& dw_l, const Matrix<T>& w_i,
                            const Matrix<T>& w_l) {
  if (dw_i.rows() != w_i.rows() || dw_i.cols() != w_i.cols() || dw_l.rows() != w_l.rows() ||
      dw_l.cols() != w_l.cols()) {
    throw ShapeError("equivalent_update: update shapes differ from weight shapes");
  }
  return matmul(dw_i, dw_l) + matmul(w_i, dw_l) + matmul(dw_i, w_l);
}

}  // namespace zlin
