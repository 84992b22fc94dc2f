#pragma once

// Greedy layer-wise pretraining with tied-weight autoencoders:
//   zero-bias (thresholded) for Z layers, h = z * 1(z > theta), z = x W^T
//   linear with biases and weight decay for bottleneck layers
//   ReLU with biases for plain R layers
// Reconstruction r = h W (+ c); loss = mean over examples of ||r - x||^2,
// plus lambda ||W||_F^2 when weight decay is set.

#include <functional>
#include <numeric>

#include "zlin/layers.hpp"
#include "zlin/optim.hpp"

namespace zlin {

struct AeOptions {
  std::size_t epochs = 10;
  double lr = 0.001;
  double momentum = 0.9;
  std::size_t batch = 100;
  double weight_decay = 0.0;  // lambda, only honoured for linear and ReLU autoencoders
  double threshold = 1.0;     // zero-bias autoencoders only
  std::size_t workers = 1;
  // Start each encoder row at a random training example scaled to norm
  // 1/sqrt(hidden) instead of Glorot. On data confined to a cone, Glorot
  // rows that start below threshold everywhere never receive gradient.
  bool init_from_data = false;
};

/// Encoder layer plus the decoder bias of a tied autoencoder.
template <Scalar T>
struct Autoencoder {
  Layer<T> encoder;
  std::vector<T> decoder_bias;  // empty for zero-bias autoencoders

  bool has_biases() const { return encoder.kind.type != Activation::zero_bias_relu; }
};

template <Scalar T>
struct AeGradient {
  double loss = 0.0;
  Matrix<T> weights;
  std::vector<T> bias;
  std::vector<T> decoder_bias;
};

/// Loss and gradient of the tied autoencoder on `x`. The threshold indicator
/// is treated as constant (subgradient convention at the kink).
template <Scalar T>
AeGradient<T> autoencoder_gradient(const Autoencoder<T>& ae, const Matrix<T>& x, double weight_decay,
                                   std::size_t workers = 1) {
  const auto& layer = ae.encoder;
  if (x.cols() != layer.fan_in()) throw ShapeError("autoencoder: input " + x.shape() + " vs weights " + layer.weights.shape());
  const double inv_b = x.rows() ? 1.0 / static_cast<double>(x.rows()) : 0.0;
  auto [z, h] = layer_transform(layer, x, workers);
  Matrix<T> r = matmul(h, layer.weights, workers);
  if (ae.has_biases()) add_row_vector(r, std::span<const T>(ae.decoder_bias));
  AeGradient<T> g;
  // G = dL/dR = 2 (R - X) / B
  Matrix<T> gr = r - x;
  double sq = 0.0;
  for (auto& v : gr.values()) {
    sq += static_cast<double>(v) * v;
    v = static_cast<T>(2.0 * inv_b * v);
  }
  double wd_term = 0.0;
  if (weight_decay > 0.0) {
    for (T w : layer.weights.values()) wd_term += static_cast<double>(w) * w;
    wd_term *= weight_decay;
  }
  g.loss = sq * inv_b + wd_term;
  if (!std::isfinite(g.loss)) {
    throw NumericError("autoencoder loss diverged (non-finite); try a smaller learning rate");
  }
  Matrix<T> dh = matmul(gr, transpose(layer.weights), workers);  // B x hidden
  if (layer.kind.type != Activation::linear) {
    auto dv = dh.values();
    auto zv = z.values();
    auto hv = h.values();
    for (std::size_t k = 0; k < dv.size(); ++k) dv[k] *= detail::activation_slope(layer.kind, zv[k], hv[k]);
  }
  g.weights = matmul(transpose(h), gr, workers) + matmul(transpose(dh), x, workers);
  if (weight_decay > 0.0) {
    auto gw = g.weights.values();
    auto w = layer.weights.values();
    for (std::size_t k = 0; k < gw.size(); ++k) gw[k] += static_cast<T>(2.0 * weight_decay * w[k]);
  }
  if (ae.has_biases()) {
    g.bias = column_sums(dh);
    g.decoder_bias = column_sums(gr);
  }
  return g;
}

/// Mean squared reconstruction error per example (no weight-decay term).
template <Scalar T>
double reconstruction_error(const Autoencoder<T>& ae, const Matrix<T>& x) {
  return autoencoder_gradient(ae, x, 0.0).loss;
}

struct AeLog {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

/// Minibatch SGD with momentum on a tied autoencoder, in place.
template <Scalar T>
AeLog train_autoencoder(Autoencoder<T>& ae, const Matrix<T>& data, const AeOptions& opt, Rng& rng) {
  if (opt.batch == 0) throw std::invalid_argument("autoencoder: batch size must be positive");
  if (data.cols() != ae.encoder.fan_in()) throw ShapeError("autoencoder: data width does not match layer");
  AeLog log;
  Layer<T>& layer = ae.encoder;
  std::vector<T> vw(layer.weights.size(), T{0}), vb(layer.bias.size(), T{0}), vc(ae.decoder_bias.size(), T{0});
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double wd = ae.has_biases() ? opt.weight_decay : 0.0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t end = std::min(order.size(), start + opt.batch);
      auto xb = gather_rows(data, std::span<const std::size_t>(order.data() + start, end - start));
      auto g = autoencoder_gradient(ae, xb, wd, opt.workers);
      total += g.loss;
      ++batches;
      sgd_step<T>(layer.weights.values(), g.weights.values(), vw, opt.lr, opt.momentum, 0.0);
      if (ae.has_biases()) {
        sgd_step<T>(layer.bias, g.bias, vb, opt.lr, opt.momentum, 0.0);
        sgd_step<T>(ae.decoder_bias, g.decoder_bias, vc, opt.lr, opt.momentum, 0.0);
      }
    }
    log.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  if (!all_finite(layer.weights)) throw NumericError("autoencoder weights diverged; try a smaller learning rate");
  return log;
}

template <Scalar T>
Autoencoder<T> make_autoencoder(LayerKind kind, std::size_t fan_in, std::size_t hidden, Rng& rng) {
  Autoencoder<T> ae{Layer<T>::dense(kind, fan_in, hidden, rng), {}};
  if (ae.has_biases()) ae.decoder_bias.assign(fan_in, T{0});
  return ae;
}

template <Scalar T>
void init_rows_from_data(Layer<T>& layer, const Matrix<T>& data, Rng& rng) {
  if (data.rows() == 0) throw std::invalid_argument("init_rows_from_data: no examples");
  const double target = 1.0 / std::sqrt(static_cast<double>(layer.fan_out()));
  for (std::size_t u = 0; u < layer.fan_out(); ++u) {
    auto x = data.row(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.rows()) - 1)));
    double norm = 0.0;
    for (T v : x) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    auto w = layer.weights.row(u);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = norm > 0.0 ? static_cast<T>(x[j] * target / norm) : T{0};
  }
}

template <Scalar T>
Layer<T> pretrain_autoencoder(LayerKind kind, const Matrix<T>& data, std::size_t hidden, const AeOptions& opt,
                              Rng& rng, AeLog* log) {
  auto ae = make_autoencoder<T>(kind, data.cols(), hidden, rng);
  if (opt.init_from_data) init_rows_from_data(ae.encoder, data, rng);
  auto l = train_autoencoder(ae, data, opt, rng);
  if (log) *log = std::move(l);
  return std::move(ae.encoder);
}

/// Zero-bias autoencoder; returns the encoder with the pretraining threshold.
template <Scalar T>
Layer<T> zae_pretrain(const Matrix<T>& data, std::size_t hidden, const AeOptions& opt, Rng& rng, AeLog* log = nullptr) {
  return pretrain_autoencoder(LayerKind::zero_bias_relu(opt.threshold), data, hidden, opt, rng, log);
}

template <Scalar T>
Layer<T> linear_ae_pretrain(const Matrix<T>& data, std::size_t hidden, const AeOptions& opt, Rng& rng,
                            AeLog* log = nullptr) {
  return pretrain_autoencoder(LayerKind::linear(), data, hidden, opt, rng, log);
}

template <Scalar T>
Layer<T> relu_ae_pretrain(const Matrix<T>& data, std::size_t hidden, const AeOptions& opt, Rng& rng,
                          AeLog* log = nullptr) {
  return pretrain_autoencoder(LayerKind::relu(), data, hidden, opt, rng, log);
}

// ---------------------------------------------------------------------------
// Standardization and stacking

/// Per-column mean and 1/std (std floored at 1e-8) over the rows of `h`.
template <Scalar T>
Standardization<T> fit_standardization(const Matrix<T>& h) {
  const std::size_t n = h.rows(), d = h.cols();
  std::vector<double> mean(d, 0.0), sq(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = h.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& m : mean) m /= static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = h.row(i);
    for (std::size_t j = 0; j < d; ++j) sq[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  }
  Standardization<T> s;
  s.mean.resize(d);
  s.inv_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::max(std::sqrt(sq[j] / static_cast<double>(std::max<std::size_t>(n, 1))), 1e-8);
    s.mean[j] = static_cast<T>(mean[j]);
    s.inv_std[j] = static_cast<T>(1.0 / sd);
  }
  return s;
}

struct LayerSchedule {
  std::size_t epochs = 10;
  double lr = 0.001;
  double weight_decay = 0.0;
  double threshold = 1.0;
  std::size_t batch = 100;
  bool init_from_data = false;
};

struct PretrainSchedule {
  std::vector<LayerSchedule> layers;  // one per hidden layer
  double momentum = 0.9;
  std::size_t workers = 1;
};

template <Scalar T>
struct StackResult {
  Network<T> hidden;  // pretrained hidden layers with standardization baked in
  std::vector<AeLog> logs;
};

/// Pretrains the hidden layers of `arch` bottom-up. After each layer: a Z
/// threshold drops to 0, the layer's training-set output is measured in one
/// full pass and standardized, and that standardized output feeds the next
/// layer. `on_layer(i, stack)` runs after each layer (checkpointing).
template <Scalar T>
StackResult<T> stack_pretrain(const Architecture& arch, const Matrix<T>& data, const PretrainSchedule& schedule,
                              Rng& rng,
                              const std::function<void(std::size_t, const Network<T>&)>& on_layer = {}) {
  if (schedule.layers.size() != arch.hidden.size()) {
    throw std::invalid_argument("stack_pretrain: schedule has " + std::to_string(schedule.layers.size()) +
                                " entries for " + std::to_string(arch.hidden.size()) + " hidden layers");
  }
  StackResult<T> out;
  Matrix<T> input = data;
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
    const auto& spec = arch.hidden[i];
    const auto& ls = schedule.layers[i];
    AeOptions opt{ls.epochs,       ls.lr,           schedule.momentum, ls.batch,
                  ls.weight_decay, ls.threshold, schedule.workers,  ls.init_from_data};
    AeLog log;
    Layer<T> layer;
    switch (spec.kind) {
      case Activation::zero_bias_relu:
        layer = zae_pretrain(input, spec.units, opt, rng, &log);
        layer.kind = LayerKind::zero_bias_relu(0.0);
        break;
      case Activation::linear: layer = linear_ae_pretrain(input, spec.units, opt, rng, &log); break;
      case Activation::relu: layer = relu_ae_pretrain(input, spec.units, opt, rng, &log); break;
      default: throw std::invalid_argument(std::string("stack_pretrain: cannot pretrain ") + to_string(spec.kind));
    }
    Matrix<T> h = layer_transform(layer, input, schedule.workers).second;
    layer.standardize = fit_standardization(h);
    apply_standardization(*layer.standardize, h);
    out.hidden.layers.push_back(std::move(layer));
    out.logs.push_back(std::move(log));
    input = std::move(h);
    if (on_layer) on_layer(i, out.hidden);
  }
  return out;
}

/// Pretrained hidden stack -> full classifier: optional input dropout,
/// dropout after each nonlinear layer, and a fresh linear head.
template <Scalar T>
Network<T> attach_head(const Network<T>& hidden, std::size_t input_dim, std::size_t classes, const DropoutRates& dropout,
                       Rng& rng) {
  Network<T> net;
  if (dropout.input > 0.0) net.layers.push_back(Layer<T>::dropout(dropout.input));
  std::size_t width = input_dim;
  for (const auto& l : hidden.layers) {
    if (!l.has_params()) continue;
    if (l.fan_in() != width) throw ShapeError("attach_head: hidden stack does not chain");
    net.layers.push_back(l);
    width = l.fan_out();
    if (dropout.hidden > 0.0 && is_nonlinear(l.kind.type)) net.layers.push_back(Layer<T>::dropout(dropout.hidden));
  }
  net.layers.push_back(Layer<T>::dense(LayerKind::linear(), width, classes, rng));
  return net;
}

/// Mean |cosine| between weight rows of unit pairs, weighted by how often
/// the two units are active together on `x` (active: z > threshold).
template <Scalar T>
double coactive_cosine(const Layer<T>& layer, const Matrix<T>& x, double threshold) {
  const std::size_t h = layer.fan_out();
  Matrix<double> z = cast<double>(layer_transform(layer, x).first);
  Matrix<double> active(z.rows(), h);
  for (std::size_t k = 0; k < z.size(); ++k) active.values()[k] = z.values()[k] > threshold ? 1.0 : 0.0;
  Matrix<double> counts = matmul(transpose(active), active);
  Matrix<double> w = cast<double>(layer.weights);
  for (std::size_t r = 0; r < h; ++r) {
    double n = 0.0;
    for (double v : w.row(r)) n += v * v;
    n = std::sqrt(n);
    if (n > 0.0)
      for (auto& v : w.row(r)) v /= n;
  }
  Matrix<double> cos = matmul(w, transpose(w));
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = i + 1; j < h; ++j) {
      num += counts(i, j) * std::abs(cos(i, j));
      den += counts(i, j);
    }
  }
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace zlin
