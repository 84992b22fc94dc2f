#pragma once

// Parameter updates: heavy-ball SGD, step learning-rate decay, and
// Polak-Ribiere+ nonlinear conjugate gradients for the softmax head.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "zlin/layers.hpp"

namespace zlin {

/// v <- momentum*v - lr*(g + weight_decay*p); p <- p + v
template <Scalar T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr, double momentum,
              double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: parameter, gradient and velocity sizes differ (" + std::to_string(params.size()) +
                     ", " + std::to_string(grads.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd_step: momentum must lie in [0,1)");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double v = momentum * velocity[i] - lr * (static_cast<double>(grads[i]) + weight_decay * params[i]);
    velocity[i] = static_cast<T>(v);
    params[i] = static_cast<T>(params[i] + v);
  }
}

struct LrSchedule {
  double base = 0.01;
  double gamma = 0.5;
  std::size_t every_epochs = 100;

  /// Learning rate for a 0-based epoch: base * gamma^floor(epoch / every).
  double at(std::size_t epoch) const {
    if (every_epochs == 0) return base;
    return base * std::pow(gamma, static_cast<double>(epoch / every_epochs));
  }
};

/// Velocity buffers for every trainable parameter of a network. Zero-bias
/// layer biases are never updated.
template <Scalar T>
class SgdOptimizer {
 public:
  SgdOptimizer(const Network<T>& net, double momentum, std::vector<double> weight_decay)
      : momentum_(momentum), weight_decay_(std::move(weight_decay)), velocity_(zero_gradients(net)) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
    weight_decay_.resize(net.layers.size(), 0.0);
  }

  void step(Network<T>& net, const GradientSet<T>& grads, double lr) {
    if (grads.layers.size() != net.layers.size()) throw ShapeError("sgd: gradient set does not match network");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      auto& layer = net.layers[i];
      if (!layer.has_params()) continue;
      sgd_step<T>(layer.weights.values(), grads.layers[i].weights.values(), velocity_.layers[i].weights.values(), lr,
                  momentum_, weight_decay_[i]);
      if (layer.trains_bias()) {
        sgd_step<T>(layer.bias, grads.layers[i].bias, velocity_.layers[i].bias, lr, momentum_, 0.0);
      }
    }
  }

  const GradientSet<T>& velocity() const { return velocity_; }

 private:
  double momentum_;
  std::vector<double> weight_decay_;
  GradientSet<T> velocity_;
};

// ---------------------------------------------------------------------------
// Nonlinear conjugate gradients

struct CgOptions {
  std::size_t max_iters = 200;
  double tol = 1e-6;  // on the infinity norm of the gradient
  double armijo_c = 1e-4;
  double shrink = 0.5;
  std::size_t max_line_search_steps = 60;
  bool check_gradient = true;  // directional finite-difference check at p0
  /// Optional exact line search: step length along d from p.
  std::function<double(const std::vector<double>& p, const std::vector<double>& d)> line_search;
  std::function<void(std::size_t iteration, double loss)> on_iteration;
};

struct CgResult {
  std::vector<double> params;
  double loss = 0.0;
  double grad_inf_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  bool line_search_failed = false;  // best-so-far returned
};

namespace detail {
inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
inline double inf_norm(const std::vector<double>& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}
}  // namespace detail

/// Polak-Ribiere+ conjugate gradients with backtracking Armijo line search,
/// restarting along steepest descent whenever beta < 0 or the direction
/// stops descending. Accepted steps never increase the loss.
inline CgResult cg_minimize(const std::function<double(const std::vector<double>&)>& loss_fn,
                            const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
                            std::vector<double> p0, const CgOptions& opt = {}) {
  CgResult res;
  res.params = std::move(p0);
  res.loss = loss_fn(res.params);
  std::vector<double> g = grad_fn(res.params);
  if (g.size() != res.params.size()) throw ShapeError("cg_minimize: gradient length differs from parameters");
  res.grad_inf_norm = detail::inf_norm(g);
  if (res.grad_inf_norm <= opt.tol) {
    res.converged = true;
    return res;
  }
  if (opt.check_gradient) {
    const double gnorm = std::sqrt(detail::dot(g, g));
    const double h = 1e-6 * std::max(1.0, std::sqrt(detail::dot(res.params, res.params))) / std::max(gnorm, 1e-300);
    std::vector<double> plus = res.params, minus = res.params;
    for (std::size_t i = 0; i < g.size(); ++i) {
      plus[i] += h * g[i];
      minus[i] -= h * g[i];
    }
    const double numeric = (loss_fn(plus) - loss_fn(minus)) / (2 * h);
    const double analytic = gnorm * gnorm;
    if (std::abs(numeric - analytic) > 1e-3 * std::max(std::abs(analytic), 1e-12)) {
      throw std::invalid_argument("cg_minimize: gradient is inconsistent with loss at p0 (directional derivative " +
                                  std::to_string(analytic) + " vs finite difference " + std::to_string(numeric) + ")");
    }
  }

  std::vector<double> d(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = -g[i];
  double step0 = 1.0 / std::max(1.0, detail::inf_norm(g));
  std::vector<double> trial(g.size());
  for (res.iterations = 0; res.iterations < opt.max_iters;) {
    double gd = detail::dot(g, d);
    if (gd >= 0.0) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = -g[i];
      gd = -detail::dot(g, g);
    }
    double alpha = opt.line_search ? opt.line_search(res.params, d) : step0;
    double f_new = 0.0;
    bool accepted = false;
    for (std::size_t k = 0; k <= opt.max_line_search_steps; ++k) {
      for (std::size_t i = 0; i < g.size(); ++i) trial[i] = res.params[i] + alpha * d[i];
      if (trial == res.params) break;  // step below floating-point resolution
      f_new = loss_fn(trial);
      if (std::isfinite(f_new) && f_new <= res.loss + opt.armijo_c * alpha * gd) {
        accepted = true;
        break;
      }
      if (opt.line_search && f_new <= res.loss) {
        accepted = true;  // exact step on a flat direction
        break;
      }
      alpha *= opt.shrink;
    }
    if (!accepted) {
      res.line_search_failed = true;
      break;
    }
    res.params.swap(trial);
    res.loss = f_new;
    ++res.iterations;
    if (opt.on_iteration) opt.on_iteration(res.iterations, res.loss);
    std::vector<double> g_new = grad_fn(res.params);
    res.grad_inf_norm = detail::inf_norm(g_new);
    if (res.grad_inf_norm <= opt.tol) {
      res.converged = true;
      break;
    }
    double num = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) num += g_new[i] * (g_new[i] - g[i]);
    const double beta = std::max(0.0, num / detail::dot(g, g));
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = -g_new[i] + beta * d[i];
    g.swap(g_new);
    step0 = std::min(alpha * 2.0, 1e6);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Softmax regression head

struct SoftmaxFit {
  double l2 = 1e-3;  // loss += 0.5 * l2 * ||W||_F^2
  CgOptions cg{};
};

/// Loss and gradient of mean cross-entropy + 0.5*l2*||W||^2 for a softmax
/// classifier with parameters packed as [W (classes x dim, row-major), b].
class SoftmaxObjective {
 public:
  SoftmaxObjective(Matrix<double> features, std::vector<int> labels, std::size_t classes, double l2)
      : x_(std::move(features)), y_(std::move(labels)), classes_(classes), l2_(l2) {
    if (x_.rows() != y_.size()) throw ShapeError("softmax objective: feature/label count mismatch");
  }

  std::size_t param_count() const { return classes_ * x_.cols() + classes_; }

  double loss(const std::vector<double>& p) const {
    double total = 0.0;
    evaluate(p, &total, nullptr);
    return total;
  }
  std::vector<double> grad(const std::vector<double>& p) const {
    std::vector<double> g(param_count(), 0.0);
    double total = 0.0;
    evaluate(p, &total, &g);
    return g;
  }

 private:
  void evaluate(const std::vector<double>& p, double* loss, std::vector<double>* grad) const {
    const std::size_t d = x_.cols();
    const std::size_t n = x_.rows();
    Matrix<double> w(classes_, d, std::vector<double>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(classes_ * d)));
    const double* b = p.data() + classes_ * d;
    Matrix<double> logits = matmul(x_, transpose(w));
    double ce = 0.0;
    Matrix<double> dlogits(n, classes_);
    for (std::size_t i = 0; i < n; ++i) {
      auto z = logits.row(i);
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < classes_; ++c) zmax = std::max(zmax, z[c] + b[c]);
      double s = 0.0;
      for (std::size_t c = 0; c < classes_; ++c) s += std::exp(z[c] + b[c] - zmax);
      const auto y = static_cast<std::size_t>(y_[i]);
      ce += -(z[y] + b[y] - zmax - std::log(s));
      if (grad) {
        for (std::size_t c = 0; c < classes_; ++c) {
          dlogits(i, c) = (std::exp(z[c] + b[c] - zmax) / s - (c == y ? 1.0 : 0.0)) / static_cast<double>(n);
        }
      }
    }
    double reg = 0.0;
    for (std::size_t k = 0; k < classes_ * d; ++k) reg += p[k] * p[k];
    *loss = (n ? ce / static_cast<double>(n) : 0.0) + 0.5 * l2_ * reg;
    if (grad) {
      Matrix<double> gw = matmul(transpose(dlogits), x_);
      for (std::size_t k = 0; k < classes_ * d; ++k) (*grad)[k] = gw.values()[k] + l2_ * p[k];
      auto gb = column_sums(dlogits);
      for (std::size_t c = 0; c < classes_; ++c) (*grad)[classes_ * d + c] = gb[c];
    }
  }

  Matrix<double> x_;
  std::vector<int> y_;
  std::size_t classes_;
  double l2_;
};

/// Fits `head` (a linear layer) on frozen features with conjugate gradients,
/// starting from its current parameters.
template <Scalar T>
CgResult fit_softmax_head(Layer<T>& head, const Matrix<T>& features, std::span<const int> labels,
                          const SoftmaxFit& fit) {
  if (head.kind.type != Activation::linear) throw std::invalid_argument("fit_softmax_head: head must be linear");
  if (features.cols() != head.fan_in()) throw ShapeError("fit_softmax_head: feature width does not match head");
  SoftmaxObjective obj(cast<double>(features), std::vector<int>(labels.begin(), labels.end()), head.fan_out(),
                       fit.l2);
  std::vector<double> p0(head.weights.values().begin(), head.weights.values().end());
  p0.insert(p0.end(), head.bias.begin(), head.bias.end());
  auto res = cg_minimize([&](const auto& p) { return obj.loss(p); }, [&](const auto& p) { return obj.grad(p); },
                         std::move(p0), fit.cg);
  const std::size_t nw = head.weights.size();
  for (std::size_t k = 0; k < nw; ++k) head.weights.values()[k] = static_cast<T>(res.params[k]);
  for (std::size_t c = 0; c < head.bias.size(); ++c) head.bias[c] = static_cast<T>(res.params[nw + c]);
  return res;
}

}  // namespace zlin
