// A linear bottleneck followed by a ReLU layer collapses to one layer, yet
// training the pair changes that collapsed layer densely even when the ReLU
// layer's own update is sparse.
#include <cstdio>

#include "zlin/probes.hpp"

int main() {
  using namespace zlin;
  Rng rng(5);
  Network<double> net;
  net.layers.push_back(Layer<double>::dense(LayerKind::linear(), 64, 16, rng));
  net.layers.push_back(Layer<double>::dense(LayerKind::zero_bias_relu(0.0), 16, 256, rng));
  net.layers.push_back(Layer<double>::dense(LayerKind::linear(), 256, 10, rng));

  Matrix<double> x(200, 64);
  for (auto& v : x.values()) v = rng.gaussian();
  std::vector<int> y(200);
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, 9));

  const auto merged = absorb_linear(net.layers[1], net.layers[0]);
  const auto two = layer_transform(net.layers[1], layer_transform(net.layers[0], x).second).second;
  std::printf("merged layer %s, max |difference| %.2e\n", merged.weights.shape().c_str(),
              max_abs_diff(two, layer_transform(merged, x).second));

  std::printf("ReLU layer zeros: %.3f\n", sparsity_probe(net, x).layers[1].zero_fraction);
  const auto rep = update_density_probe(net, x, std::span<const int>(y), rng, {64, 1e-3});
  std::printf("%-22s %8s %8s\n", "update", "batch", "1 case");
  for (const auto& l : rep.layers)
    std::printf("layer %zu (%-14s) %8.3f %8.3f\n", l.layer, to_string(l.kind), l.batch, l.per_case);
  for (const auto& p : rep.pairs)
    std::printf("merged %zu+%zu %17.3f %8.3f\n", p.linear_layer, p.nonlinear_layer, p.batch, p.per_case);
}
