// Pretrain and fine-tune a small Z-Lin network on a Gaussian mixture, then
// print test accuracy and per-layer sparsity.
#include <cstdio>

#include "zlin/harness.hpp"

int main() {
  zlin::ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.data.name = "synthetic";
  cfg.data.synth_kind = "gauss_mixture";
  cfg.data.dims = 32;
  cfg.data.classes = 5;
  cfg.data.separation = 4.0;
  cfg.data.train_size = 2000;
  cfg.data.test_size = 500;
  cfg.model.architecture = "128Z-32L-128Z-5";
  cfg.pretrain.epochs = {3};
  cfg.pretrain.lr = {0.001, 0.0001, 0.001};
  cfg.pretrain.weight_decay = {0.0, 1.0, 0.0};
  cfg.pretrain.threshold = {1.0};
  cfg.pretrain.fit_head = true;
  cfg.train.epochs = 5;
  cfg.train.lr = 0.001;

  const auto data = zlin::prepare_data(cfg);
  auto net = zlin::pretrain_network<float>(cfg, data);
  const auto test = zlin::cast_dataset<float>(data.test);
  std::printf("after pretraining: test accuracy %.3f\n", zlin::evaluate(net, test).accuracy);

  net = zlin::train_network<float>(cfg, data, std::move(net));
  std::printf("after fine-tuning: test accuracy %.3f\n", zlin::evaluate(net, test).accuracy);

  for (const auto& l : zlin::sparsity_probe(net, test.features).layers)
    std::printf("  hidden %zu (%s): %.1f%% zeros\n", l.depth, zlin::to_string(l.kind), 100.0 * l.zero_fraction);
}
