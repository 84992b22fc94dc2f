// How fast a weighted sum of N non-Gaussian inputs approaches a Gaussian,
// and how the bias sets the mass of the ReLU spike at zero.
#include <cmath>
#include <cstdio>
#include <vector>

#include "zlin/probes.hpp"

int main() {
  using namespace zlin;
  const std::vector<std::size_t> ns{1, 4, 32, 256, 2048};
  Rng rng(11);
  std::vector<double> w(2048);
  for (auto& v : w) v = rng.gaussian();

  std::printf("%-12s", "N");
  for (auto n : ns) std::printf("%9zu", n);
  std::printf("\n");
  for (auto shape : {InputShape::uniform, InputShape::rademacher, InputShape::exponential}) {
    const std::vector<InputDist> dists(2048, InputDist{0.0, 1.0, shape});
    std::printf("%-12s", to_string(shape));
    for (const auto& p : clt_probe(dists, w, ns, 20000, rng)) std::printf("%9.4f", p.ks);
    std::printf("\n");
  }

  std::printf("\nReLU zero fraction for a 256-input unit (bias in units of sigma)\n");
  const std::vector<InputDist> dists(256, InputDist{0.0, 1.0, InputShape::uniform});
  std::vector<double> w256(w.begin(), w.begin() + 256);
  double var = 0.0;
  for (double v : w256) var += v * v;
  for (double b : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    const auto m = spike_mass_check(b * std::sqrt(var), w256, dists, 50000, rng);
    std::printf("  b = %+.1f sigma: empirical %.4f, predicted %.4f\n", b, m.empirical, m.predicted);
  }
}
