// zlin <command> --config <path> [--seed N] [--out DIR] [--precision f32|f64] [--workers K]

#include <CLI11.hpp>

#include <iostream>

#include "zlin/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Train and probe fully connected networks with linear bottlenecks and zero-bias ReLU units"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, precision, checkpoint, from_pretrained;
  std::optional<std::size_t> workers;

  for (const auto& name : zlin::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (TOML)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "overrides seed");
    sub->add_option("--out", out, "overrides out");
    sub->add_option("--precision", precision, "overrides precision")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--workers", workers, "overrides workers")->check(CLI::PositiveNumber);
    sub->add_option("--checkpoint", checkpoint, "overrides checkpoint (eval, probe)");
    sub->add_option("--from-pretrained", from_pretrained, "overrides train.from_pretrained");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    auto cfg = zlin::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    if (precision) cfg.precision = zlin::parse_precision(*precision);
    if (workers) cfg.workers = *workers;
    if (checkpoint) cfg.checkpoint = *checkpoint;
    if (from_pretrained) cfg.train.from_pretrained = *from_pretrained;
    return zlin::run_command(command, cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "zlin " << command << ": error: " << e.what() << "\n";
    return 2;
  }
}
