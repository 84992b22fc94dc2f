#pragma once

// Experiment runner behind the zlin CLI. Every command takes a resolved
// ExperimentConfig and writes its artifacts under config.out.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "zlin/checkpoint.hpp"
#include "zlin/config.hpp"
#include "zlin/data.hpp"
#include "zlin/optim.hpp"
#include "zlin/pretrain.hpp"
#include "zlin/probes.hpp"

namespace zlin {

// Independent random streams per stage, all derived from the run seed.
enum class Stream : std::uint64_t { data = 1, init = 2, pretrain = 3, train = 4, probe = 5, gradcheck = 6 };

inline Rng stream_rng(const ExperimentConfig& cfg, Stream s) {
  return Rng(cfg.seed).derive(static_cast<std::uint64_t>(s));
}

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  Dataset<double> train;  ///< model inputs, whitened when enabled
  Dataset<double> test;
  std::optional<Whitener> whitener;
  Matrix<double> raw_train;  ///< pixel-space rows, kept only for augmentation

  std::size_t input_dim() const { return train.dims(); }
};

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "gauss_mixture") return SynthKind::gauss_mixture;
  if (s == "subspace") return SynthKind::subspace;
  if (s == "cifar_like") return SynthKind::cifar_like;
  throw ParseError("data.synth_kind must be gauss_mixture, subspace or cifar_like, got '" + s + "'");
}

namespace detail {

inline std::vector<std::filesystem::path> as_paths(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

inline Dataset<double> take(const Dataset<double>& d, std::size_t n) { return n == 0 ? d : d.head(n); }

inline std::pair<Dataset<double>, Dataset<double>> load_raw(const ExperimentConfig& cfg) {
  const auto& dc = cfg.data;
  if (dc.name == "synthetic") {
    if (dc.train_size == 0) throw ParseError("data.train_size must be positive for synthetic data");
    SynthOptions opt;
    opt.kind = parse_synth_kind(dc.synth_kind);
    opt.dims = dc.dims;
    opt.classes = dc.classes;
    opt.separation = dc.separation;
    opt.subspace_dim = dc.subspace_dim;
    const Rng base = stream_rng(cfg, Stream::data);
    Rng train_rng = base.derive(1), test_rng = base.derive(2);
    opt.n = dc.train_size;
    auto train = synth_dataset(opt, train_rng);
    opt.n = dc.test_size;
    auto test = synth_dataset(opt, test_rng);
    return {std::move(train), std::move(test)};
  }
  if (dc.train_paths.empty()) throw ParseError("data.train_paths is required for " + dc.name);
  if (dc.name == "cifar10") {
    if (dc.test_paths.empty()) throw ParseError("data.test_paths is required for cifar10");
    auto train = cast_dataset<double>(load_cifar10(as_paths(dc.train_paths)));
    auto test = cast_dataset<double>(load_cifar10(as_paths(dc.test_paths)));
    return {take(train, dc.train_size), take(test, dc.test_size)};
  }
  // higgs: one file split into leading train rows and following test rows
  // unless a separate test file is given.
  std::optional<std::size_t> limit;
  if (dc.test_paths.empty() && dc.train_size > 0 && dc.test_size > 0) limit = dc.train_size + dc.test_size;
  auto all = cast_dataset<double>(load_higgs(dc.train_paths.front(), limit));
  if (!dc.test_paths.empty()) {
    auto test = cast_dataset<double>(load_higgs(dc.test_paths.front(),
                                                dc.test_size ? std::optional(dc.test_size) : std::nullopt));
    return {take(all, dc.train_size), std::move(test)};
  }
  const std::size_t n_train = dc.train_size ? std::min(dc.train_size, all.size()) : all.size() * 4 / 5;
  std::vector<std::size_t> tr(n_train), te(all.size() - n_train);
  std::iota(tr.begin(), tr.end(), std::size_t{0});
  std::iota(te.begin(), te.end(), n_train);
  return {all.subset(tr), all.subset(te)};
}

}  // namespace detail

/// Loads the configured dataset and fits preprocessing on the training split.
inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  auto [train, test] = detail::load_raw(cfg);
  const auto arch = cfg.architecture();
  if (arch.classes != train.classes)
    throw ParseError("architecture ends in " + std::to_string(arch.classes) + " classes but the data has " +
                     std::to_string(train.classes));
  PreparedData out;
  if (cfg.data.augment) {
    if (train.dims() != cifar_pixels) throw ParseError("data.augment needs 32x32x3 images");
    out.raw_train = train.features;
  }
  if (cfg.data.whiten) {
    WhitenOptions wo;
    wo.variance_fraction = cfg.data.variance_fraction;
    wo.contrast_normalize = cfg.data.contrast_normalize;
    out.whitener = fit_whitener(train.features, wo);
    train.features = out.whitener->apply<double>(train.features);
    if (test.size() > 0) test.features = out.whitener->apply<double>(test.features);
  }
  out.train = std::move(train);
  out.test = std::move(test);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  std::vector<double> sparsity;  ///< per hidden layer
  double seconds = 0.0;
};

/// metrics.csv with columns epoch,split,loss,accuracy,lr,sparsity_l1..lK,seconds.
/// Each row is flushed as soon as it is written.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::size_t hidden_layers)
      : out_(path), layers_(hidden_layers) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << "epoch,split,loss,accuracy,lr";
    for (std::size_t k = 1; k <= layers_; ++k) out_ << ",sparsity_l" << k;
    out_ << ",seconds\n" << std::flush;
  }

  void write(const MetricsRow& r) {
    if (r.sparsity.size() != layers_) throw ShapeError("metrics row has the wrong number of sparsity columns");
    char buf[64];
    out_ << r.epoch << ',' << r.split;
    for (double v : {r.loss, r.accuracy, r.lr}) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out_ << buf;
    }
    for (double v : r.sparsity) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      out_ << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.3f\n", r.seconds);
    out_ << buf << std::flush;
  }

 private:
  std::ofstream out_;
  std::size_t layers_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Eval-mode loss and accuracy, in chunks to bound memory.
template <Scalar T>
EvalResult evaluate(const Network<T>& net, const Dataset<T>& d, std::size_t workers = 1) {
  if (d.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  constexpr std::size_t chunk = 1000;
  double loss = 0.0;
  std::size_t correct = 0;
  Rng unused(0);
  for (std::size_t begin = 0; begin < d.size(); begin += chunk) {
    const std::size_t end = std::min(d.size(), begin + chunk);
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    auto part = d.subset(rows);
    auto trace = forward(net, part.features, Mode::eval, unused, workers);
    loss += cross_entropy(trace.probabilities, part.labels) * static_cast<double>(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto p = trace.probabilities.row(i);
      correct += (std::max_element(p.begin(), p.end()) - p.begin()) == part.labels[i];
    }
  }
  return {loss / static_cast<double>(d.size()), static_cast<double>(correct) / static_cast<double>(d.size())};
}

namespace detail {

template <Scalar T>
std::vector<double> sparsity_columns(const Network<T>& net, const Matrix<T>& probe, std::size_t workers) {
  std::vector<double> out;
  for (const auto& l : sparsity_probe(net, probe, 0, workers).layers) out.push_back(l.zero_fraction);
  return out;
}

template <Scalar T>
std::vector<double> layer_weight_decay(const ExperimentConfig& cfg, const Network<T>& net) {
  std::vector<std::size_t> params;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params()) params.push_back(i);
  const auto& wd = cfg.train.weight_decay;
  if (wd.size() != 1 && wd.size() != params.size())
    throw ParseError("train.weight_decay has " + std::to_string(wd.size()) + " entries for " +
                     std::to_string(params.size()) + " parameterized layers");
  std::vector<double> out(net.layers.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) out[params[k]] = wd.size() == 1 ? wd[0] : wd[k];
  return out;
}

template <Scalar T>
std::size_t hidden_count(const Network<T>& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers) n += l.has_params();
  return n == 0 ? 0 : n - 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

template <Scalar T>
Network<T> initial_network(const ExperimentConfig& cfg, std::size_t input_dim) {
  Rng rng = stream_rng(cfg, Stream::init);
  return build_network<T>(cfg.architecture(), input_dim, {cfg.model.dropout_input, cfg.model.dropout_hidden}, rng);
}

template <Scalar T>
void check_network_fits(const Network<T>& net, const PreparedData& data, const std::string& what) {
  if (net.input_dim() != data.input_dim())
    throw ShapeError(what + " expects " + std::to_string(net.input_dim()) + " inputs but the prepared data has " +
                     std::to_string(data.input_dim()));
  if (net.output_dim() != data.train.classes)
    throw ShapeError(what + " has " + std::to_string(net.output_dim()) + " outputs but the data has " +
                     std::to_string(data.train.classes) + " classes");
}

struct PretrainArtifacts {
  std::vector<AeLog> logs;
  std::optional<CgResult> head_fit;
};

/// Layer-wise autoencoder pretraining, then a fresh head (optionally fitted
/// by conjugate gradient on the frozen features).
template <Scalar T>
Network<T> pretrain_network(const ExperimentConfig& cfg, const PreparedData& data, PretrainArtifacts* artifacts = nullptr,
                            const std::function<void(std::size_t, const Network<T>&)>& on_layer = {}) {
  const auto arch = cfg.architecture();
  Rng rng = stream_rng(cfg, Stream::pretrain);
  const Matrix<T> x = cast<T>(data.train.features);
  auto stack = stack_pretrain(arch, x, pretrain_schedule(cfg, arch.hidden.size()), rng, on_layer);
  auto net = attach_head(stack.hidden, data.input_dim(), arch.classes,
                         {cfg.model.dropout_input, cfg.model.dropout_hidden}, rng);
  if (artifacts) artifacts->logs = std::move(stack.logs);
  if (cfg.pretrain.fit_head) {
    Rng unused(0);
    auto trace = forward(net, x, Mode::eval, unused, cfg.workers);
    const std::size_t head = net.layers.size() - 1;
    auto res = fit_softmax_head(net.layers[head], trace.inputs[head], data.train.labels, SoftmaxFit{});
    if (artifacts) artifacts->head_fit = res;
  }
  return net;
}

/// Minibatch SGD with momentum, step learning-rate decay and, for image
/// data, per-batch augmentation in pixel space followed by whitening.
template <Scalar T>
Network<T> train_network(const ExperimentConfig& cfg, const PreparedData& data, Network<T> net,
                         MetricsWriter* metrics = nullptr, std::ostream* log = nullptr) {
  check_network_fits(net, data, "network");
  const auto& tc = cfg.train;
  Rng rng = stream_rng(cfg, Stream::train);
  const Dataset<T> train = cast_dataset<T>(data.train);
  const Dataset<T> test = data.test.size() ? cast_dataset<T>(data.test) : Dataset<T>{};
  const Dataset<T> train_probe = train.head(tc.probe_examples);
  const Matrix<T> test_probe = test.size() ? test.head(tc.probe_examples).features : Matrix<T>();
  SgdOptimizer<T> opt(net, tc.momentum, detail::layer_weight_decay(cfg, net));
  const LrSchedule schedule{tc.lr, tc.lr_gamma, tc.lr_every};
  const bool augmenting = cfg.data.augment && !data.raw_train.empty();
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const double lr = schedule.at(epoch - 1);
    const Rng epoch_rng = rng.derive(epoch);
    Rng shuffle_rng = epoch_rng.derive(0);
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t begin = 0, step = 0; begin < order.size(); begin += tc.batch, ++step) {
      const std::size_t end = std::min(order.size(), begin + tc.batch);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Matrix<T> xb;
      if (augmenting) {
        Matrix<double> pixels = gather_rows(data.raw_train, idx);
        augment(pixels, epoch_rng.derive(1), AugmentOps{}, idx, cfg.workers);
        xb = cast<T>(data.whitener ? data.whitener->apply(pixels) : pixels);
      } else {
        xb = gather_rows(train.features, idx);
      }
      std::vector<int> yb;
      for (auto r : idx) yb.push_back(train.labels[r]);
      auto res = batch_gradients(net, xb, yb, epoch_rng.derive(2 + step), {cfg.workers, 0});
      if (!std::isfinite(res.loss))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (loss " +
                           std::to_string(res.loss) + "); try a smaller learning rate");
      loss_sum += res.loss * static_cast<double>(idx.size());
      opt.step(net, res.grads, lr);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    // Train loss is the running minibatch objective; train accuracy is Eval
    // mode on the probe rows.
    MetricsRow tr{epoch, "train", loss_sum / static_cast<double>(train.size()),
                  evaluate(net, train_probe, cfg.workers).accuracy, lr,
                  detail::sparsity_columns(net, train_probe.features, cfg.workers), secs};
    if (metrics) metrics->write(tr);
    std::optional<EvalResult> te;
    if (test.size()) {
      te = evaluate(net, test, cfg.workers);
      if (metrics)
        metrics->write({epoch, "test", te->loss, te->accuracy, lr, detail::sparsity_columns(net, test_probe, cfg.workers),
                        secs});
    }
    if (log) {
      *log << "epoch " << epoch << ": train loss " << tr.loss << " acc " << tr.accuracy;
      if (te) *log << ", test loss " << te->loss << " acc " << te->accuracy;
      *log << "\n";
    }
  }
  return net;
}

// ---------------------------------------------------------------------------
// Commands

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"prepare-data", "pretrain", "train", "eval", "probe", "gradcheck",
                                              "make-cifar-surrogate"};
  return names;
}

namespace detail {

inline std::filesystem::path out_dir(const ExperimentConfig& cfg) {
  std::filesystem::path out(cfg.out);
  std::filesystem::create_directories(out / "checkpoints");
  std::filesystem::create_directories(out / "probes");
  std::ofstream(out / "config.resolved.toml") << to_toml(cfg);
  return out;
}

template <Scalar T>
Network<T> network_for(const ExperimentConfig& cfg, const PreparedData& data, std::ostream& log) {
  if (cfg.checkpoint.empty()) {
    log << "no checkpoint given; using a freshly initialized " << cfg.model.architecture << " network\n";
    return initial_network<T>(cfg, data.input_dim());
  }
  auto net = load_checkpoint<T>(cfg.checkpoint);
  check_network_fits(net, data, "checkpoint " + cfg.checkpoint);
  return net;
}

template <Scalar T>
int run_typed(const std::string& command, const ExperimentConfig& cfg, std::ostream& log) {
  const auto out = out_dir(cfg);
  const auto data = prepare_data(cfg);
  log << "data: " << data.train.size() << " train, " << data.test.size() << " test, " << data.input_dim()
      << " input dims\n";

  if (command == "prepare-data") {
    if (data.whitener) {
      std::ofstream w(out / "whitener.zwht", std::ios::binary);
      data.whitener->save(w);
      log << "whitening keeps " << data.whitener->retained() << " of " << data.whitener->input_dim()
          << " components\n";
    }
    std::ofstream s(out / "data_summary.csv");
    s << "split,rows,input_dims,classes\n"
      << "train," << data.train.size() << ',' << data.input_dim() << ',' << data.train.classes << '\n'
      << "test," << data.test.size() << ',' << data.input_dim() << ',' << data.test.classes << '\n';
    return 0;
  }

  if (command == "pretrain") {
    PretrainArtifacts art;
    auto net = pretrain_network<T>(cfg, data, &art, [&](std::size_t i, const Network<T>& stack) {
      save_checkpoint(out / "checkpoints" / ("pretrain_layer" + std::to_string(i + 1) + ".zlin"), stack);
      log << "pretrained hidden layer " << i + 1 << "\n";
    });
    std::ofstream csv(out / "probes" / "pretrain_loss.csv");
    csv << "layer,epoch,loss\n";
    for (std::size_t l = 0; l < art.logs.size(); ++l)
      for (std::size_t e = 0; e < art.logs[l].epoch_loss.size(); ++e)
        csv << l + 1 << ',' << e + 1 << ',' << art.logs[l].epoch_loss[e] << '\n';
    if (art.head_fit) log << "head fit: loss " << art.head_fit->loss << " after " << art.head_fit->iterations << " iterations\n";
    save_checkpoint(out / "checkpoints" / "pretrained.zlin", net);
    return 0;
  }

  if (command == "train") {
    Network<T> net;
    if (!cfg.train.from_pretrained.empty()) {
      net = load_checkpoint<T>(cfg.train.from_pretrained);
      log << "starting from " << cfg.train.from_pretrained << "\n";
    } else {
      net = initial_network<T>(cfg, data.input_dim());
    }
    MetricsWriter metrics(out / "metrics.csv", detail::hidden_count(net));
    net = train_network(cfg, data, std::move(net), &metrics, &log);
    save_checkpoint(out / "checkpoints" / "final.zlin", net);
    return 0;
  }

  if (command == "eval") {
    auto net = network_for<T>(cfg, data, log);
    std::ofstream csv(out / "eval.csv");
    csv << "split,loss,accuracy\n";
    for (auto [name, d] : {std::pair{"train", &data.train}, std::pair{"test", &data.test}}) {
      if (d->size() == 0) continue;
      auto r = evaluate(net, cast_dataset<T>(*d), cfg.workers);
      csv << name << ',' << r.loss << ',' << r.accuracy << '\n';
      log << name << ": loss " << r.loss << ", accuracy " << r.accuracy << "\n";
    }
    return 0;
  }

  if (command == "probe") {
    auto net = network_for<T>(cfg, data, log);
    const auto& pc = cfg.probe;
    const auto& src = data.test.size() ? data.test : data.train;
    const auto probe = cast<T>(src.head(pc.examples).features);
    Rng rng = stream_rng(cfg, Stream::probe);

    std::ofstream sp(out / "probes" / "sparsity.csv");
    sp << "layer,depth,kind,zero_fraction\n";
    for (const auto& l : sparsity_probe(net, probe, 0, cfg.workers).layers)
      sp << l.layer << ',' << l.depth << ',' << to_string(l.kind) << ',' << l.zero_fraction << '\n';

    auto batch = cast_dataset<T>(data.train.head(pc.density_batch));
    auto dens = update_density_probe(net, batch.features, batch.labels, rng, {pc.per_case_examples});
    std::ofstream dn(out / "probes" / "density.csv");
    dn << "layer,partner,kind,batch_density,per_case_density\n";
    for (const auto& l : dens.layers)
      dn << l.layer << ",," << to_string(l.kind) << ',' << l.batch << ',' << l.per_case << '\n';
    for (const auto& p : dens.pairs)
      dn << p.nonlinear_layer << ',' << p.linear_layer << ",equivalent," << p.batch << ',' << p.per_case << '\n';

    std::ofstream hg(out / "probes" / "histogram.csv");
    hg << "layer,bin,lo,hi,count,zero_count\n";
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      if (!net.layers[i].has_params() || i + 1 == net.layers.size()) continue;
      auto h = activation_histogram(net, probe, i, pc.bins);
      for (std::size_t b = 0; b < h.counts.size(); ++b)
        hg << i << ',' << b << ',' << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << ',' << h.zero_count
           << '\n';
    }

    std::ofstream cl(out / "probes" / "clt.csv");
    cl << "n,ks\n";
    const std::size_t max_n = *std::max_element(pc.clt_n.begin(), pc.clt_n.end());
    std::vector<InputDist> dists(max_n, InputDist{0.0, 1.0, InputShape::uniform});
    std::vector<double> w(max_n);
    for (auto& v : w) v = rng.gaussian();
    for (const auto& p : clt_probe(dists, w, pc.clt_n, pc.clt_samples, rng)) cl << p.n << ',' << p.ks << '\n';
    log << "probes written to " << (out / "probes").string() << "\n";
    return 0;
  }

  throw ParseError("unknown command '" + command + "'");
}

}  // namespace detail

/// Finite-difference check of the configured architecture at F64 with
/// dropout off, on the first training rows. Returns 0 iff within tolerance.
inline int run_gradcheck(const ExperimentConfig& cfg, const PreparedData& data, std::ostream& log,
                         GradCheckResult* result = nullptr) {
  Rng rng = stream_rng(cfg, Stream::gradcheck);
  auto net = build_network<double>(cfg.architecture(), data.input_dim(), {}, rng);
  auto batch = data.train.head(cfg.gradcheck.examples);
  GradCheckOptions opt;
  opt.eps = cfg.gradcheck.eps;
  opt.coords_per_tensor = cfg.gradcheck.coords;
  opt.seed = cfg.seed;
  auto r = grad_check(net, batch.features, batch.labels, opt);
  if (result) *result = r;
  const bool ok = r.max_rel_error < cfg.gradcheck.tolerance;
  log << cfg.model.architecture << ": max relative error " << r.max_rel_error << " over " << r.checked
      << " coordinates (" << r.resampled << " resampled near kinks); " << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

/// Runs one CLI command. Returns the process exit status; fatal errors throw.
inline int run_command(const std::string& command, const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  if (std::find(command_names().begin(), command_names().end(), command) == command_names().end())
    throw ParseError("unknown command '" + command + "'");
  if (command == "make-cifar-surrogate") {
    if (cfg.data.name != "synthetic" || cfg.data.synth_kind != "cifar_like")
      throw ParseError("make-cifar-surrogate needs data.name = \"synthetic\" and data.synth_kind = \"cifar_like\"");
    const auto out = detail::out_dir(cfg);
    auto [train, test] = detail::load_raw(cfg);
    write_cifar10(out / "data_batch_1.bin", train);
    write_cifar10(out / "test_batch.bin", test);
    log << "wrote " << train.size() << " training and " << test.size() << " test images to " << out.string() << "\n";
    return 0;
  }
  if (command == "gradcheck") {
    detail::out_dir(cfg);
    return run_gradcheck(cfg, prepare_data(cfg), log);
  }
  return cfg.precision == Precision::f32 ? detail::run_typed<float>(command, cfg, log)
                                         : detail::run_typed<double>(command, cfg, log);
}

}  // namespace zlin
