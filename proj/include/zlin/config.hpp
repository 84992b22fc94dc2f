#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "zlin/errors.hpp"
#include "zlin/layers.hpp"
#include "zlin/pretrain.hpp"

namespace zlin {

// ---------------------------------------------------------------------------
// Architecture strings: "4000Z-1000L-4000Z-10"

/// Parses dash-separated `<count><kind>` tokens (kind Z, R or L) followed by
/// the class count. Errors name the 1-based token and its column.
inline Architecture parse_architecture(std::string_view spec) {
  Architecture arch;
  if (spec.empty()) throw ParseError("architecture: empty string");
  std::size_t pos = 0, token = 0;
  while (pos <= spec.size()) {
    const std::size_t end = std::min(spec.find('-', pos), spec.size());
    const std::string_view tok = spec.substr(pos, end - pos);
    ++token;
    const bool last = end == spec.size();
    auto fail = [&](const std::string& what) {
      throw ParseError("architecture token " + std::to_string(token) + " ('" + std::string(tok) + "') at column " +
                       std::to_string(pos + 1) + ": " + what);
    };
    std::size_t units = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), units);
    if (ec != std::errc() || ptr == tok.data()) fail("expected a unit count");
    if (units == 0) fail("zero size");
    const std::string_view suffix(ptr, static_cast<std::size_t>(tok.data() + tok.size() - ptr));
    if (last) {
      if (!suffix.empty()) fail("the final token is the class count and takes no kind");
      arch.classes = units;
      break;
    }
    if (suffix.size() != 1) fail("expected one kind letter Z, R or L");
    switch (suffix[0]) {
      case 'Z': arch.hidden.push_back({units, Activation::zero_bias_relu}); break;
      case 'R': arch.hidden.push_back({units, Activation::relu}); break;
      case 'L': arch.hidden.push_back({units, Activation::linear}); break;
      default: fail(std::string("unknown kind '") + suffix[0] + "'");
    }
    pos = end + 1;
  }
  return arch;
}

inline std::string format_architecture(const Architecture& arch) {
  std::string s;
  for (const auto& h : arch.hidden) {
    s += std::to_string(h.units);
    s += h.kind == Activation::zero_bias_relu ? 'Z' : h.kind == Activation::relu ? 'R' : 'L';
    s += '-';
  }
  return s + std::to_string(arch.classes);
}

// ---------------------------------------------------------------------------
// Experiment config

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ParseError("precision must be f32 or f64, got '" + std::string(s) + "'");
}

struct DataConfig {
  std::string name = "synthetic";  ///< cifar10 | higgs | synthetic
  std::vector<std::string> train_paths;
  std::vector<std::string> test_paths;
  std::size_t train_size = 0;  ///< 0 keeps everything
  std::size_t test_size = 0;
  bool augment = false;
  bool whiten = true;
  double variance_fraction = 0.99;
  bool contrast_normalize = true;
  std::string synth_kind = "gauss_mixture";
  std::size_t dims = 2;
  std::size_t classes = 2;
  double separation = 6.0;
  std::size_t subspace_dim = 0;
};

struct ModelConfig {
  std::string architecture = "2";
  double dropout_input = 0.0;
  double dropout_hidden = 0.0;
};

/// Per-layer vectors; a single entry applies to every layer.
struct PretrainConfig {
  std::vector<std::size_t> epochs{10};
  std::vector<double> lr{0.001};
  std::vector<double> weight_decay{0.0};
  std::vector<double> threshold{1.0};
  std::vector<std::size_t> batch{100};
  double momentum = 0.9;
  bool init_from_data = false;
  bool fit_head = false;
};

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 0.01;
  double lr_gamma = 0.5;
  std::size_t lr_every = 100;
  double momentum = 0.9;
  std::size_t batch = 100;
  std::vector<double> weight_decay{0.0};  ///< per parameterized layer, or one value for all
  std::string from_pretrained;
  std::size_t probe_examples = 1000;  ///< rows used for the sparsity columns of metrics.csv
};

struct ProbeConfig {
  std::size_t examples = 1000;
  std::size_t bins = 50;
  std::size_t density_batch = 100;
  std::size_t per_case_examples = 32;
  std::vector<std::size_t> clt_n{4, 32, 256, 2048};
  std::size_t clt_samples = 20000;
};

struct GradcheckConfig {
  std::size_t examples = 8;
  double eps = 1e-5;
  std::size_t coords = 20;
  double tolerance = 1e-4;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Precision precision = Precision::f64;
  std::size_t workers = 1;
  std::string out = "run";
  std::string checkpoint;  ///< eval/probe input; empty means a freshly initialized network
  DataConfig data;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  ProbeConfig probe;
  GradcheckConfig gradcheck;

  Architecture architecture() const { return parse_architecture(model.architecture); }
};

namespace detail {

// Reads typed keys out of one table and remembers which were consumed so
// typos surface as errors instead of silently falling back to defaults.
class TableReader {
 public:
  TableReader(const toml::table* t, std::string prefix) : t_(t), prefix_(std::move(prefix)) {}

  template <class V>
  void get(const char* key, V& out) {
    const toml::node* n = find(key);
    if (!n) return;
    if constexpr (std::is_same_v<V, bool>) {
      out = need(n->value<bool>(), key, "a boolean");
    } else if constexpr (std::is_same_v<V, std::string>) {
      out = need(n->value<std::string>(), key, "a string");
    } else if constexpr (std::is_floating_point_v<V>) {
      out = need(n->value<double>(), key, "a number");
    } else {
      const auto v = need(n->value<std::int64_t>(), key, "an integer");
      if (v < 0) throw ParseError(name(key) + ": must not be negative");
      out = static_cast<V>(v);
    }
  }

  template <class V>
  void get_list(const char* key, std::vector<V>& out) {
    const toml::node* n = find(key);
    if (!n) return;
    out.clear();
    if (const auto* arr = n->as_array()) {
      for (std::size_t i = 0; i < arr->size(); ++i) out.push_back(element<V>(arr->get(i), key));
      if (out.empty() && !std::is_same_v<V, std::string>) throw ParseError(name(key) + ": empty list");
    } else {
      out.push_back(element<V>(n, key));
    }
  }

  void finish() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_) {
      if (v.is_table()) continue;
      if (!used_.count(std::string(k.str()))) throw ParseError("unknown config key '" + name(k.str()) + "'");
    }
  }

 private:
  const toml::node* find(const char* key) {
    if (!t_) return nullptr;
    used_.insert(key);
    return t_->get(key);
  }
  std::string name(std::string_view key) const { return prefix_.empty() ? std::string(key) : prefix_ + "." + std::string(key); }
  template <class V>
  V need(std::optional<V> v, const char* key, const char* what) const {
    if (!v) throw ParseError(name(key) + ": expected " + what);
    return *v;
  }
  template <class V>
  V element(const toml::node* n, const char* key) const {
    if constexpr (std::is_same_v<V, std::string>) {
      return need(n->value<std::string>(), key, "a string or list of strings");
    } else if constexpr (std::is_floating_point_v<V>) {
      return need(n->value<double>(), key, "a number or list of numbers");
    } else {
      const auto v = need(n->value<std::int64_t>(), key, "an integer or list of integers");
      if (v < 0) throw ParseError(name(key) + ": must not be negative");
      return static_cast<V>(v);
    }
  }

  const toml::table* t_;
  std::string prefix_;
  std::set<std::string> used_;
};

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || std::filesystem::path(p).is_absolute() || base.empty()) return p;
  return (base / p).lexically_normal().string();
}

template <class V>
toml::array to_array(const std::vector<V>& v) {
  toml::array a;
  for (const auto& x : v) {
    if constexpr (std::is_same_v<V, std::string> || std::is_floating_point_v<V>) {
      a.push_back(x);
    } else {
      a.push_back(static_cast<std::int64_t>(x));
    }
  }
  return a;
}

inline std::int64_t as_int(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace detail

/// Parses config text. Relative data and checkpoint paths are resolved
/// against `base_dir` (normally the config file's directory).
inline ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {},
                                     std::string_view source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.source().path.get()->c_str() << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
        << e.description();
    throw ParseError(msg.str());
  }
  for (const auto& [k, v] : root) {
    static const std::set<std::string> sections{"data", "model", "pretrain", "train", "probe", "gradcheck"};
    if (v.is_table() && !sections.count(std::string(k.str())))
      throw ParseError("unknown config section '" + std::string(k.str()) + "'");
  }

  ExperimentConfig c;
  detail::TableReader top(&root, "");
  std::string precision = to_string(c.precision);
  top.get("seed", c.seed);
  top.get("precision", precision);
  top.get("workers", c.workers);
  top.get("out", c.out);
  top.get("checkpoint", c.checkpoint);
  top.finish();
  c.precision = parse_precision(precision);
  c.checkpoint = detail::resolve_path(c.checkpoint, base_dir);

  detail::TableReader d(root["data"].as_table(), "data");
  d.get("name", c.data.name);
  d.get_list("train_paths", c.data.train_paths);
  d.get_list("test_paths", c.data.test_paths);
  d.get("train_size", c.data.train_size);
  d.get("test_size", c.data.test_size);
  d.get("augment", c.data.augment);
  d.get("whiten", c.data.whiten);
  d.get("variance_fraction", c.data.variance_fraction);
  d.get("contrast_normalize", c.data.contrast_normalize);
  d.get("synth_kind", c.data.synth_kind);
  d.get("dims", c.data.dims);
  d.get("classes", c.data.classes);
  d.get("separation", c.data.separation);
  d.get("subspace_dim", c.data.subspace_dim);
  d.finish();
  for (auto& p : c.data.train_paths) p = detail::resolve_path(p, base_dir);
  for (auto& p : c.data.test_paths) p = detail::resolve_path(p, base_dir);
  if (c.data.name != "cifar10" && c.data.name != "higgs" && c.data.name != "synthetic")
    throw ParseError("data.name must be cifar10, higgs or synthetic, got '" + c.data.name + "'");

  detail::TableReader m(root["model"].as_table(), "model");
  m.get("architecture", c.model.architecture);
  m.get("dropout_input", c.model.dropout_input);
  m.get("dropout_hidden", c.model.dropout_hidden);
  m.finish();
  (void)c.architecture();  // reject bad strings at load time

  detail::TableReader p(root["pretrain"].as_table(), "pretrain");
  p.get_list("epochs", c.pretrain.epochs);
  p.get_list("lr", c.pretrain.lr);
  p.get_list("weight_decay", c.pretrain.weight_decay);
  p.get_list("threshold", c.pretrain.threshold);
  p.get_list("batch", c.pretrain.batch);
  p.get("momentum", c.pretrain.momentum);
  p.get("init_from_data", c.pretrain.init_from_data);
  p.get("fit_head", c.pretrain.fit_head);
  p.finish();

  detail::TableReader t(root["train"].as_table(), "train");
  t.get("epochs", c.train.epochs);
  t.get("lr", c.train.lr);
  t.get("lr_gamma", c.train.lr_gamma);
  t.get("lr_every", c.train.lr_every);
  t.get("momentum", c.train.momentum);
  t.get("batch", c.train.batch);
  t.get_list("weight_decay", c.train.weight_decay);
  t.get("from_pretrained", c.train.from_pretrained);
  t.get("probe_examples", c.train.probe_examples);
  t.finish();
  c.train.from_pretrained = detail::resolve_path(c.train.from_pretrained, base_dir);
  if (c.train.batch == 0) throw ParseError("train.batch must be positive");

  detail::TableReader pr(root["probe"].as_table(), "probe");
  pr.get("examples", c.probe.examples);
  pr.get("bins", c.probe.bins);
  pr.get("density_batch", c.probe.density_batch);
  pr.get("per_case_examples", c.probe.per_case_examples);
  pr.get_list("clt_n", c.probe.clt_n);
  pr.get("clt_samples", c.probe.clt_samples);
  pr.finish();

  detail::TableReader g(root["gradcheck"].as_table(), "gradcheck");
  g.get("examples", c.gradcheck.examples);
  g.get("eps", c.gradcheck.eps);
  g.get("coords", c.gradcheck.coords);
  g.get("tolerance", c.gradcheck.tolerance);
  g.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::filesystem::absolute(path).parent_path(), path.string());
}

/// Fully resolved config as TOML. Parsing the result yields an equal config.
inline std::string to_toml(const ExperimentConfig& c) {
  using detail::as_int;
  using detail::to_array;
  toml::table root{{"seed", static_cast<std::int64_t>(c.seed)},
                   {"precision", to_string(c.precision)},
                   {"workers", as_int(c.workers)},
                   {"out", c.out},
                   {"checkpoint", c.checkpoint}};
  root.insert("data", toml::table{{"name", c.data.name},
                                  {"train_paths", to_array(c.data.train_paths)},
                                  {"test_paths", to_array(c.data.test_paths)},
                                  {"train_size", as_int(c.data.train_size)},
                                  {"test_size", as_int(c.data.test_size)},
                                  {"augment", c.data.augment},
                                  {"whiten", c.data.whiten},
                                  {"variance_fraction", c.data.variance_fraction},
                                  {"contrast_normalize", c.data.contrast_normalize},
                                  {"synth_kind", c.data.synth_kind},
                                  {"dims", as_int(c.data.dims)},
                                  {"classes", as_int(c.data.classes)},
                                  {"separation", c.data.separation},
                                  {"subspace_dim", as_int(c.data.subspace_dim)}});
  root.insert("model", toml::table{{"architecture", c.model.architecture},
                                   {"dropout_input", c.model.dropout_input},
                                   {"dropout_hidden", c.model.dropout_hidden}});
  root.insert("pretrain", toml::table{{"epochs", to_array(c.pretrain.epochs)},
                                      {"lr", to_array(c.pretrain.lr)},
                                      {"weight_decay", to_array(c.pretrain.weight_decay)},
                                      {"threshold", to_array(c.pretrain.threshold)},
                                      {"batch", to_array(c.pretrain.batch)},
                                      {"momentum", c.pretrain.momentum},
                                      {"init_from_data", c.pretrain.init_from_data},
                                      {"fit_head", c.pretrain.fit_head}});
  root.insert("train", toml::table{{"epochs", as_int(c.train.epochs)},
                                   {"lr", c.train.lr},
                                   {"lr_gamma", c.train.lr_gamma},
                                   {"lr_every", as_int(c.train.lr_every)},
                                   {"momentum", c.train.momentum},
                                   {"batch", as_int(c.train.batch)},
                                   {"weight_decay", to_array(c.train.weight_decay)},
                                   {"from_pretrained", c.train.from_pretrained},
                                   {"probe_examples", as_int(c.train.probe_examples)}});
  root.insert("probe", toml::table{{"examples", as_int(c.probe.examples)},
                                   {"bins", as_int(c.probe.bins)},
                                   {"density_batch", as_int(c.probe.density_batch)},
                                   {"per_case_examples", as_int(c.probe.per_case_examples)},
                                   {"clt_n", to_array(c.probe.clt_n)},
                                   {"clt_samples", as_int(c.probe.clt_samples)}});
  root.insert("gradcheck", toml::table{{"examples", as_int(c.gradcheck.examples)},
                                       {"eps", c.gradcheck.eps},
                                       {"coords", as_int(c.gradcheck.coords)},
                                       {"tolerance", c.gradcheck.tolerance}});
  std::ostringstream out;
  out << root << "\n";
  return out.str();
}

/// Expands the per-layer pretraining lists for `layers` hidden layers.
inline PretrainSchedule pretrain_schedule(const ExperimentConfig& c, std::size_t layers) {
  auto pick = [&](const auto& v, std::size_t i, const char* key) {
    if (v.size() != 1 && v.size() != layers)
      throw ParseError(std::string("pretrain.") + key + " has " + std::to_string(v.size()) + " entries for " +
                       std::to_string(layers) + " hidden layers");
    return v.size() == 1 ? v[0] : v[i];
  };
  PretrainSchedule s;
  s.momentum = c.pretrain.momentum;
  s.workers = c.workers;
  for (std::size_t i = 0; i < layers; ++i) {
    LayerSchedule l;
    l.epochs = pick(c.pretrain.epochs, i, "epochs");
    l.lr = pick(c.pretrain.lr, i, "lr");
    l.weight_decay = pick(c.pretrain.weight_decay, i, "weight_decay");
    l.threshold = pick(c.pretrain.threshold, i, "threshold");
    l.batch = pick(c.pretrain.batch, i, "batch");
    l.init_from_data = c.pretrain.init_from_data;
    s.layers.push_back(l);
  }
  return s;
}

}  // namespace zlin
