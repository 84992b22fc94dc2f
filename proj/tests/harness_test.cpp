#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "zlin/harness.hpp"

namespace {

namespace fs = std::filesystem;
using zlin::Activation;
using zlin::ExperimentConfig;
using zlin::Layer;
using zlin::LayerKind;
using zlin::Network;
using zlin::Rng;

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(::testing::TempDir()) / ("zlin_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

// ---------------------------------------------------------------------------
// Architecture strings

TEST(Architecture, ZLinStack) {
  auto a = zlin::parse_architecture("4000Z-1000L-4000Z-10");
  ASSERT_EQ(a.hidden.size(), 3u);
  EXPECT_EQ(a.hidden[0], (zlin::HiddenSpec{4000, Activation::zero_bias_relu}));
  EXPECT_EQ(a.hidden[1], (zlin::HiddenSpec{1000, Activation::linear}));
  EXPECT_EQ(a.hidden[2], (zlin::HiddenSpec{4000, Activation::zero_bias_relu}));
  EXPECT_EQ(a.classes, 10u);
}

TEST(Architecture, HiggsStack) {
  auto a = zlin::parse_architecture("800R-100L-800R-100L-2");
  ASSERT_EQ(a.hidden.size(), 4u);
  EXPECT_EQ(a.hidden[3], (zlin::HiddenSpec{100, Activation::linear}));
  EXPECT_EQ(a.classes, 2u);
  EXPECT_EQ(zlin::count_params(a, 27), 27u * 800 + 800 + 800u * 100 + 100 + 100u * 800 + 800 + 800u * 100 + 100 + 100u * 2 + 2);
}

TEST(Architecture, ClassifierOnly) {
  auto a = zlin::parse_architecture("10");
  EXPECT_TRUE(a.hidden.empty());
  EXPECT_EQ(a.classes, 10u);
}

TEST(Architecture, FormatRoundTrip) {
  for (const char* s : {"4000Z-1000L-4000Z-10", "800R-100L-800R-100L-2", "10"})
    EXPECT_EQ(zlin::format_architecture(zlin::parse_architecture(s)), s);
}

void expect_parse_error(const std::string& spec, const std::string& needle) {
  try {
    zlin::parse_architecture(spec);
    ADD_FAILURE() << spec << " parsed";
  } catch (const zlin::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(Architecture, ErrorsNameTheToken) {
  expect_parse_error("4000Z-1000X-10", "token 2 ('1000X') at column 7: unknown kind 'X'");
  expect_parse_error("4000Z-0L-10", "token 2 ('0L') at column 7: zero size");
  expect_parse_error("4000Z-10Z", "token 2");
  expect_parse_error("4000Z--10", "token 2 ('') at column 7: expected a unit count");
  expect_parse_error("Z-10", "token 1");
  expect_parse_error("10-", "token 1");
  expect_parse_error("4000ZZ-10", "one kind letter");
  expect_parse_error("", "empty");
}

// ---------------------------------------------------------------------------
// Config

constexpr const char* minimal = R"(
seed = 7
[data]
name = "synthetic"
train_size = 100
[model]
architecture = "8R-2"
)";

TEST(Config, DefaultsAndOverrides) {
  auto c = zlin::parse_config(minimal);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.precision, zlin::Precision::f64);
  EXPECT_EQ(c.data.train_size, 100u);
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.pretrain.lr, std::vector<double>{0.001});
  EXPECT_EQ(c.architecture().hidden.size(), 1u);
}

TEST(Config, SnapshotReparsesToSameConfig) {
  auto c = zlin::parse_config(std::string(minimal) + R"(
[pretrain]
lr = [0.001, 0.0001]
threshold = 1.0
[train]
lr = 0.1
weight_decay = [0.5, 1e-3]
)");
  c.train.lr = 0.1 + 1e-17 * 3;  // awkward doubles must survive the text form
  c.data.separation = 1.0 / 3.0;
  const auto text = zlin::to_toml(c);
  auto back = zlin::parse_config(text);
  EXPECT_EQ(back.train.lr, c.train.lr);
  EXPECT_EQ(back.data.separation, c.data.separation);
  EXPECT_EQ(back.pretrain.lr, (std::vector<double>{0.001, 0.0001}));
  EXPECT_EQ(back.train.weight_decay, (std::vector<double>{0.5, 1e-3}));
  EXPECT_EQ(zlin::to_toml(back), text);
}

TEST(Config, RejectsUnknownKeysAndSections) {
  EXPECT_THROW(zlin::parse_config(std::string(minimal) + "[train]\nepoch = 3\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config(std::string(minimal) + "[trian]\nepochs = 3\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config("sed = 1\n"), zlin::ParseError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(zlin::parse_config("seed = \"one\"\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config("precision = \"f16\"\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config("[model]\narchitecture = \"8Q-2\"\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config("[train]\nepochs = -1\n"), zlin::ParseError);
  EXPECT_THROW(zlin::parse_config("[data]\nname = \"mnist\"\n"), zlin::ParseError);
  try {
    zlin::parse_config("seed = 1\n[data\n", {}, "broken.toml");
    ADD_FAILURE();
  } catch (const zlin::ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.toml:2"), std::string::npos) << e.what();
  }
}

TEST(Config, RelativePathsFollowTheConfigFile) {
  auto c = zlin::parse_config("checkpoint = \"m.zlin\"\n[data]\ntrain_paths = \"a.bin\"\ntest_paths = [\"/abs/t.bin\"]\n",
                              "/cfg/dir");
  EXPECT_EQ(c.checkpoint, "/cfg/dir/m.zlin");
  EXPECT_EQ(c.data.train_paths, std::vector<std::string>{"/cfg/dir/a.bin"});
  EXPECT_EQ(c.data.test_paths, std::vector<std::string>{"/abs/t.bin"});
}

TEST(Config, PretrainScheduleBroadcasts) {
  auto c = zlin::parse_config("[pretrain]\nlr = [0.001, 0.0001, 0.0001]\nepochs = 5\n");
  auto s = zlin::pretrain_schedule(c, 3);
  ASSERT_EQ(s.layers.size(), 3u);
  EXPECT_EQ(s.layers[0].lr, 0.001);
  EXPECT_EQ(s.layers[2].lr, 0.0001);
  EXPECT_EQ(s.layers[2].epochs, 5u);
  EXPECT_THROW(zlin::pretrain_schedule(c, 2), zlin::ParseError);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
Network<T> sample_network(Rng& rng) {
  auto net = zlin::build_network<T>(zlin::parse_architecture("12Z-4L-9R-3"), 6, {0.2, 0.5}, rng);
  for (auto& l : net.layers) {
    if (!l.has_params()) continue;
    if (l.trains_bias())
      for (auto& b : l.bias) b = static_cast<T>(rng.gaussian());
    zlin::Standardization<T> s;
    for (std::size_t i = 0; i < l.fan_out(); ++i) {
      s.mean.push_back(static_cast<T>(rng.gaussian()));
      s.inv_std.push_back(static_cast<T>(rng.uniform(0.1, 3.0)));
    }
    l.standardize = s;
  }
  net.layers[1].kind = LayerKind::zero_bias_relu(1.0 / 3.0);
  net.layers.back().standardize.reset();
  return net;
}

template <class T>
void round_trip_bitwise() {
  Rng rng(1);
  auto net = sample_network<T>(rng);
  std::stringstream ss;
  zlin::save_checkpoint(ss, net);
  const std::string bytes = ss.str();
  auto back = zlin::load_checkpoint<T>(ss);
  ASSERT_EQ(back.layers.size(), net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& a = net.layers[i];
    const auto& b = back.layers[i];
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.weights.shape(), b.weights.shape());
    EXPECT_EQ(0, std::memcmp(a.weights.data(), b.weights.data(), a.weights.size() * sizeof(T)));
    EXPECT_EQ(0, std::memcmp(a.bias.data(), b.bias.data(), a.bias.size() * sizeof(T)));
    ASSERT_EQ(a.standardize.has_value(), b.standardize.has_value());
    if (a.standardize) {
      EXPECT_EQ(0, std::memcmp(a.standardize->mean.data(), b.standardize->mean.data(), a.bias.size() * sizeof(T)));
      EXPECT_EQ(0, std::memcmp(a.standardize->inv_std.data(), b.standardize->inv_std.data(), a.bias.size() * sizeof(T)));
    }
  }
  std::stringstream again;
  zlin::save_checkpoint(again, back);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Checkpoint, RoundTripIsBitExactF64) { round_trip_bitwise<double>(); }
TEST(Checkpoint, RoundTripIsBitExactF32) { round_trip_bitwise<float>(); }

TEST(Checkpoint, EmptyNetworkIsHeaderOnly) {
  std::stringstream ss;
  zlin::save_checkpoint(ss, Network<double>{});
  EXPECT_EQ(ss.str().size(), 4u + 2u + 1u + 4u);
  EXPECT_TRUE(zlin::load_checkpoint<double>(ss).layers.empty());
}

TEST(Checkpoint, CrossPrecisionLoadConverts) {
  Rng rng(2);
  auto net = sample_network<float>(rng);
  std::stringstream ss;
  zlin::save_checkpoint(ss, net);
  auto wide = zlin::load_checkpoint<double>(ss);
  EXPECT_EQ(zlin::cast_network<float>(wide), net);
}

std::string error_of(const std::string& bytes) {
  std::stringstream ss(bytes);
  try {
    zlin::load_checkpoint<double>(ss);
  } catch (const zlin::FormatError& e) {
    return e.what();
  }
  return "";
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  Rng rng(3);
  std::stringstream ss;
  zlin::save_checkpoint(ss, sample_network<double>(rng));
  std::string good = ss.str();

  std::string bad = good;
  bad[0] = 'X';
  EXPECT_NE(error_of(bad).find("bad magic"), std::string::npos);
  bad = good;
  bad[4] = 9;
  EXPECT_NE(error_of(bad).find("unsupported checkpoint version 9"), std::string::npos);
  bad = good;
  bad[6] = 2;
  EXPECT_NE(error_of(bad).find("scalar width"), std::string::npos);
  EXPECT_NE(error_of(good.substr(0, good.size() - 5)).find("truncated at byte offset"), std::string::npos);
  EXPECT_NE(error_of(good + "x").find("trailing"), std::string::npos);
  bad = good;
  bad[11] = 42;  // first layer kind
  EXPECT_NE(error_of(bad).find("unknown kind 42"), std::string::npos);
}

TEST(Checkpoint, FileHelpers) {
  auto dir = scratch("ckpt");
  Rng rng(4);
  auto net = sample_network<double>(rng);
  zlin::save_checkpoint(dir / "m.zlin", net);
  EXPECT_EQ(zlin::load_checkpoint<double>(dir / "m.zlin"), net);
  EXPECT_THROW(zlin::load_checkpoint<double>(dir / "missing.zlin"), std::runtime_error);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, HeaderAndFlushedRows) {
  auto dir = scratch("metrics");
  zlin::MetricsWriter w(dir / "metrics.csv", 2);
  EXPECT_EQ(lines(dir / "metrics.csv"),
            std::vector<std::string>{"epoch,split,loss,accuracy,lr,sparsity_l1,sparsity_l2,seconds"});
  w.write({1, "train", 0.5, 0.75, 0.01, {0.5, 0.25}, 1.25});
  // Readable before the writer goes away.
  auto l = lines(dir / "metrics.csv");
  ASSERT_EQ(l.size(), 2u);
  EXPECT_EQ(l[1], "1,train,0.5,0.75,0.01,0.500000,0.250000,1.250");
  EXPECT_THROW(w.write({2, "train", 0, 0, 0, {0.5}, 0}), zlin::ShapeError);
}

// ---------------------------------------------------------------------------
// Commands

ExperimentConfig mixture_config(const fs::path& out, const std::string& arch, std::size_t classes, double sep) {
  auto c = zlin::parse_config("");
  c.out = out.string();
  c.data.name = "synthetic";
  c.data.synth_kind = "gauss_mixture";
  c.data.dims = 10;
  c.data.classes = classes;
  c.data.separation = sep;
  c.data.train_size = 500;
  c.data.test_size = 200;
  c.data.whiten = false;
  c.model.architecture = arch;
  c.train.epochs = 20;
  c.train.lr = 0.05;
  c.train.batch = 50;
  c.train.probe_examples = 200;
  return c;
}

TEST(Run, GradcheckPassesOnDeskArchitecture) {
  auto c = mixture_config(scratch("gc"), "24Z-6L-24Z-3", 3, 4.0);
  std::ostringstream log;
  EXPECT_EQ(zlin::run_command("gradcheck", c, log), 0) << log.str();
  EXPECT_NE(log.str().find("max relative error"), std::string::npos);
}

TEST(Run, UntrainedSoftmaxIsAtChance) {
  auto c = mixture_config(scratch("chance"), "10", 10, 0.0);
  c.data.test_size = 5000;
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("eval", c, log), 0);
  auto l = lines(fs::path(c.out) / "eval.csv");
  ASSERT_EQ(l.size(), 3u);
  auto f = split(l[2]);
  EXPECT_EQ(f[0], "test");
  EXPECT_NEAR(std::stod(f[2]), 0.10, 0.02);
}

TEST(Run, TrainsSeparableDataAndWritesArtifacts) {
  auto c = mixture_config(scratch("train"), "16R-2", 2, 8.0);
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("train", c, log), 0);
  const fs::path out(c.out);
  auto l = lines(out / "metrics.csv");
  EXPECT_EQ(l[0], "epoch,split,loss,accuracy,lr,sparsity_l1,seconds");
  ASSERT_EQ(l.size(), 1u + 2u * 20u);
  auto last_train = split(l[l.size() - 2]);
  EXPECT_EQ(last_train[0], "20");
  EXPECT_EQ(last_train[1], "train");
  EXPECT_GT(std::stod(last_train[3]), 0.99);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "final.zlin"));
  EXPECT_EQ(zlin::parse_config(slurp(out / "config.resolved.toml")).model.architecture, "16R-2");

  // The trained checkpoint evaluates to the same test accuracy.
  c.checkpoint = (out / "checkpoints" / "final.zlin").string();
  ASSERT_EQ(zlin::run_command("eval", c, log), 0);
  auto e = split(lines(out / "eval.csv")[2]);
  EXPECT_EQ(std::stod(e[2]), std::stod(split(l.back())[3]));
}

std::string without_seconds(const fs::path& metrics) {
  std::string out;
  for (const auto& line : lines(metrics)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

TEST(Run, IdenticalConfigAndSeedGiveIdenticalRuns) {
  auto a = mixture_config(scratch("det_a"), "12Z-4L-12Z-3", 3, 3.0);
  a.train.epochs = 4;
  a.model.dropout_hidden = 0.5;
  auto b = a;
  b.out = scratch("det_b").string();
  auto w = a;
  w.out = scratch("det_w").string();
  w.workers = 3;
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("train", a, log), 0);
  ASSERT_EQ(zlin::run_command("train", b, log), 0);
  ASSERT_EQ(zlin::run_command("train", w, log), 0);
  EXPECT_EQ(without_seconds(fs::path(a.out) / "metrics.csv"), without_seconds(fs::path(b.out) / "metrics.csv"));
  EXPECT_EQ(without_seconds(fs::path(a.out) / "metrics.csv"), without_seconds(fs::path(w.out) / "metrics.csv"));
  EXPECT_EQ(slurp(fs::path(a.out) / "checkpoints/final.zlin"), slurp(fs::path(b.out) / "checkpoints/final.zlin"));

  // The snapshot alone reproduces the run.
  auto snap = zlin::load_config(fs::path(a.out) / "config.resolved.toml");
  snap.out = scratch("det_snap").string();
  ASSERT_EQ(zlin::run_command("train", snap, log), 0);
  EXPECT_EQ(slurp(fs::path(a.out) / "checkpoints/final.zlin"), slurp(fs::path(snap.out) / "checkpoints/final.zlin"));

  auto other = a;
  other.seed = 2;
  other.out = scratch("det_c").string();
  ASSERT_EQ(zlin::run_command("train", other, log), 0);
  EXPECT_NE(without_seconds(fs::path(a.out) / "metrics.csv"), without_seconds(fs::path(other.out) / "metrics.csv"));
}

TEST(Run, PretrainThenFineTune) {
  auto c = mixture_config(scratch("pre"), "16Z-4L-2", 2, 6.0);
  c.data.whiten = true;
  c.pretrain.epochs = {3};
  c.pretrain.fit_head = true;
  c.train.epochs = 3;
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("pretrain", c, log), 0) << log.str();
  const fs::path out(c.out);
  EXPECT_TRUE(fs::exists(out / "checkpoints/pretrain_layer1.zlin"));
  EXPECT_TRUE(fs::exists(out / "checkpoints/pretrain_layer2.zlin"));
  auto net = zlin::load_checkpoint<double>(out / "checkpoints/pretrained.zlin");
  EXPECT_EQ(net.layers[0].kind, LayerKind::zero_bias_relu(0.0));
  EXPECT_TRUE(net.layers[0].standardize.has_value());
  EXPECT_EQ(lines(out / "probes/pretrain_loss.csv").size(), 1u + 2u * 3u);

  c.train.from_pretrained = (out / "checkpoints/pretrained.zlin").string();
  ASSERT_EQ(zlin::run_command("train", c, log), 0) << log.str();
  EXPECT_NE(log.str().find("starting from"), std::string::npos);
  EXPECT_EQ(lines(out / "metrics.csv")[0], "epoch,split,loss,accuracy,lr,sparsity_l1,sparsity_l2,seconds");

  // A checkpoint for different data is refused.
  auto wrong = mixture_config(scratch("pre_wrong"), "16Z-4L-2", 2, 6.0);
  wrong.data.dims = 7;
  wrong.train.from_pretrained = c.train.from_pretrained;
  EXPECT_THROW(zlin::run_command("train", wrong, log), zlin::ShapeError);
}

TEST(Run, ProbeWritesOneCsvPerKind) {
  auto c = mixture_config(scratch("probe"), "16Z-4L-16R-3", 3, 3.0);
  c.probe.examples = 100;
  c.probe.clt_n = {1, 64};
  c.probe.clt_samples = 2000;
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("probe", c, log), 0);
  const fs::path p = fs::path(c.out) / "probes";
  EXPECT_EQ(lines(p / "sparsity.csv").size(), 1u + 3u);
  EXPECT_EQ(lines(p / "sparsity.csv")[0], "layer,depth,kind,zero_fraction");
  auto dens = lines(p / "density.csv");
  EXPECT_EQ(dens.size(), 1u + 4u + 1u);
  EXPECT_EQ(split(dens.back())[2], "equivalent");
  EXPECT_EQ(lines(p / "histogram.csv").size(), 1u + 3u * 50u);
  EXPECT_EQ(lines(p / "clt.csv").size(), 3u);
}

TEST(Run, SurrogateImagesLoadThroughCifarPath) {
  auto dir = scratch("surrogate");
  auto c = zlin::parse_config("");
  c.out = dir.string();
  c.data.synth_kind = "cifar_like";
  c.data.dims = zlin::cifar_pixels;
  c.data.classes = 10;
  c.data.train_size = 30;
  c.data.test_size = 20;
  c.model.architecture = "10";
  std::ostringstream log;
  ASSERT_EQ(zlin::run_command("make-cifar-surrogate", c, log), 0);
  EXPECT_EQ(fs::file_size(dir / "data_batch_1.bin"), 30u * zlin::cifar_record);

  auto cf = zlin::parse_config("[data]\nname = \"cifar10\"\ntrain_paths = \"data_batch_1.bin\"\n"
                               "test_paths = \"test_batch.bin\"\naugment = true\nvariance_fraction = 0.9\n"
                               "[model]\narchitecture = \"10\"\n[train]\nepochs = 1\nbatch = 10\n",
                               dir);
  cf.out = (dir / "run").string();
  ASSERT_EQ(zlin::run_command("train", cf, log), 0) << log.str();
  EXPECT_EQ(lines(dir / "run" / "metrics.csv").size(), 3u);
}

TEST(Run, FatalErrors) {
  std::ostringstream log;
  auto c = mixture_config(scratch("err"), "8R-3", 2, 1.0);
  EXPECT_THROW(zlin::run_command("train", c, log), zlin::ParseError);  // class count mismatch
  c.model.architecture = "8R-2";
  EXPECT_THROW(zlin::run_command("fly", c, log), zlin::ParseError);
  c.checkpoint = "/nonexistent/x.zlin";
  EXPECT_THROW(zlin::run_command("eval", c, log), std::runtime_error);
  auto cf = zlin::parse_config("[data]\nname = \"cifar10\"\ntrain_paths = \"/nonexistent/a.bin\"\n"
                               "test_paths = \"/nonexistent/b.bin\"\n[model]\narchitecture = \"10\"\n");
  cf.out = scratch("err2").string();
  EXPECT_THROW(zlin::run_command("prepare-data", cf, log), std::runtime_error);
  c.checkpoint.clear();
  c.train.lr = 1e6;
  c.data.separation = 50;
  EXPECT_THROW(zlin::run_command("train", c, log), zlin::NumericError);
}

}  // namespace
