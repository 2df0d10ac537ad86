#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "semattnet/commands.hpp"
#include "support.hpp"

using namespace semattnet;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

RunConfig tiny_run(const fs::path& root, const fs::path& out) {
  RunConfig c = RunConfig::defaults(Preset::tiny);
  c.data_root = root.string();
  c.output_dir = out.string();
  c.synth_count = 3;
  c.synth_val_count = 2;
  c.epochs = 1;
  c.refine_epochs = 2;
  c.refine_warmup_epochs = 1;
  return c;
}

void expect_same_tensors(const Checkpoint& a, const Checkpoint& b) {
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    ASSERT_TRUE(b.tensors.count(name)) << name;
    EXPECT_EQ(t.shape(), b.tensors.at(name).shape()) << name;
    EXPECT_EQ(t.vec(), b.tensors.at(name).vec()) << name;
  }
}

}  // namespace

// ---- configuration

TEST(RunConfig, PublishedTrainingDefaults) {
  const RunConfig full = RunConfig::defaults(Preset::full);
  EXPECT_EQ(full.optimizer, "adam");
  EXPECT_DOUBLE_EQ(full.lr, 0.00128);
  EXPECT_DOUBLE_EQ(full.beta1, 0.9);
  EXPECT_DOUBLE_EQ(full.beta2, 0.99);
  EXPECT_DOUBLE_EQ(full.weight_decay, 1e-6);
  EXPECT_EQ(full.batch_size, 8);
  EXPECT_EQ(full.epochs, 60);
  EXPECT_EQ(full.refine_epochs, 95);
  EXPECT_EQ(full.crop_height, 320);
  EXPECT_EQ(full.crop_width, 1216);
  EXPECT_TRUE(full.bottom_crop);
  EXPECT_EQ(full.model_config().backbone.widths[5], 1024);

  const RunConfig tiny = RunConfig::defaults(Preset::tiny);
  EXPECT_EQ(tiny.model_config().backbone.widths[0], 4);
  EXPECT_EQ(tiny.batch_size, 1);
  EXPECT_EQ(tiny.epochs, 50);
  EXPECT_FALSE(tiny.augment);
}

TEST(RunConfig, ParseFlatKeyValueText) {
  const auto entries = parse_config_text("# comment\n\n  fusion = concat  # trailing\nlr=0.01\n");
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0], (std::pair<std::string, std::string>{"fusion", "concat"}));
  EXPECT_EQ(entries[1], (std::pair<std::string, std::string>{"lr", "0.01"}));
  EXPECT_THROW(parse_config_text("fusion concat\n"), ConfigError);
  EXPECT_THROW(read_config_file("/nonexistent/semattnet.cfg"), ConfigError);
}

TEST(RunConfig, RejectsBadKeysAndValues) {
  RunConfig c;
  EXPECT_THROW(c.set("learning_rate", "0.1"), ConfigError);
  EXPECT_THROW(c.set("lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("lr", "0.1x"), ConfigError);
  EXPECT_THROW(c.set("refinement", "maybe"), ConfigError);
  EXPECT_THROW(c.set("fusion", "multiply"), ConfigError);
  EXPECT_THROW(c.set("preset", "huge"), ConfigError);
  EXPECT_THROW(resolve_config({{"lr", "-1"}}, {}), ConfigError);
  EXPECT_THROW(resolve_config({{"batch_size", "0"}}, {}), ConfigError);
  EXPECT_THROW(resolve_config({{"optimizer", "sgd"}}, {}), ConfigError);
  for (const char* v : {"on", "true", "1"}) {
    c.set("refinement", v);
    EXPECT_TRUE(c.refinement);
  }
  for (const char* v : {"off", "false", "0"}) {
    c.set("refinement", v);
    EXPECT_FALSE(c.refinement);
  }
}

TEST(RunConfig, Precedence) {
  const RunConfig c = resolve_config({{"preset", "tiny"}, {"lr", "0.01"}, {"batch_size", "4"}},
                                     {{"lr", "0.02"}, {"preset", "full"}});
  EXPECT_EQ(c.preset, Preset::full);
  EXPECT_DOUBLE_EQ(c.lr, 0.02);
  EXPECT_EQ(c.batch_size, 4);  // file entry beats the full-preset default
  EXPECT_EQ(c.epochs, 60);     // full-preset default
  EXPECT_EQ(resolve_config({}, {}).preset, Preset::tiny);
}

TEST(RunConfig, TextRoundTrip) {
  RunConfig c = RunConfig::defaults(Preset::tiny);
  c.fusion = FusionMode::concat;
  c.lr = 0.0031;
  c.weight_decay = 3e-7;
  c.seed = 12345678901ull;
  c.output_dir = "runs/x y";
  const RunConfig back = resolve_config(parse_config_text(c.to_text()), {});
  EXPECT_EQ(back.to_text(), c.to_text());
  for (const auto& key : RunConfig::keys()) EXPECT_EQ(back.get(key), c.get(key)) << key;
}

TEST(RunConfig, EveryKeyRoundTripsThroughSetAndGet) {
  const RunConfig base = RunConfig::defaults(Preset::full);
  for (const auto& key : RunConfig::keys()) {
    RunConfig c = base;
    c.set(key, base.get(key));
    EXPECT_EQ(c.to_text(), base.to_text()) << key;
  }
}

TEST(RunConfig, SemanticInputMustMatchLayout) {
  EXPECT_THROW(resolve_config({{"branches", "cg_dg"}, {"semantic_input", "on"}}, {}), ConfigError);
  EXPECT_THROW(resolve_config({{"branches", "cg_sg_dg"}, {"semantic_input", "off"}}, {}), ConfigError);
  EXPECT_FALSE(resolve_config({{"branches", "cg_dg"}}, {}).uses_semantic());
  EXPECT_TRUE(resolve_config({{"branches", "cg_sg_dg"}, {"semantic_input", "on"}}, {}).uses_semantic());
}

TEST(RunConfig, AblationRowsAreExpressible) {
  std::set<std::string> architectures;
  for (const auto& row : kAblationRows) {
    const RunConfig c = ablation_config(row.label);
    EXPECT_EQ(c.branches, row.branches);
    EXPECT_EQ(c.fusion, row.fusion);
    EXPECT_EQ(c.refinement, row.refinement);
    EXPECT_EQ(c.uses_semantic(), row.branches == BranchLayout::cg_sg_dg);
    architectures.insert(c.architecture_hash());
  }
  EXPECT_EQ(architectures.size(), 7u);
  // Row (b): two branches, concatenation, no refinement.
  const RunConfig b = resolve_config({{"branches", "cg_dg"}, {"fusion", "concat"}, {"refinement", "off"}}, {});
  EXPECT_EQ(b.architecture(), ablation_config('b').architecture());
  EXPECT_THROW(ablation_config('h'), ConfigError);
  EXPECT_DOUBLE_EQ(kAblationPublishedRmse[5], 753.02);
  EXPECT_DOUBLE_EQ(kAblationPublishedRmse[6], 738.13);
}

// ---- checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ck");
  Checkpoint ck;
  ck.manifest = {{"epoch", 3}, {"architecture", "x"}};
  ck.tensors["a"] = random_tensor<float>({2, 3, 4, 5}, 1);
  ck.tensors["b.c"] = Tensor<float>(1, 1, 1, 1, -0.0f);
  write_checkpoint(dir.path() / "x.ck", ck);
  const auto back = read_checkpoint(dir.path() / "x.ck");
  EXPECT_EQ(back.manifest, ck.manifest);
  expect_same_tensors(back, ck);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  TempDir dir("ckbad");
  Checkpoint ck;
  ck.manifest = {{"epoch", 1}};
  ck.tensors["w"] = random_tensor<float>({1, 2, 3, 3}, 2);
  const auto good = dir.path() / "good.ck";
  write_checkpoint(good, ck);
  const std::string bytes = slurp(good);

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir.path() / name, std::ios::binary) << content;
    return dir.path() / name;
  };
  EXPECT_THROW(read_checkpoint(write("magic.ck", "NOTACKPT" + bytes.substr(8))), FormatError);
  EXPECT_THROW(read_checkpoint(write("short.ck", bytes.substr(0, bytes.size() - 7))), FormatError);
  std::string v2 = bytes;
  v2[8] = 2;
  EXPECT_THROW(read_checkpoint(write("v2.ck", v2)), VersionError);
  EXPECT_THROW(read_checkpoint(dir.path() / "missing.ck"), DataError);
}

TEST(Checkpoint, ModelStateRoundTrip) {
  Model<float> a(ModelConfig{}, 1), b(ModelConfig{}, 2);
  Checkpoint ck;
  store_to_checkpoint(a.params(), ck);
  EXPECT_EQ(load_store(b.params(), ck, true), ck.tensors.size());
  for (const auto& name : a.params().param_names())
    EXPECT_EQ(a.params().param(name).value().vec(), b.params().param(name).value().vec()) << name;
  ck.tensors.erase(ck.tensors.begin());
  EXPECT_THROW(load_store(b.params(), ck, true), VersionError);
  EXPECT_NO_THROW(load_store(b.params(), ck, false));
}

TEST(Checkpoint, ArchitectureMismatchIsAVersionError) {
  const RunConfig sam = RunConfig::defaults(Preset::tiny);
  RunConfig concat = sam;
  concat.fusion = FusionMode::concat;
  Checkpoint ck;
  ck.manifest = manifest_for(sam);
  EXPECT_NO_THROW(check_compatible(sam, ck, "x"));
  EXPECT_THROW(check_compatible(concat, ck, "x"), VersionError);
}

// ---- commands end to end

class Commands : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("commands");
    cfg_ = tiny_run(dir_->path() / "data", dir_->path() / "run");
    std::ostringstream log;
    cmd_synth_data(cfg_, log);
    train_ = cmd_train(cfg_, log);
    cfg_.checkpoint = train_.last_checkpoint;
  }
  static void TearDownTestSuite() { delete dir_; }

  static RunConfig with_output(const std::string& name) {
    RunConfig c = cfg_;
    c.output_dir = (dir_->path() / name).string();
    return c;
  }

  static TempDir* dir_;
  static RunConfig cfg_;
  static TrainSummary train_;
};
TempDir* Commands::dir_ = nullptr;
RunConfig Commands::cfg_;
TrainSummary Commands::train_;

TEST_F(Commands, SynthDataLayout) {
  const fs::path root = cfg_.data_root;
  EXPECT_EQ(count_lines(root / "train.txt"), 3u);
  EXPECT_EQ(count_lines(root / "val.txt"), 2u);
  const auto layout = DatasetLayout::open(root, "train");
  const auto s = layout.load("train_000000");
  EXPECT_EQ(s.gt_depth.shape(), (Shape{1, 1, 64, 96}));
  // Same seed, same bytes.
  TempDir other("synth2");
  RunConfig c = cfg_;
  c.data_root = (other.path() / "data").string();
  c.output_dir = (other.path() / "out").string();
  std::ostringstream log;
  cmd_synth_data(c, log);
  for (const char* f : {"train.txt", "val.txt"}) EXPECT_EQ(slurp(root / f), slurp(fs::path(c.data_root) / f));
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root);
    EXPECT_EQ(slurp(entry.path()), slurp(fs::path(c.data_root) / rel)) << rel;
  }
}

TEST_F(Commands, TrainWritesLogsCheckpointsAndStages) {
  const fs::path out = cfg_.output_dir;
  ASSERT_EQ(train_.log.size(), 3u);
  EXPECT_EQ(train_.log[0].stage, Stage::backbone);
  EXPECT_EQ(train_.log[1].stage, Stage::refine_warmup);
  EXPECT_EQ(train_.log[2].stage, Stage::joint);
  for (const auto& rec : train_.log) {
    ASSERT_TRUE(rec.val.has_value());
    EXPECT_TRUE(std::isfinite(rec.val->rmse_mm));
  }
  EXPECT_EQ(count_lines(out / "metrics.jsonl"), 3u);
  for (const char* f : {"epoch_001.ck", "epoch_002.ck", "epoch_003.ck", "last.ck"})
    EXPECT_TRUE(fs::exists(out / "checkpoints" / f)) << f;
  EXPECT_TRUE(fs::exists(out / "train_config.txt"));
  const auto ck = read_checkpoint(out / "checkpoints" / "last.ck");
  EXPECT_EQ(ck.manifest["epoch"], 3);
  EXPECT_EQ(ck.manifest["architecture"], cfg_.architecture());
}

TEST_F(Commands, WarmupEpochLeavesBackboneFixed) {
  const fs::path ckdir = fs::path(cfg_.output_dir) / "checkpoints";
  const auto before = read_checkpoint(ckdir / "epoch_001.ck");
  const auto after = read_checkpoint(ckdir / "epoch_002.ck");
  int refine_changed = 0;
  for (const auto& [name, t] : before.tensors) {
    if (name.rfind("model.backbone", 0) == 0 && name.find("running_") == std::string::npos) {
      EXPECT_EQ(t.vec(), after.tensors.at(name).vec()) << name;
    }
    if (name.rfind("model.refine", 0) == 0) refine_changed += t.vec() != after.tensors.at(name).vec();
  }
  EXPECT_GT(refine_changed, 0);
}

TEST_F(Commands, EvalIsRepeatable) {
  std::ostringstream a, b;
  const auto r1 = cmd_eval(with_output("eval1"), a);
  const auto r2 = cmd_eval(with_output("eval2"), b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(r1.samples.size(), 2u);
  EXPECT_TRUE(std::isfinite(r1.aggregate.rmse_mm));
  EXPECT_EQ(r1.aggregate.rmse_mm, r2.aggregate.rmse_mm);
  const auto report = nlohmann::json::parse(slurp(dir_->path() / "eval1" / "eval_val.json"));
  EXPECT_EQ(report["aggregate"]["count"], 2);
  EXPECT_EQ(report["samples"].size(), 2u);
  EXPECT_TRUE(fs::exists(dir_->path() / "eval1" / "eval_config.txt"));
}

TEST_F(Commands, EvalOfSavedPredictionFixtures) {
  const auto layout = DatasetLayout::open(cfg_.data_root, "val");
  const fs::path exact = dir_->path() / "pred_exact", biased = dir_->path() / "pred_biased";
  fs::create_directories(exact);
  fs::create_directories(biased);
  for (const auto& id : layout.ids) {
    auto gt = layout.load(id).gt_depth;
    save_depth_png((exact / (id + ".png")).string(), gt);
    for (auto& v : gt) v += 1.0f;
    save_depth_png((biased / (id + ".png")).string(), gt);
  }
  RunConfig c = with_output("eval_fixture");
  c.pred_dir = exact.string();
  std::ostringstream log;
  const auto zero = cmd_eval(c, log);
  EXPECT_EQ(zero.aggregate.rmse_mm, 0.0);
  EXPECT_EQ(zero.aggregate.mae_mm, 0.0);
  EXPECT_EQ(zero.aggregate.irmse_per_km, 0.0);
  EXPECT_EQ(zero.aggregate.imae_per_km, 0.0);
  c.pred_dir = biased.string();
  const auto bias = cmd_eval(c, log);
  EXPECT_NEAR(bias.aggregate.mae_mm, 1000.0, 1e-9);
  EXPECT_NEAR(bias.aggregate.rmse_mm, 1000.0, 1e-9);
}

TEST_F(Commands, InferWritesClampedPredictions) {
  RunConfig c = with_output("infer");
  std::ostringstream log;
  const auto files = cmd_infer(c, log);
  ASSERT_EQ(files.size(), 2u);
  for (const auto& f : files) {
    const auto d = load_depth_png(f);
    EXPECT_EQ(d.shape(), (Shape{1, 1, 64, 96}));
    for (float v : d) EXPECT_GE(v, kMinPredictionDepth);
  }
  c.sample = "val_000001";
  EXPECT_EQ(cmd_infer(c, log).size(), 1u);
  c.sample = "nope";
  EXPECT_THROW(cmd_infer(c, log), DataError);
  EXPECT_TRUE(fs::exists(dir_->path() / "infer" / "infer_config.txt"));
}

TEST_F(Commands, VisualizeFileContract) {
  RunConfig c = with_output("vis");
  c.sample = "val_000000";
  std::ostringstream log;
  const auto files = cmd_visualize(c, log);
  EXPECT_EQ(files.depth_files.size(), 6u);  // cg, sg, dg, fused, refined, error
  ASSERT_EQ(files.confidence_files.size(), 3u);
  for (const auto& f : files.depth_files) EXPECT_TRUE(fs::exists(f)) << f;
  std::vector<Image16> w;
  for (const auto& f : files.confidence_files) w.push_back(read_png16(f));
  for (std::size_t i = 0; i < w[0].pixels.size(); ++i) {
    double s = 0;
    for (const auto& img : w) s += img.pixels[i] / 65535.0;
    EXPECT_NEAR(s, 1.0, 1e-4) << i;
  }
  c.sample = "train_000002";  // falls back to the training split
  EXPECT_EQ(cmd_visualize(c, log).confidence_files.size(), 3u);
  c.sample = "missing";
  EXPECT_THROW(cmd_visualize(c, log), DataError);
}

TEST(Visualize, ZeroErrorIsUniformlyCool) {
  const auto s = synth_scene(3, 64, 96);
  const Image8 img = render_error_map(s.gt_depth, s.gt_depth);
  const Rgb cool = colormap(0.0);
  EXPECT_GT(cool.b, cool.r);
  for (std::size_t i = 0; i < s.gt_depth.size(); ++i) {
    EXPECT_EQ(img.pixels[3 * i], cool.r);
    EXPECT_EQ(img.pixels[3 * i + 1], cool.g);
    EXPECT_EQ(img.pixels[3 * i + 2], cool.b);
  }
  // Large errors saturate warm; invalid pixels stay black.
  Tensor<float> pred = s.gt_depth, gt = s.gt_depth;
  pred[0] += 10.0f;
  gt[1] = 0.0f;
  const Image8 warm = render_error_map(pred, gt);
  const Rgb hot = colormap(1.0);
  EXPECT_EQ(warm.pixels[0], hot.r);
  EXPECT_GT(hot.r, hot.b);
  EXPECT_EQ(warm.pixels[3] + warm.pixels[4] + warm.pixels[5], 0);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
  TempDir dir("resume");
  RunConfig c = tiny_run(dir.path() / "data", dir.path() / "full");
  c.refinement = false;
  c.epochs = 2;
  c.augment = true;
  c.crop_height = 32;
  c.crop_width = 64;
  std::ostringstream log;
  cmd_synth_data(c, log);
  const auto full = cmd_train(c, log);

  RunConfig first = c;
  first.output_dir = (dir.path() / "split").string();
  first.epochs = 1;
  const auto part = cmd_train(first, log);
  RunConfig rest = c;
  rest.output_dir = first.output_dir;
  rest.checkpoint = part.last_checkpoint;
  const auto resumed = cmd_train(rest, log);
  ASSERT_EQ(resumed.log.size(), 1u);
  EXPECT_EQ(resumed.log[0].epoch, 1);
  EXPECT_EQ(resumed.log[0].train_loss, full.log[1].train_loss);
  expect_same_tensors(read_checkpoint(full.last_checkpoint), read_checkpoint(resumed.last_checkpoint));
}

TEST(Training, NonFiniteLossAborts) {
  RunConfig c = RunConfig::defaults(Preset::tiny);
  Trainer t(c);
  std::vector<SceneSample> s{synth_scene(5, 64, 96)};
  for (auto& v : s[0].gt_depth) v *= 1e30f;
  try {
    t.step(make_batch(c, s), 0);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("l_cg="), std::string::npos) << e.what();
  }
}

TEST(Training, MissingDataIsADataError) {
  TempDir dir("nodata");
  RunConfig c = tiny_run(dir.path() / "absent", dir.path() / "out");
  std::ostringstream log;
  EXPECT_THROW(cmd_train(c, log), DataError);
}

TEST(Training, EnvironmentOverridesDataRoot) {
  TempDir dir("envroot");
  RunConfig c = tiny_run(dir.path() / "configured", dir.path() / "out");
  ::setenv(kDataRootEnv, (dir.path() / "env").c_str(), 1);
  std::ostringstream log;
  cmd_synth_data(c, log);
  ::unsetenv(kDataRootEnv);
  EXPECT_TRUE(fs::exists(dir.path() / "env" / "train.txt"));
  EXPECT_FALSE(fs::exists(dir.path() / "configured"));
}

// ---- the binary

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const char* bin = std::getenv("SEMATTNET_CLI");
    if (!bin) GTEST_SKIP() << "SEMATTNET_CLI not set";
    bin_ = bin;
  }
  int run(const std::string& args) const {
    const int status = std::system((bin_ + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string bin_;
};

TEST_F(Cli, ExitCodesByCategory) {
  TempDir dir("cli");
  const std::string root = (dir.path() / "data").string(), out = (dir.path() / "out").string();
  const std::string common = " --data_root " + root + " --output_dir " + out;
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("train --no_such_flag 1"), 2);
  EXPECT_EQ(run("train --lr abc" + common), 2);
  EXPECT_EQ(run("train --branches cg_dg --semantic_input on" + common), 2);
  EXPECT_EQ(run("train --config " + (dir.path() / "missing.cfg").string()), 2);
  EXPECT_EQ(run("train" + common), 3);  // no dataset yet
  EXPECT_EQ(run("eval" + common), 3);
  EXPECT_EQ(run("synth-data --synth_count 2 --synth_val_count 1" + common), 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "synth-data_config.txt"));
  EXPECT_EQ(run("eval" + common), 2);  // no checkpoint given

  {
    std::ofstream cfg(dir.path() / "run.cfg");
    cfg << "# two quick epochs\nepochs = 1\nrefine_epochs = 1\nrefine_warmup_epochs = 0\n";
  }
  EXPECT_EQ(run("train --config " + (dir.path() / "run.cfg").string() + common), 0);
  const std::string ck = (fs::path(out) / "checkpoints" / "last.ck").string();
  EXPECT_EQ(run("eval --checkpoint " + ck + common), 0);
  EXPECT_TRUE(fs::exists(fs::path(out) / "eval_val.json"));
  EXPECT_EQ(run("infer --checkpoint " + ck + common), 0);
  EXPECT_EQ(run("visualize --checkpoint " + ck + " --sample val_000000" + common), 0);
  EXPECT_EQ(run("eval --fusion concat --checkpoint " + ck + common), 4);
  EXPECT_EQ(run("visualize --checkpoint " + ck + " --sample nope" + common), 3);
  {
    std::ofstream junk(dir.path() / "junk.ck");
    junk << "garbage";
  }
  EXPECT_EQ(run("eval --checkpoint " + (dir.path() / "junk.ck").string() + common), 3);
  EXPECT_EQ(run("train --help"), 0);
}
