#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssgd/experiment.hpp"

namespace fs = std::filesystem;

namespace ssgd {
namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ssgd_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------- dataset

TEST(Dataset, DeterministicBalancedSeedSensitive) {
  const auto a = synth_dataset<float>(11, 32, 100);
  const auto b = synth_dataset<float>(11, 32, 100);
  const auto c = synth_dataset<float>(12, 32, 100);
  ASSERT_EQ(a.size(), 100u);
  int ones = 0;
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ones += a[i].label;
    same = same && a[i].image == b[i].image && a[i].label == b[i].label;
    differs = differs || !(a[i].image == c[i].image);
  }
  EXPECT_EQ(ones, 50);
  EXPECT_TRUE(same);
  EXPECT_TRUE(differs);
}

// Label 1 puts both blobs in one half: the column mass of the two halves is
// lopsided for label 1 and balanced for label 0.
TEST(Dataset, LabelFollowsGlobalStructure) {
  const auto data = synth_dataset<double>(5, 64, 40);
  for (const auto& s : data) {
    double left = 0, right = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) (x < 32 ? left : right) += s.image(0, 0, y, x);
    const double ratio = std::max(left, right) / std::max(1e-9, std::min(left, right));
    if (s.label == 1) EXPECT_GT(ratio, 3.0);
    else EXPECT_LT(ratio, 3.0);
  }
}

TEST(Dataset, RejectsBadSizes) {
  EXPECT_THROW(synth_dataset<float>(1, 32, 3), Error);
  EXPECT_THROW(synth_dataset<float>(1, 32, 0), Error);
  EXPECT_THROW(synth_dataset<float>(1, 8, 4), Error);
}

TEST(Dataset, ThreeChannels) {
  const auto d = synth_dataset<float>(1, 16, 2, 3);
  EXPECT_EQ(d[0].image.shape(), (Shape4{1, 3, 16, 16}));
}

// -------------------------------------------------------------------- st4

TEST(St4, RoundTripBothPrecisions) {
  Rng rng(1);
  const auto f = random_tensor<float>(Shape4{2, 3, 4, 5}, rng);
  const auto d = random_tensor<double>(Shape4{1, 1, 7, 2}, rng);
  EXPECT_EQ(decode_st4<float>(encode_st4(f)), f);
  EXPECT_EQ(decode_st4<double>(encode_st4(d)), d);
  const auto dir = scratch("st4");
  write_st4(dir / "t.st4", f);
  EXPECT_EQ(read_st4<float>(dir / "t.st4"), f);
}

TEST(St4, RejectsCorruptInput) {
  Rng rng(2);
  auto bytes = encode_st4(random_tensor<float>(Shape4{1, 1, 2, 2}, rng));
  EXPECT_THROW(decode_st4<double>(bytes), Error);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_st4<float>(truncated), Error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_st4<float>(bytes), Error);
}

// ----------------------------------------------------------------- config

nlohmann::json tiny_config() {
  return nlohmann::json::parse(R"({
    "version": 1,
    "network": {"split_index": 4, "layers": [
      {"kind": "conv", "c_in": 1, "c_out": 2, "k": 3, "s": 1, "p": 1},
      {"kind": "relu"},
      {"kind": "maxpool", "k": 2, "s": 2},
      {"kind": "conv", "c_in": 2, "c_out": 2, "k": 3, "s": 1, "p": 1},
      {"kind": "flatten"},
      {"kind": "dense", "width": 4},
      {"kind": "relu"},
      {"kind": "dense", "width": 1}]},
    "image_size": 16,
    "grid": [2, 2],
    "batch_size": 2,
    "steps": 3,
    "learning_rate": 0.05,
    "seed": 3,
    "precision": "double",
    "mode": "lockstep",
    "dataset": {"train": 4, "test": 4},
    "fd": {"coords": 20}
  })");
}

TEST(Config, ParsesInlineAndNamedNetworks) {
  const auto c = config_from_json(tiny_config());
  EXPECT_EQ(c.net.layers.size(), 8u);
  EXPECT_EQ(c.net.split_index, 4u);
  EXPECT_EQ(c.precision, DType::f64);
  EXPECT_EQ(c.mode, TrainMode::lockstep);
  EXPECT_EQ(c.fd.coords, 20);
  const auto named = load_config(fs::path(SSGD_SOURCE_DIR) / "configs" / "vgg13_desk.json");
  EXPECT_EQ(named.network_name, "vgg13");
  EXPECT_EQ(named.image_size, 130);
  // the inline form of a reference network parses back to the same spec
  auto j = tiny_config();
  j["network"] = network_to_json(named.net);
  j["image_size"] = 130;
  const auto inl = config_from_json(j);
  EXPECT_EQ(inl.net.layers.size(), named.net.layers.size());
  EXPECT_EQ(inl.net.split_index, named.net.split_index);
}

TEST(Config, RejectsInvalidDocuments) {
  auto expect_bad = [](auto edit) {
    auto j = tiny_config();
    edit(j);
    EXPECT_THROW(config_from_json(j), ConfigError) << j.dump();
  };
  expect_bad([](auto& j) { j["version"] = 2; });
  expect_bad([](auto& j) { j["unknown"] = 1; });
  expect_bad([](auto& j) { j.erase("network"); });
  expect_bad([](auto& j) { j["network"] = "no-such-net"; });
  expect_bad([](auto& j) { j["image_size"] = -4; });
  expect_bad([](auto& j) { j["grid"] = {2}; });
  expect_bad([](auto& j) { j["batch_size"] = 0; });
  expect_bad([](auto& j) { j["steps"] = -1; });
  expect_bad([](auto& j) { j["learning_rate"] = 0; });
  expect_bad([](auto& j) { j["seed"] = -3; });
  expect_bad([](auto& j) { j["precision"] = "half"; });
  expect_bad([](auto& j) { j["mode"] = "adam"; });
  expect_bad([](auto& j) { j["dataset"]["train"] = 3; });
  expect_bad([](auto& j) { j["tolerances"] = {{"loss", -1}}; });
  expect_bad([](auto& j) { j["fd"]["eps"] = 0; });
  expect_bad([](auto& j) { j["network"]["layers"][0]["c_in"] = 3; });
  expect_bad([](auto& j) { j["network"]["layers"][0]["kind"] = "deconv"; });
  expect_bad([](auto& j) { j["network"]["layers"][0]["dilation"] = 2; });
  expect_bad([](auto& j) { j["network"]["split_index"] = 5; });
}

TEST(Config, MalformedFileIsConfigError) {
  const auto dir = scratch("cfg");
  std::ofstream(dir / "bad.json") << "{ \"version\": 1, ";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Config, OverridesTakePrecedence) {
  auto c = config_from_json(tiny_config());
  apply_overrides(c, Overrides{99, DType::f32, "elsewhere", 2});
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.precision, DType::f32);
  EXPECT_EQ(c.out_dir, "elsewhere");
  EXPECT_EQ(c.threads, 2);
  EXPECT_EQ(c.tolerances().loss, Tolerances::defaults(DType::f32).loss);
}

TEST(Checkpoint, RoundTrip) {
  const auto c = config_from_json(tiny_config());
  const auto params = init_params<double>(c.net, c.image_size, 4);
  const auto dir = scratch("ckpt");
  write_checkpoint(dir, params);
  EXPECT_TRUE(read_checkpoint<double>(dir, c.net, c.image_size) == params);
  EXPECT_THROW(read_checkpoint<float>(dir, c.net, c.image_size), Error);
}

// ------------------------------------------------------------- commands

ExperimentConfig quiet_config(const std::string& name, TrainMode mode, int steps) {
  auto c = config_from_json(tiny_config());
  c.mode = mode;
  c.steps = steps;
  c.out_dir = scratch(name).string();
  return c;
}

TEST(Commands, TrainZeroStepsCheckpointIsInit) {
  const auto c = quiet_config("train0", TrainMode::ssgd, 0);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(c, {out, err}), kExitOk) << err.str();
  const auto init = init_params<double>(c.net, c.image_size, c.seed);
  EXPECT_TRUE(read_checkpoint<double>(fs::path(c.out_dir) / "checkpoint", c.net, c.image_size) == init);
}

TEST(Commands, TrainRerunIsBitIdentical) {
  auto a = quiet_config("train_a", TrainMode::ssgd, 4);
  auto b = quiet_config("train_b", TrainMode::ssgd, 4);
  a.precision = b.precision = DType::f32;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train(a, {out, err}), kExitOk) << err.str();
  ASSERT_EQ(cmd_train(b, {out, err}), kExitOk) << err.str();
  const auto csv = slurp(fs::path(a.out_dir) / "metrics.csv");
  EXPECT_EQ(csv, slurp(fs::path(b.out_dir) / "metrics.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,loss,train_acc_running,peak_bytes");
  for (const auto& e : fs::directory_iterator(fs::path(a.out_dir) / "checkpoint"))
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(b.out_dir) / "checkpoint" / e.path().filename()));
}

TEST(Commands, TrainLockstepModeIsConfigError) {
  const auto c = quiet_config("train_ls", TrainMode::lockstep, 1);
  std::ostringstream out, err;
  EXPECT_EQ(run_command([&] { return cmd_train(c, {out, err}); }, err), kExitConfig);
}

TEST(Commands, SingleTileVerifyHasZeroDiffs) {
  auto c = quiet_config("verify1x1", TrainMode::lockstep, 2);
  c.rows = c.cols = 1;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_verify(c, {out, err}), kExitOk) << err.str() << out.str();
  const auto report = nlohmann::json::parse(slurp(fs::path(c.out_dir) / "verify.json"));
  for (const auto& q : report.at("initial").at("quantities")) EXPECT_EQ(q.at("max_abs").get<double>(), 0.0);
}

TEST(Commands, BenchReportsBothArms) {
  auto c = quiet_config("bench", TrainMode::ssgd, 1);
  c.bench_steps = 1;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_bench(c, {out, err}), kExitOk) << err.str();
  const auto j = nlohmann::json::parse(slurp(fs::path(c.out_dir) / "bench.json"));
  EXPECT_LT(j.at("ssgd").at("peak_bytes").get<std::uint64_t>(), j.at("sgd").at("peak_bytes").get<std::uint64_t>());
}

// -------------------------------------------------------------------- CLI

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SSGD_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

TEST(Cli, PlanReference514) {
  const auto dir = scratch("cli_plan");
  const auto log = dir / "log.txt";
  ASSERT_EQ(run_cli("plan --config " + std::string(SSGD_SOURCE_DIR) + "/configs/vgg13_514.json --out " +
                        dir.string(),
                    log),
            kExitOk)
      << slurp(log);
  EXPECT_NE(slurp(log).find("tiles 4"), std::string::npos);
  const auto plan = nlohmann::json::parse(slurp(dir / "plan.json"));
  EXPECT_EQ(plan.at("tiles").size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "memory.json"));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli_codes");
  const auto log = dir / "log.txt";
  auto cfg = [&](const nlohmann::json& j) { return "--config " + write_config(dir, j).string() + " --out " + dir.string(); };

  EXPECT_EQ(run_cli("plan " + cfg(tiny_config()), log), kExitOk) << slurp(log);

  // 1: malformed JSON, unknown flag, missing subcommand, bad precision
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_EQ(run_cli("plan --config " + (dir / "broken.json").string(), log), kExitConfig);
  EXPECT_EQ(run_cli("plan " + cfg(tiny_config()) + " --bogus", log), kExitConfig);
  EXPECT_EQ(run_cli("", log), kExitConfig);
  EXPECT_EQ(run_cli("plan " + cfg(tiny_config()) + " --precision half", log), kExitConfig);
  EXPECT_EQ(run_cli("bench --config " + (dir / "nope.json").string(), log), kExitConfig);

  // 2: grid finer than the split map
  auto j = tiny_config();
  j["grid"] = {16, 16};
  EXPECT_EQ(run_cli("plan " + cfg(j), log), kExitPlan) << slurp(log);

  // 3: zero tolerances in single precision
  j = tiny_config();
  j["precision"] = "single";
  j["tolerances"] = {{"loss", 0}, {"logit", 0}, {"split_map", 0}, {"grad_rel", 0}};
  j["fd"]["enabled"] = false;
  EXPECT_EQ(run_cli("verify " + cfg(j), log), kExitEquivalence) << slurp(log);
  EXPECT_NE(slurp(log).find("equivalence failure"), std::string::npos);

  // 4: divergence
  j = tiny_config();
  j["mode"] = "sgd";
  j["learning_rate"] = 1e30;
  j["steps"] = 20;
  EXPECT_EQ(run_cli("train " + cfg(j), log), kExitDivergence) << slurp(log);

  // 0: verify passes on the double-precision tiny config
  EXPECT_EQ(run_cli("verify " + cfg(tiny_config()), log), kExitOk) << slurp(log);
  EXPECT_TRUE(fs::exists(dir / "paired.csv"));
}

TEST(Cli, SeedOverrideChangesRun) {
  const auto dir = scratch("cli_seed");
  auto j = tiny_config();
  j["mode"] = "ssgd";
  const auto cfg = write_config(dir, j);
  const auto log = dir / "log.txt";
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "a").string(), log), kExitOk) << slurp(log);
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --seed 3 --threads 2 --out " + (dir / "b").string(), log), kExitOk);
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --seed 4 --out " + (dir / "c").string(), log), kExitOk);
  const auto a = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.csv"));
  EXPECT_NE(a, slurp(dir / "c" / "metrics.csv"));
}

}  // namespace
}  // namespace ssgd
