// ssgd: plan | verify | train | bench

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "ssgd/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Streaming SGD engine: tile planning, equivalence checks, training and benchmarks"};
  app.require_subcommand(1);

  std::string config_path;
  ssgd::Overrides overrides;
  std::uint64_t seed = 0;
  std::string precision, out_dir;
  int threads = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--precision", precision, "single or double")
        ->check(CLI::IsMember({"single", "double"}));
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--threads", threads, "worker threads for tile passes")
        ->check(CLI::PositiveNumber);
  };
  auto* plan = app.add_subcommand("plan", "print the tile plan and memory estimates");
  auto* verify = app.add_subcommand("verify", "check streaming against whole-image SGD");
  auto* train = app.add_subcommand("train", "train on the synthetic task");
  auto* bench = app.add_subcommand("bench", "time sgd and ssgd steps");
  for (auto* sub : {plan, verify, train, bench}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ssgd::kExitOk : ssgd::kExitConfig;
  }

  return ssgd::run_command([&] {
    auto config = ssgd::load_config(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) overrides.seed = seed;
    if (sub->count("--precision")) overrides.precision = ssgd::parse_precision(precision);
    if (sub->count("--out")) overrides.out_dir = out_dir;
    if (sub->count("--threads")) overrides.threads = threads;
    ssgd::apply_overrides(config, overrides);
    if (sub == plan) return ssgd::cmd_plan(config);
    if (sub == verify) return ssgd::cmd_verify(config);
    if (sub == train) return ssgd::cmd_train(config);
    return ssgd::cmd_bench(config);
  });
}
