#include <gtest/gtest.h>

#include <sstream>

#include "ssgd/data.hpp"
#include "ssgd/equivalence.hpp"
#include "ssgd/streaming.hpp"

namespace ssgd {
namespace {

NetworkSpec small_net() {
  NetworkSpec net;
  net.layers = {LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
                LayerSpec::conv(2, 3, 3, 2, 0), LayerSpec::relu(), LayerSpec::flatten(),
                LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(1)};
  net.split_index = 5;
  return net;
}

TEST(RelativeDifference, Definition) {
  EXPECT_EQ(relative_difference(0, 0), 0);
  EXPECT_DOUBLE_EQ(relative_difference(1, 2), 0.5);
  EXPECT_DOUBLE_EQ(relative_difference(-2, 1), 1.5);
  EXPECT_EQ(relative_difference(1e-40, 0), 1e-40 / 1e-30);
}

TEST(CompareRuns, IdenticalInputsPass) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 1);
  Rng rng(1);
  const auto img = random_tensor<double>(Shape4{1, 1, 24, 24}, rng);
  const auto a = baseline_forward_backward(net, params, img, 1);
  const auto r = compare_runs(a, a, Tolerances{0, 0, 0, 0});
  EXPECT_TRUE(r.pass);
  for (const auto& q : r.quantities) EXPECT_EQ(q.max_abs, 0) << q.name;
}

TEST(CompareRuns, SymmetricAndNamesInjectedFault) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 1);
  Rng rng(2);
  const auto img = random_tensor<double>(Shape4{1, 1, 24, 24}, rng);
  const auto a = baseline_forward_backward(net, params, img, 0);
  auto b = a;
  b.grads.layers[3].weights[4] += 1e-2;
  const auto ab = compare_runs(a, b, Tolerances{});
  const auto ba = compare_runs(b, a, Tolerances{});
  EXPECT_FALSE(ab.pass);
  ASSERT_NE(ab.first_failure(), nullptr);
  EXPECT_EQ(ab.first_failure()->name, "layer3.weights");
  ASSERT_EQ(ab.quantities.size(), ba.quantities.size());
  for (std::size_t i = 0; i < ab.quantities.size(); ++i) {
    EXPECT_EQ(ab.quantities[i].max_abs, ba.quantities[i].max_abs);
    EXPECT_EQ(ab.quantities[i].max_rel, ba.quantities[i].max_rel);
  }
}

TEST(CompareRuns, ShapeMismatchThrows) {
  RunOutputs<double> a, b;
  a.split_map = Tensor4<double>(Shape4{1, 1, 2, 2});
  b.split_map = Tensor4<double>(Shape4{1, 1, 3, 3});
  EXPECT_THROW(compare_runs(a, b, Tolerances{}), ShapeError);
}

TEST(Lockstep, ZeroStepsZeroDiffs) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 3);
  const auto data = synth_dataset<double>(3, 24, 4);
  const auto plan = build_tile_plan(net, 24, 2, 2);
  const auto r = lockstep_train(net, params, data, plan, LockstepOptions{0, 2, 0.1, 1, true});
  EXPECT_TRUE(r.steps.empty());
  EXPECT_EQ(r.final_param_max_abs_diff, 0);
  EXPECT_EQ(r.mean_loss_diff(), 0);
}

TEST(Lockstep, FiftyStepsDouble) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 4);
  const auto data = synth_dataset<double>(4, 24, 8);
  const auto plan = build_tile_plan(net, 24, 2, 2);
  const auto r = lockstep_train(net, params, data, plan, LockstepOptions{50, 2, 0.1, 1, true});
  ASSERT_EQ(r.steps.size(), 50u);
  EXPECT_LE(r.max_loss_diff(), 1e-10);
  EXPECT_LE(r.final_param_max_abs_diff, 1e-10);
}

TEST(Lockstep, FiftyStepsSingle) {
  const auto net = small_net();
  const auto params = init_params<float>(net, 24, 4);
  const auto data = synth_dataset<float>(4, 24, 8);
  const auto plan = build_tile_plan(net, 24, 2, 2);
  const auto r = lockstep_train(net, params, data, plan, LockstepOptions{50, 2, 0.1, 1, true});
  EXPECT_LE(r.max_loss_diff(), 1e-4);
}

TEST(Lockstep, RerunIsBitIdenticalAndCsvHasColumns) {
  const auto net = small_net();
  const auto params = init_params<float>(net, 24, 5);
  const auto data = synth_dataset<float>(5, 24, 4);
  const auto plan = build_tile_plan(net, 24, 2, 2);
  const LockstepOptions opt{5, 2, 0.1, 1, true};
  const auto a = lockstep_train(net, params, data, plan, opt);
  const auto b = lockstep_train(net, params, data, plan, opt);
  std::ostringstream sa, sb;
  write_paired_csv(sa, a.steps);
  write_paired_csv(sb, b.steps);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, sa.str().find('\n')), "step,loss_sgd,loss_ssgd,abs_diff,max_grad_rel_diff");
}

// ---------------------------------------------------------- finite differences

TEST(FiniteDifference, LinearModelExact) {
  NetworkSpec net;
  net.layers = {LayerSpec::conv(1, 1, 3, 1, 0), LayerSpec::flatten(), LayerSpec::dense(1)};
  net.split_index = 1;
  // no activation: the logit is linear in each parameter, leaving only the
  // O(eps^2) curvature of the loss itself
  const auto params = init_params<double>(net, 8, 6);
  Rng rng(6);
  const auto img = random_tensor<double>(Shape4{1, 1, 8, 8}, rng);
  const auto r = finite_difference_check(net, params, img, 1, 1e-5, Executor::whole_image);
  EXPECT_GE(r.coords_checked, 1);
  EXPECT_EQ(r.coords_skipped, 0);
  EXPECT_LE(r.max_rel_error, 1e-8);
}

TEST(FiniteDifference, BothExecutorsOnSmallNet) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 7);
  Rng rng(7);
  const auto img = random_tensor<double>(Shape4{1, 1, 24, 24}, rng);
  const auto plan = build_tile_plan(net, 24, 2, 2);
  const auto w = finite_difference_check(net, params, img, 0, 1e-5, Executor::whole_image);
  const auto s = finite_difference_check(net, params, img, 0, 1e-5, Executor::streaming, &plan);
  EXPECT_GE(w.coords_checked, 200);
  EXPECT_GE(s.coords_checked, 200);
  EXPECT_LE(w.max_rel_error, 1e-5);
  EXPECT_LE(s.max_rel_error, 1e-5);
}

// Central differences carry O(eps^2) truncation error: a large step shows it.
TEST(FiniteDifference, LargeStepDegrades) {
  NetworkSpec net;
  net.layers = {LayerSpec::conv(1, 1, 3, 1, 0), LayerSpec::flatten(), LayerSpec::dense(1)};
  net.split_index = 1;
  const auto params = init_params<double>(net, 6, 8);
  Rng rng(8);
  const auto img = random_tensor<double>(Shape4{1, 1, 6, 6}, rng);
  const auto fine = finite_difference_check(net, params, img, 0, 1e-5, Executor::whole_image);
  const auto coarse = finite_difference_check(net, params, img, 0, 1e-1, Executor::whole_image);
  EXPECT_GT(coarse.max_abs_error, 100 * fine.max_abs_error);
}

TEST(FiniteDifference, StreamingNeedsPlan) {
  const auto net = small_net();
  const auto params = init_params<double>(net, 24, 7);
  const Tensor4<double> img(Shape4{1, 1, 24, 24});
  EXPECT_THROW(finite_difference_check(net, params, img, 0, 1e-5, Executor::streaming), Error);
}

}  // namespace
}  // namespace ssgd
