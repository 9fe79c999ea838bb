#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <unistd.h>

#include "quadra/error.hpp"
#include "quadra/log.hpp"
#include "quadra/trainer.hpp"
#include "support/model_util.hpp"
#include "support/neuron_util.hpp"

namespace quadra {
namespace {

using namespace quadra::testing;
namespace fs = std::filesystem;

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 0.1, 10), 0.1);
  EXPECT_NEAR(cosine_lr(10, 0.1, 10, 0.001), 0.001, 1e-15);
  EXPECT_NEAR(cosine_lr(5, 0.1, 10), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(3, 0.2, 7, 0.01),
              0.01 + 0.5 * 0.19 * (1 + std::cos(std::numbers::pi * 3 / 7)), 1e-15);
}

TEST(CosineLr, PastTmaxClampsWithWarning) {
  set_warnings_to_stderr(false);
  take_warnings();
  EXPECT_DOUBLE_EQ(cosine_lr(11, 0.1, 10, 0.003), 0.003);
  EXPECT_EQ(take_warnings().size(), 1u);
  set_warnings_to_stderr(true);
}

OptimizerState scalar_state(double m, double wd) {
  OptimizerState s;
  s.momentum = m;
  s.weight_decay = wd;
  s.velocity = {Tensor::zeros({1})};
  return s;
}

TEST(Sgd, ZeroGradientLeavesParams) {
  auto s = scalar_state(0.9, 0.0);
  std::vector<Tensor> p{Tensor::full({1}, 3.0)};
  sgd_step(p, {Tensor::zeros({1})}, {"p"}, s, 0.1);
  EXPECT_EQ(p[0][0], 3.0);
}

TEST(Sgd, ScalarArithmetic) {
  auto s = scalar_state(0.0, 0.0);
  std::vector<Tensor> p{Tensor::full({1}, 1.0)};
  sgd_step(p, {Tensor::full({1}, 2.0)}, {"p"}, s, 0.1);
  EXPECT_NEAR(p[0][0], 0.8, 1e-15);
}

TEST(Sgd, TwoStepsMatchClosedForm) {
  const double m = 0.9, wd = 5e-4, lr1 = 0.1, lr2 = 0.05, p0 = 1.5, g1 = 0.3, g2 = -0.7;
  auto s = scalar_state(m, wd);
  std::vector<Tensor> p{Tensor::full({1}, p0)};
  sgd_step(p, {Tensor::full({1}, g1)}, {"p"}, s, lr1);
  sgd_step(p, {Tensor::full({1}, g2)}, {"p"}, s, lr2);
  // v1 = g1 + wd p0 ; p1 = p0 − lr1 v1 ; v2 = m v1 + g2 + wd p1 ; p2 = p1 − lr2 v2
  const double v1 = g1 + wd * p0;
  const double p1 = p0 - lr1 * v1;
  const double v2 = m * v1 + g2 + wd * p1;
  EXPECT_NEAR(p[0][0], p1 - lr2 * v2, 1e-15);
  EXPECT_NEAR(s.velocity[0][0], v2, 1e-15);
}

TEST(Sgd, NonFiniteGradientNamesTensorAndUpdatesNothing) {
  auto s = scalar_state(0.9, 0.0);
  s.velocity.push_back(Tensor::zeros({2}));
  std::vector<Tensor> p{Tensor::full({1}, 1.0), Tensor::full({2}, 1.0)};
  std::vector<Tensor> g{Tensor::full({1}, 1.0), Tensor::unchecked({2}, {0.0, std::nan("")})};
  try {
    sgd_step(p, g, {"layer0.Wa", "layer3.Wb"}, s, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer3.Wb"), std::string::npos);
  }
  EXPECT_EQ(p[0][0], 1.0);
}

ModelConfig three_conv_proposed() {
  return make_config({conv(NeuronFamily::Proposed, 1, 4, 3, 2, 1, true, true),
                      conv(NeuronFamily::Proposed, 4, 6, 3, 2, 1, true, true),
                      conv(NeuronFamily::Proposed, 6, 8, 3, 2, 1, true, true)},
                     "mnist");
}

TEST(HybridBackward, MatchesAutoOnThreeConvNet) {
  const auto cfg = three_conv_proposed();
  const auto params = init_model(cfg, 4);
  const auto ds = random_dataset("mnist", 6, 9);
  const auto a = hybrid_backward(cfg, params, ds.images, ds.labels, BackpropMode::Auto);
  const auto h = hybrid_backward(cfg, params, ds.images, ds.labels, BackpropMode::Hybrid);
  ASSERT_EQ(a.grads.size(), h.grads.size());
  EXPECT_EQ(a.loss, h.loss);
  for (std::size_t i = 0; i < a.grads.size(); ++i) {
    EXPECT_LE(max_rel_diff(a.grads[i], h.grads[i]), 1e-10) << i;
  }
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto label = layer_label(i);
    EXPECT_LT(h.ledger.layer_cached(label), a.ledger.layer_cached(label)) << label;
  }
  EXPECT_LT(h.ledger.peak_cached(), a.ledger.peak_cached());
}

TEST(HybridBackward, UnregisteredClosedFormFailsBeforeTraining) {
  unregister_symbolic(NeuronFamily::Proposed);
  const auto cfg = three_conv_proposed();
  EXPECT_THROW(check_mode_support(cfg, BackpropMode::Hybrid), ConfigError);
  EXPECT_THROW(train(cfg, init_model(cfg, 1), random_dataset("mnist", 4, 1), nullptr,
                     TrainOptions{}),
               ConfigError);
  EXPECT_NO_THROW(check_mode_support(cfg, BackpropMode::Auto));
  reset_symbolic_registry();
}

void expect_same_ledger(const MemoryLedger& sim, const MemoryLedger& real, const std::string& what) {
  ASSERT_EQ(sim.timeline().size(), real.timeline().size()) << what;
  for (std::size_t i = 0; i < sim.timeline().size(); ++i) {
    EXPECT_EQ(sim.timeline()[i].label, real.timeline()[i].label) << what << " event " << i;
    EXPECT_EQ(sim.timeline()[i].cached, real.timeline()[i].cached) << what << " event " << i;
    EXPECT_EQ(sim.timeline()[i].resident, real.timeline()[i].resident) << what << " event " << i;
  }
  ASSERT_EQ(sim.layers().size(), real.layers().size()) << what;
  for (std::size_t i = 0; i < sim.layers().size(); ++i) {
    EXPECT_EQ(sim.layers()[i].layer, real.layers()[i].layer) << what;
    EXPECT_EQ(sim.layers()[i].cached, real.layers()[i].cached) << what;
    EXPECT_EQ(sim.layers()[i].released, real.layers()[i].released) << what;
  }
  EXPECT_EQ(sim.peak_cached(), real.peak_cached()) << what;
  EXPECT_EQ(sim.peak_resident(), real.peak_resident()) << what;
}

std::vector<ModelConfig> profile_cases() {
  std::vector<ModelConfig> out;
  for (NeuronFamily f : all_families()) {
    out.push_back(make_config({fc(f, 2, 5, true, true), fc(f, 5, 3), fc(f, 3, 4, false, true)},
                              "toy2d", 2));
    if (is_t1(f)) continue;
    out.push_back(make_config({conv(f, 1, 3, 3, 2, 1, true, true),
                               conv(f, 3, 3, 3, 1, 1, false, true, LayerKind::Depthwise),
                               conv(f, 3, 4, 2, 2, 0), fc(f, 4 * 7 * 7, 5, true)},
                              "mnist"));
  }
  out.push_back(load_config(source_path("configs/reference-convnet.cfg")));
  out.push_back(load_config(source_path("configs/empty.cfg")));
  return out;
}

TEST(ProfileMemory, SimulationEqualsMeasuredTapeLedger) {
  for (const auto& cfg : profile_cases()) {
    const std::size_t batch = 3;
    const auto ds = random_dataset(cfg.train.dataset, batch, 2, cfg.head.classes);
    const auto params = init_model(cfg, 1);
    for (BackpropMode mode : {BackpropMode::Auto, BackpropMode::Hybrid}) {
      const std::string what = cfg.name + "/" + family_tag(cfg.layers.empty()
                                                               ? NeuronFamily::FirstOrder
                                                               : cfg.layers[0].family) +
                               "/" + mode_tag(mode);
      const auto real = hybrid_backward(cfg, params, ds.images, ds.labels, mode).ledger;
      expect_same_ledger(simulate_ledger(cfg, batch, mode), real, what);
    }
  }
}

TEST(ProfileMemory, ReleaseDisciplineAndConservation) {
  for (const auto& cfg : profile_cases()) {
    for (BackpropMode mode : {BackpropMode::Auto, BackpropMode::Hybrid}) {
      const auto led = simulate_ledger(cfg, 4, mode);
      const auto& tl = led.timeline();
      std::size_t i = 0;
      std::uint64_t prev = 0;
      auto backward_event = [](const std::string& l) {
        return l.rfind("backward:", 0) == 0 || l.rfind("gradient:", 0) == 0;
      };
      for (; i < tl.size() && !backward_event(tl[i].label); ++i) {
        EXPECT_GE(tl[i].cached, prev);
        prev = tl[i].cached;
      }
      EXPECT_EQ(prev, led.peak_cached());
      for (; i < tl.size(); ++i) EXPECT_EQ(tl[i].label.rfind("forward:", 0), std::string::npos);
      EXPECT_EQ(led.cached(), 0u);
      EXPECT_EQ(led.resident(), 2 * led.parameter_bytes());
      EXPECT_EQ(led.gradient_bytes(), led.parameter_bytes());
      for (const auto& l : led.layers()) EXPECT_EQ(l.cached, l.released) << l.layer;
      std::uint64_t peak = 0;
      for (const auto& e : tl) peak = std::max(peak, e.cached);
      EXPECT_EQ(peak, led.peak_cached());
    }
  }
}

TEST(ProfileMemory, HybridBelowAutoForEveryQuadraticLayer) {
  for (const auto& cfg : profile_cases()) {
    const auto p = profile_memory(cfg, 2);
    auto h = [&](std::size_t i) { return p.hybrid_ledger.layer_cached(layer_label(i)); };
    auto a = [&](std::size_t i) { return p.auto_ledger.layer_cached(layer_label(i)); };
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
      const auto label = layer_label(i);
      if (!is_quadratic(cfg.layers[i].family)) {
        EXPECT_EQ(h(i), a(i));
        continue;
      }
      // A storage block is charged to the first layer that retains it. When
      // the previous layer hands over its raw output (no batch-norm, no
      // activation), the closed form charges that output here, while the
      // tape already charged it to the producer; compare the pair instead.
      const bool raw_handover = i > 0 && !cfg.layers[i - 1].batchnorm &&
                                cfg.layers[i - 1].activation == Activation::None;
      if (raw_handover) {
        EXPECT_LT(h(i - 1) + h(i), a(i - 1) + a(i)) << cfg.name << " " << label;
      } else {
        EXPECT_LT(h(i), a(i)) << cfg.name << " " << label << " " << family_tag(cfg.layers[i].family);
      }
    }
  }
}

TEST(ProfileMemory, DoublingBatchDoublesActivationBytes) {
  for (const auto& cfg : profile_cases()) {
    // Per-channel inverse std of each batch-norm and the scalar loss do not scale.
    std::uint64_t fixed = sizeof(double);
    for (const auto& s : cfg.layers) {
      if (s.batchnorm) fixed += s.out * sizeof(double);
    }
    for (BackpropMode mode : {BackpropMode::Auto, BackpropMode::Hybrid}) {
      const auto one = simulate_ledger(cfg, 16, mode);
      const auto two = simulate_ledger(cfg, 32, mode);
      EXPECT_EQ(two.peak_cached() - fixed, 2 * (one.peak_cached() - fixed)) << cfg.name;
      EXPECT_EQ(two.parameter_bytes(), one.parameter_bytes());
    }
  }
}

TEST(ProfileMemory, EmptyModelSavesNothing) {
  const auto p = profile_memory(load_config(source_path("configs/empty.cfg")), 64);
  EXPECT_EQ(p.auto_ledger.peak_cached(), p.hybrid_ledger.peak_cached());
  EXPECT_EQ(p.saving, 0.0);
  const auto zero = profile_memory(load_config(source_path("configs/empty.cfg")), 0);
  EXPECT_EQ(zero.auto_ledger.peak_cached(), 0u);
  EXPECT_EQ(zero.saving, 0.0);
}

TEST(ProfileMemory, BudgetFlags) {
  const auto cfg = load_config(source_path("configs/reference-convnet.cfg"));
  const auto base = profile_memory(cfg, 8);
  const auto mid = (base.auto_ledger.peak_cached() + base.hybrid_ledger.peak_cached()) / 2;
  const auto p = profile_memory(cfg, 8, mid);
  EXPECT_TRUE(p.auto_over_budget);
  EXPECT_FALSE(p.hybrid_over_budget);
}

TEST(Train, FirstOrderLayerSeparatesToyData) {
  auto cfg = make_config({fc(NeuronFamily::FirstOrder, 2, 4)}, "toy2d", 2);
  cfg.train.batch = 32;
  cfg.train.lr = 0.1;
  cfg.train.epochs = 50;
  const auto ds = make_toy_2d(512, 3);
  TrainOptions opt;
  opt.mode = BackpropMode::Auto;
  auto r = train(cfg, init_model(cfg, 2), ds, nullptr, opt);
  ASSERT_FALSE(r.diverged);
  ASSERT_EQ(r.history.size(), 50u);
  std::size_t first = 0;
  for (const auto& h : r.history) {
    if (h.train_acc >= 0.99) {
      first = h.epoch;
      break;
    }
  }
  EXPECT_GT(first, 0u);
  EXPECT_GE(evaluate(cfg, r.params, ds), 0.99);
}

ModelConfig small_quadratic_net() {
  auto cfg = make_config({fc(NeuronFamily::Proposed, 2, 6, true, true),
                          fc(NeuronFamily::T4, 6, 6, true, true),
                          fc(NeuronFamily::T2And4, 6, 4, false, true)},
                         "toy2d", 2);
  cfg.train.batch = 16;
  cfg.train.lr = 0.05;
  cfg.train.epochs = 3;
  cfg.train.seed = 11;
  return cfg;
}

TEST(Train, DeterministicUnderSeed) {
  const auto cfg = small_quadratic_net();
  const auto ds = make_toy_2d(200, 1);
  const auto a = train(cfg, init_model(cfg, 7), ds, &ds);
  const auto b = train(cfg, init_model(cfg, 7), ds, &ds);
  ASSERT_EQ(a.history.size(), b.history.size());
  EXPECT_EQ(to_csv(history_table(a.history)), to_csv(history_table(b.history)));
  EXPECT_EQ(to_csv(gradient_stats_table(a.gradient_stats)),
            to_csv(gradient_stats_table(b.gradient_stats)));
}

TEST(Train, AutoAndHybridHistoriesAgree) {
  const auto cfg = small_quadratic_net();
  const auto ds = make_toy_2d(200, 1);
  TrainOptions a_opt, h_opt;
  a_opt.mode = BackpropMode::Auto;
  h_opt.mode = BackpropMode::Hybrid;
  const auto a = train(cfg, init_model(cfg, 7), ds, &ds, a_opt);
  const auto h = train(cfg, init_model(cfg, 7), ds, &ds, h_opt);
  ASSERT_EQ(a.history.size(), h.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_NEAR(a.history[i].train_loss, h.history[i].train_loss, 1e-8);
    EXPECT_NEAR(a.history[i].train_acc, h.history[i].train_acc, 1e-8);
    EXPECT_NEAR(a.history[i].test_acc, h.history[i].test_acc, 1e-8);
    EXPECT_GT(a.history[i].peak_cached, h.history[i].peak_cached);
  }
}

TEST(Train, RecordsOneRowPerEpochAndStatsForEveryParameter) {
  const auto cfg = small_quadratic_net();
  const auto ds = make_toy_2d(100, 2);
  const auto r = train(cfg, init_model(cfg, 1), ds, nullptr);
  ASSERT_EQ(r.history.size(), 3u);
  const auto n = named_parameters(r.params).size();
  EXPECT_EQ(r.gradient_stats.size(), 3 * n);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(r.history[e].epoch, e + 1);
    EXPECT_DOUBLE_EQ(r.history[e].lr, cosine_lr(e, cfg.train.lr, 3));
  }
}

TEST(Train, DivergenceKeepsLastGoodParameters) {
  set_warnings_to_stderr(false);
  auto cfg = make_config({fc(NeuronFamily::T4, 2, 8), fc(NeuronFamily::T4, 8, 8)}, "toy2d", 2);
  cfg.train.lr = 1e6;
  cfg.train.batch = 8;
  cfg.train.epochs = 20;
  const auto ds = make_toy_2d(64, 4);
  const auto r = train(cfg, init_model(cfg, 3), ds, nullptr, TrainOptions{});
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.divergence.empty());
  for (const auto& p : named_parameters(r.params)) EXPECT_TRUE(p.value.all_finite()) << p.layer;
  take_warnings();
  set_warnings_to_stderr(true);
}

TEST(Train, RunningStatisticsFollowMomentum) {
  auto cfg = make_config({fc(NeuronFamily::FirstOrder, 2, 3, true)}, "toy2d", 2);
  auto params = init_model(cfg, 1);
  const auto ds = make_toy_2d(10, 1);
  Tape tape;
  const auto rec = record_model(tape, cfg, params, ds.images, BackpropMode::Auto, true);
  // The batch-norm node's first input is the pre-normalisation activation.
  const Tensor pre = tape.value(Var{tape.node(rec.layer_outputs[0]).inputs[0]});
  update_running_stats(params, rec);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 10; ++i) mean += pre[i * 3 + c] / 10;
    for (std::size_t i = 0; i < 10; ++i) var += (pre[i * 3 + c] - mean) * (pre[i * 3 + c] - mean) / 9;
    EXPECT_NEAR(params.layers[0].running_mean[c], 0.1 * mean, 1e-12);
    EXPECT_NEAR(params.layers[0].running_var[c], 0.9 + 0.1 * var, 1e-12);
  }
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("quadra_ckpt_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsExact) {
  const auto cfg = load_config(source_path("configs/mnist-proposed-3conv.cfg"));
  auto params = init_model(cfg, 5);
  params.layers[1].running_mean = Tensor::full({16}, 0.25);
  const auto path = (dir_ / "ck.bin").string();
  save_checkpoint(cfg, params, path);
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.cfg, cfg);
  const auto a = named_parameters(params), b = named_parameters(ck.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(a[i].value, b[i].value));
  const auto ab = named_buffers(params), bb = named_buffers(ck.params);
  ASSERT_EQ(ab.size(), bb.size());
  for (std::size_t i = 0; i < ab.size(); ++i) EXPECT_TRUE(bit_equal(ab[i].value, bb[i].value));
}

TEST_F(CheckpointTest, MismatchesAreIntegrityErrors) {
  const auto cfg = load_config(source_path("configs/first-order-3conv.cfg"));
  const auto params = init_model(cfg, 5);
  const auto path = (dir_ / "ck.bin").string();
  save_checkpoint(cfg, params, path);

  {  // truncated blob
    const auto size = fs::file_size(path);
    fs::copy_file(path, path + ".orig");
    fs::resize_file(path, size - 8);
    EXPECT_THROW(load_checkpoint(path), IntegrityError);
    fs::remove(path);
    fs::rename(path + ".orig", path);
  }
  {  // flipped byte
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  save_checkpoint(cfg, params, path);
  {  // manifest config no longer matches the tensors
    auto other = cfg;
    other.layers[0].out = 9;
    other.layers[1].in = 9;
    std::ifstream in(path + ".json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto from = text.find("out=8");
    ASSERT_NE(from, std::string::npos);
    text.replace(from, 5, "out=9");
    const auto from2 = text.find("in=8");
    text.replace(from2, 4, "in=9");
    std::ofstream(path + ".json") << text;
  }
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  EXPECT_THROW(load_checkpoint((dir_ / "missing.bin").string()), IoError);
}

}  // namespace
}  // namespace quadra
