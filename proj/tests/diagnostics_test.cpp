#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "quadra/diagnostics.hpp"
#include "quadra/error.hpp"
#include "support/ingest_util.hpp"
#include "support/model_util.hpp"

using namespace quadra;
using namespace quadra::testing;

namespace {

// Two-pass statistics straight from the definition.
GradientStats recompute(const Tensor& g) {
  const auto v = g.to_vector();
  const double n = static_cast<double>(v.size());
  GradientStats s;
  for (double x : v) s.mean += x / n;
  for (double x : v) {
    s.std += (x - s.mean) * (x - s.mean) / n;
    s.max_abs = std::max(s.max_abs, std::abs(x));
    s.l2 += x * x;
    if (std::abs(x) < 1e-8) s.near_zero += 1.0 / n;
  }
  s.std = std::sqrt(s.std);
  s.l2 = std::sqrt(s.l2);
  return s;
}

ModelConfig conv_model() {
  return make_config({conv(NeuronFamily::Proposed, 1, 4, 3, 1, 1, true, true),
                      conv(NeuronFamily::T4, 4, 6, 3, 1, 1, true, true),
                      conv(NeuronFamily::Proposed, 6, 3, 3, 2, 1, true, false),
                      fc(NeuronFamily::Proposed, 3 * 14 * 14, 5, true, true)},
                     "mnist");
}

// Running statistics away from the 0/1 defaults so eval-mode BN matters.
ModelParams perturbed_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_model(cfg, seed);
  std::mt19937_64 rng(seed);
  for (auto& l : p.layers) {
    if (!l.running_mean.empty()) {
      l.running_mean = random_tensor(rng, l.running_mean.shape(), -0.2, 0.2);
      l.running_var = random_tensor(rng, l.running_var.shape(), 0.5, 2.0);
      l.gamma = random_tensor(rng, l.gamma.shape(), 0.5, 1.5);
      l.beta = random_tensor(rng, l.beta.shape(), -0.1, 0.1);
    }
  }
  return p;
}

// Bilinear sampling with pixel centres at +0.5, edges clamped.
double sample(const std::vector<double>& src, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
         fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
}

}  // namespace

TEST(GradientStats, Examples) {
  const auto z = gradient_stats(Tensor({2, 3}, std::vector<double>(6, 0.0)), 1, "layer0", "Wa");
  EXPECT_EQ(z.mean, 0.0);
  EXPECT_EQ(z.std, 0.0);
  EXPECT_EQ(z.near_zero, 1.0);
  EXPECT_EQ(z.epoch, 1u);
  EXPECT_EQ(z.layer, "layer0");
  EXPECT_EQ(z.role, "Wa");

  const auto s = gradient_stats(Tensor({2}, {-1.0, 1.0}), 3, "head", "W");
  EXPECT_DOUBLE_EQ(s.mean, 0.0);
  EXPECT_DOUBLE_EQ(s.std, 1.0);
  EXPECT_DOUBLE_EQ(s.max_abs, 1.0);
  EXPECT_DOUBLE_EQ(s.l2, std::sqrt(2.0));
  EXPECT_EQ(s.near_zero, 0.0);
}

TEST(GradientStats, MatchesTwoPassRecomputation) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    auto g = random_tensor(rng, {1 + rng() % 7, 1 + rng() % 9}, -1e-3, 1e-3);
    if (t % 3 == 0) g = with_entry(g, 0, 0.0);
    const auto s = gradient_stats(g, 0, "l", "r");
    const auto o = recompute(g);
    EXPECT_NEAR(s.mean, o.mean, 1e-15);
    EXPECT_NEAR(s.std, o.std, 1e-12 * std::max(1e-3, o.std));
    EXPECT_EQ(s.max_abs, o.max_abs);
    EXPECT_NEAR(s.l2, o.l2, 1e-12 * o.l2);
    EXPECT_NEAR(s.near_zero, o.near_zero, 1e-12);
    EXPECT_GE(s.std, 0.0);
    EXPECT_GE(s.max_abs, std::abs(s.mean));
  }
}

TEST(GradientStats, CollectIsPure) {
  const auto cfg = conv_model();
  const auto named = named_parameters(init_model(cfg, 2));
  const auto a = collect_gradient_stats(named, 4);
  const auto b = collect_gradient_stats(named, 4);
  ASSERT_EQ(a.size(), named.size());
  EXPECT_EQ(to_csv(gradient_stats_table(a)), to_csv(gradient_stats_table(b)));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].layer, named[i].layer);
    EXPECT_EQ(a[i].role, named[i].role);
    EXPECT_EQ(a[i].epoch, 4u);
  }
}

TEST(Csv, EmptyTableIsHeaderOnly) {
  const auto t = gradient_stats_table({});
  EXPECT_EQ(to_csv(t), "epoch,layer,role,mean,std,max_abs,l2,near_zero_fraction\r\n");
}

TEST(Csv, QuotingRoundTrip) {
  CsvTable t;
  t.header = {"a", "b,c", "d"};
  t.rows = {{"plain", "with \"quote\"", "multi\nline"}, {"", "x\r\ny", ","}};
  const auto text = to_csv(t);
  EXPECT_NE(text.find("\"b,c\""), std::string::npos);
  EXPECT_NE(text.find("\"with \"\"quote\"\"\""), std::string::npos);
  const auto back = parse_csv(text);
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_THROW(parse_csv("a,b\r\n\"open,1\r\n"), InputError);
}

TEST(Csv, EmitWritesFileAndReportsPath) {
  TempDir d("csv");
  CsvTable t;
  t.header = {"x"};
  t.rows = {{"1"}};
  emit_csv(t, (d.path() / "t.csv").string());
  const auto bytes = slurp(d.path() / "t.csv");
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), "x\r\n1\r\n");
  try {
    emit_csv(t, (d.path() / "missing" / "t.csv").string());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(Pgm, UnitMapIsWhite) {
  AttentionMap m;
  m.height = m.width = 1;
  m.values = {1.0};
  EXPECT_EQ(to_pgm(m), "P2\n1 1\n255\n255\n");
}

TEST(Pgm, RoundTripWithinQuantization) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AttentionMap m;
  m.height = 7;
  m.width = 11;
  for (std::size_t i = 0; i < 77; ++i) m.values.push_back(u(rng));
  const auto back = parse_pgm(to_pgm(m));
  ASSERT_EQ(back.height, 7u);
  ASSERT_EQ(back.width, 11u);
  for (std::size_t i = 0; i < 77; ++i) EXPECT_LE(std::abs(back.values[i] - m.values[i]), 1.0 / 255);
  EXPECT_THROW(parse_pgm("P5\n1 1\n255\n0\n"), InputError);
  EXPECT_THROW(parse_pgm("P2\n2 2\n255\n0 0 0\n"), InputError);
  EXPECT_EQ(parse_pgm("P2\n# note\n1 1\n255\n51\n").values[0], 0.2);
}

TEST(Attention, ZeroWeightsGiveZeroMap) {
  const auto cfg = make_config({conv(NeuronFamily::Proposed, 1, 4, 3, 1, 1, true, true)}, "mnist");
  auto p = init_model(cfg, 1);
  for (auto& [role, t] : p.layers[0].params) t = Tensor(t.shape(), std::vector<double>(t.size(), 0.0));
  std::mt19937_64 rng(1);
  const auto img = random_tensor(rng, {1, 28, 28});
  const auto m = activation_attention(cfg, p, img, 0, 0);
  EXPECT_EQ(m.height, 28u);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(Attention, ConstantImageGivesConstantInterior) {
  auto cfg = make_config({conv(NeuronFamily::Proposed, 1, 4, 3, 1, 1, true, true),
                          conv(NeuronFamily::T2, 4, 4, 3, 1, 1, true, true)},
                         "mnist");
  const auto p = perturbed_params(cfg, 3);
  const Tensor img({1, 28, 28}, std::vector<double>(784, 0.7));
  for (std::size_t layer : {0ul, 1ul}) {
    const auto m = activation_attention(cfg, p, img, layer, 0);
    const std::size_t margin = layer + 1;
    const double ref = m.at(margin, margin);
    for (std::size_t y = margin; y < 28 - margin; ++y) {
      for (std::size_t x = margin; x < 28 - margin; ++x) EXPECT_NEAR(m.at(y, x), ref, 1e-6);
    }
  }
}

TEST(Attention, MatchesChannelMeanOracle) {
  const auto cfg = conv_model();
  const auto p = perturbed_params(cfg, 5);
  std::mt19937_64 rng(6);
  const auto img = random_tensor(rng, {1, 28, 28});
  for (std::size_t layer : {0ul, 1ul, 2ul}) {
    const auto a = layer_activation(cfg, p, img, layer);
    ASSERT_EQ(a.rank(), 4u);
    const std::size_t c = a.dim(1), h = a.dim(2), w = a.dim(3);
    std::vector<double> mean(h * w, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < h * w; ++i) mean[i] += std::abs(a[k * h * w + i]) / c;
    }
    std::vector<double> up(28 * 28);
    for (std::size_t y = 0; y < 28; ++y) {
      for (std::size_t x = 0; x < 28; ++x) {
        up[y * 28 + x] = sample(mean, h, w, (y + 0.5) * h / 28.0 - 0.5, (x + 0.5) * w / 28.0 - 0.5);
      }
    }
    const double mx = *std::max_element(up.begin(), up.end());
    const auto m = activation_attention(cfg, p, img, layer, 9);
    EXPECT_EQ(m.layer, layer);
    EXPECT_EQ(m.image, 9u);
    ASSERT_EQ(m.values.size(), up.size());
    for (std::size_t i = 0; i < up.size(); ++i) EXPECT_NEAR(m.values[i], up[i] / mx, 1e-12);
    EXPECT_DOUBLE_EQ(*std::max_element(m.values.begin(), m.values.end()), 1.0);
    auto again = m;
    normalize_max(again);
    EXPECT_EQ(again.values, m.values);
  }
}

TEST(Attention, LayerActivationMatchesNeuronForward) {
  const auto cfg = conv_model();
  const auto p = perturbed_params(cfg, 7);
  std::mt19937_64 rng(2);
  const auto img = random_tensor(rng, {1, 1, 28, 28});
  const auto a = layer_activation(cfg, p, img, 0);
  const auto y = forward(cfg.layers[0], p.layers[0].params, img).y;
  const auto& l = p.layers[0];
  ASSERT_EQ(a.shape(), y.shape());
  const std::size_t plane = 28 * 28;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t ch = i / plane;
    const double bn = l.gamma[ch] * (y[i] - l.running_mean[ch]) / std::sqrt(l.running_var[ch] + 1e-5) +
                      l.beta[ch];
    EXPECT_NEAR(a[i], std::max(bn, 0.0), 1e-12);
  }
}

TEST(Attention, Errors) {
  const auto cfg = conv_model();
  const auto p = init_model(cfg, 1);
  const Tensor img({1, 28, 28}, std::vector<double>(784, 0.0));
  EXPECT_THROW(activation_attention(cfg, p, img, 4, 0), InputError);
  EXPECT_THROW(activation_attention(cfg, p, img, 3, 0), InputError);
  EXPECT_THROW(layer_activation(cfg, p, img, 4), InputError);
  EXPECT_THROW(layer_activation(cfg, p, Tensor({2, 1, 28, 28}, std::vector<double>(1568, 0.0)), 0),
               InputError);
}
