#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lodestar/neural.hpp"

using namespace lodestar;
using namespace lodestar::nn;

namespace {

template <class T>
Tensor<T> random_tensor(int c, int h, int w, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(c, h, w);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
ModelParams<T> random_params(Architecture arch, std::uint64_t seed) {
  auto p = init_params<T>(arch, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& l : p.layers)
    for (auto& b : l.bias) b = static_cast<T>(u(rng));
  return p;
}

Architecture small_arch(ChannelSet ch = {}, int input_channels = 1) {
  Architecture a;
  a.width = 4;
  a.channels = ch;
  a.input_channels = input_channels;
  return a;
}

double weighted_sum(const Tensor<double>& out, const Tensor<double>& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.values()[i] * g.values()[i];
  return s;
}

}  // namespace

TEST(Architecture, LayerList) {
  const auto p = make_zero_params<float>(Architecture{});
  ASSERT_EQ(p.layers.size(), 12u);
  for (int i = 0; i < 11; ++i) {
    EXPECT_EQ(p.layers[i].kernel, 3);
    EXPECT_EQ(p.layers[i].out, 32);
    EXPECT_TRUE(p.layers[i].relu);
  }
  EXPECT_EQ(p.layers[0].in, 1);
  EXPECT_EQ(p.layers.back().kernel, 1);
  EXPECT_EQ(p.layers.back().out, 3);
  EXPECT_FALSE(p.layers.back().relu);
}

TEST(ChannelSet, ParseAndIndices) {
  EXPECT_EQ(ChannelSet::parse("xyzs").features(), 4);
  EXPECT_EQ(ChannelSet::parse("xys").scale_index(), 2);
  EXPECT_EQ(ChannelSet::parse("xyzs").scale_index(), 3);
  EXPECT_EQ(ChannelSet::parse("xyz").name(), "xyz");
  EXPECT_THROW(ChannelSet::parse("xz"), Error);
}

TEST(Forward, ZeroWeightsGiveHalfWeights) {
  const auto p = make_zero_params<float>(Architecture{});
  const auto img = random_tensor<float>(1, 32, 32, 3);
  const auto raw = forward(p, img);
  for (float v : raw.values()) EXPECT_EQ(v, 0.0f);
  const auto w = inference_weights(make_bundle(p, raw, 32, 32));
  for (double v : w.values()) EXPECT_EQ(v, 0.5);
}

TEST(Forward, OutputShape) {
  for (const char* ch : {"xy", "xyz", "xys", "xyzs"}) {
    Architecture a;
    a.channels = ChannelSet::parse(ch);
    const auto p = init_params<float>(a, 5);
    const auto raw = forward(p, random_tensor<float>(1, 64, 64, 1));
    EXPECT_EQ(raw.channels(), 3 + a.channels.extra()) << ch;
    EXPECT_EQ(raw.height(), 32);
    EXPECT_EQ(raw.width(), 32);
  }
}

TEST(Forward, RejectsBadInput) {
  const auto p = init_params<float>(Architecture{}, 1);
  EXPECT_THROW(forward(p, Tensor<float>(1, 15, 16)), Error);
  EXPECT_THROW(forward(p, Tensor<float>(1, 14, 16)), Error);
  try {
    forward(p, Tensor<float>(2, 16, 16));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("conv1"), std::string::npos);
  }
}

TEST(Forward, Deterministic) {
  const auto p = init_params<float>(Architecture{}, 2);
  const auto img = random_tensor<float>(1, 32, 48, 9);
  EXPECT_EQ(forward(p, img), forward(p, img));
}

TEST(Forward, StrideTwoTranslationEquivariance) {
  // Content confined to the center, far from the borders relative to the
  // receptive field; shifting it by (2, 0) px shifts every map by (1, 0).
  const auto p = random_params<float>(Architecture{}, 11);
  const int n = 96;
  const auto patch = random_tensor<float>(1, 16, 16, 4, 0.0, 1.0);
  Tensor<float> a(1, n, n, 0.0f), b(1, n, n, 0.0f);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      a(0, 40 + y, 40 + x) = patch(0, y, x);
      b(0, 40 + y, 42 + x) = patch(0, y, x);
    }
  const auto ra = forward(p, a), rb = forward(p, b);
  // Map pixels whose receptive field stays clear of the image border.
  const int margin = 12;
  int compared = 0;
  for (int c = 0; c < ra.channels(); ++c)
    for (int i = margin; i < n / 2 - margin; ++i)
      for (int j = margin; j + 1 < n / 2 - margin; ++j) {
        ASSERT_EQ(rb(c, i, j + 1), ra(c, i, j)) << c << ' ' << i << ' ' << j;
        ++compared;
      }
  EXPECT_GT(compared, 1000);
}

// Central differences in double. Away from the head, a step of 1e-3 moves
// some pre-activation across a ReLU or max-pool kink on almost every
// parameter, so the full sweep uses 1e-6; the head is linear in its own
// parameters and is also checked at 1e-3.
static double finite_difference_error(const char* channels, double h, bool head_only) {
  auto p = random_params<double>(small_arch(ChannelSet::parse(channels), 2), 21);
  const auto input = random_tensor<double>(2, 16, 16, 22);
  ForwardCache<double> cache;
  const auto out = forward(p, input, &cache);
  const auto g = random_tensor<double>(out.channels(), out.height(), out.width(), 23);
  const auto grads = backward(p, cache, g);
  double worst = 0.0;
  std::size_t checked = 0;
  auto check = [&](std::vector<double>& values, const std::vector<double>& analytic) {
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double keep = values[k];
      values[k] = keep + h;
      const double up = weighted_sum(forward(p, input), g);
      values[k] = keep - h;
      const double down = weighted_sum(forward(p, input), g);
      values[k] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double scale = std::max({std::abs(numeric), std::abs(analytic[k]), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic[k]) / scale);
      ++checked;
    }
  };
  for (std::size_t i = head_only ? p.layers.size() - 1 : 0; i < p.layers.size(); ++i) {
    check(p.layers[i].weight, grads.layers[i].weight);
    check(p.layers[i].bias, grads.layers[i].bias);
  }
  if (!head_only) {
    EXPECT_EQ(checked, p.parameter_count());
  }
  return worst;
}

TEST(Backward, MatchesFiniteDifferences) {
  for (const char* ch : {"xy", "xyzs"}) EXPECT_LT(finite_difference_error(ch, 1e-6, false), 1e-4) << ch;
}

TEST(Backward, HeadMatchesFiniteDifferencesAtCoarseStep) {
  for (const char* ch : {"xy", "xyzs"}) EXPECT_LT(finite_difference_error(ch, 1e-3, true), 1e-4) << ch;
}

TEST(Backward, ZeroOutputGradient) {
  const auto p = random_params<float>(Architecture{}, 3);
  ForwardCache<float> cache;
  const auto out = forward(p, random_tensor<float>(1, 16, 16, 1), &cache);
  const auto g = backward(p, cache, Tensor<float>(out.channels(), out.height(), out.width(), 0.0f));
  EXPECT_TRUE(g.all_zero());
}

TEST(Backward, RhoOnlyLossLeavesOffsetRowsZero) {
  const auto p = random_params<double>(small_arch(), 4);
  ForwardCache<double> cache;
  const auto out = forward(p, random_tensor<double>(1, 16, 16, 2), &cache);
  Tensor<double> g(out.channels(), out.height(), out.width(), 0.0);
  for (auto& v : g.plane(2)) v = 1.0;  // rho
  const auto grads = backward(p, cache, g);
  const auto& head = grads.layers.back();
  const int in = p.layers.back().in;
  for (int row = 0; row < 2; ++row) {
    for (int k = 0; k < in; ++k) EXPECT_EQ(head.weight[row * in + k], 0.0);
    EXPECT_EQ(head.bias[row], 0.0);
  }
  bool rho_nonzero = false;
  for (int k = 0; k < in; ++k) rho_nonzero = rho_nonzero || head.weight[2 * in + k] != 0.0;
  EXPECT_TRUE(rho_nonzero);
}

TEST(Backward, StaleCacheRejected) {
  auto p = random_params<float>(Architecture{}, 3);
  ForwardCache<float> cache;
  const auto out = forward(p, random_tensor<float>(1, 16, 16, 1), &cache);
  Tensor<float> g(out.channels(), out.height(), out.width(), 1.0f);
  auto grads = backward(p, cache, g);
  adam_step(p, grads);
  EXPECT_THROW(backward(p, cache, g), Error);
  EXPECT_THROW(backward(p, ForwardCache<float>{}, g), Error);
}

TEST(Decode, ZeroOffsetGrid) {
  FeatureBundle b;
  b.input_height = b.input_width = 64;
  b.raw = Tensor<double>(3, 32, 32, 0.0);
  const auto p = decode_positions(b);
  for (int j = 0; j < 32; ++j) EXPECT_DOUBLE_EQ(p(0, 5, j), -31.0 + 2.0 * j);
  for (int i = 0; i < 32; ++i) EXPECT_DOUBLE_EQ(p(1, i, 7), -31.0 + 2.0 * i);
}

TEST(Decode, ConstantOffsetAddsLinearly) {
  FeatureBundle b;
  b.input_height = b.input_width = 64;
  b.raw = Tensor<double>(3, 32, 32, 0.0);
  for (auto& v : b.raw.plane(0)) v = 3.0;
  const auto p = decode_positions(b);
  for (int j = 0; j < 32; ++j) EXPECT_DOUBLE_EQ(p(0, 0, j), -31.0 + 2.0 * j + 3.0);
}

TEST(Decode, HandComputedFourByFour) {
  FeatureBundle b;
  b.input_height = b.input_width = 4;
  b.raw = Tensor<double>(3, 2, 2, 0.0);
  b.raw(0, 0, 0) = 0.5;
  const auto p = decode_positions(b);
  // dx + (j + 1/2) k - N/2 with k = 2, N = 4
  EXPECT_DOUBLE_EQ(p(0, 0, 0), 0.5 + 0.5 * 2 - 4 / 2.0);
  EXPECT_DOUBLE_EQ(p(0, 0, 0), -0.5);
  EXPECT_DOUBLE_EQ(p(0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(p(1, 1, 0), 1.0);
}

TEST(Decode, ExtraChannelsPassThrough) {
  FeatureBundle b;
  b.channels = ChannelSet::parse("xyzs");
  b.input_height = b.input_width = 16;
  b.raw = random_tensor<double>(5, 8, 8, 6);
  const auto p = decode_positions(b);
  ASSERT_EQ(p.channels(), 4);
  EXPECT_EQ(p(2, 3, 4), b.raw(2, 3, 4));
  EXPECT_EQ(p(3, 1, 2), b.raw(3, 1, 2));
}

TEST(Adam, ZeroGradientsKeepParameters) {
  auto p = random_params<float>(Architecture{}, 8);
  const auto before = p.layers;
  adam_step(p, Gradients<float>::zeros_like(p));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    EXPECT_EQ(p.layers[i].weight, before[i].weight);
    EXPECT_EQ(p.layers[i].bias, before[i].bias);
  }
  EXPECT_EQ(p.step, 1);
}

TEST(Adam, FirstStepClosedForm) {
  std::vector<double> param{0.25}, grad{1.0}, m{0.0}, v{0.0};
  AdamSettings s;
  adam_update<double>(param, grad, m, v, 1, s);
  // m = 0.1, v = 0.001; bias-corrected both equal 1.
  const double mhat = (1 - 0.9) * 1.0 / (1 - 0.9), vhat = (1 - 0.999) * 1.0 / (1 - 0.999);
  EXPECT_DOUBLE_EQ(param[0], 0.25 - 0.001 * mhat / (std::sqrt(vhat) + 1e-8));
  EXPECT_NEAR(param[0] - 0.25, -0.001, 1e-10);
}

TEST(Adam, NonFiniteGradientNamesLayer) {
  auto p = random_params<float>(Architecture{}, 8);
  auto g = Gradients<float>::zeros_like(p);
  g.layers[4].bias[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam_step(p, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("conv5"), std::string::npos);
  }
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  auto run = [] {
    auto p = init_params<float>(Architecture{}, 13);
    const auto img = random_tensor<float>(1, 16, 16, 14);
    for (int step = 0; step < 3; ++step) {
      ForwardCache<float> cache;
      const auto out = forward(p, img, &cache);
      adam_step(p, backward(p, cache, out));
    }
    return p;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
    EXPECT_EQ(a.layers[i].v_bias, b.layers[i].v_bias);
  }
}

TEST(Checkpoint, RoundTripIncludesMoments) {
  Architecture arch;
  arch.channels = ChannelSet::parse("xyz");
  arch.input_channels = 2;
  auto p = init_params<float>(arch, 15);
  ForwardCache<float> cache;
  const auto out = forward(p, random_tensor<float>(2, 16, 16, 1), &cache);
  adam_step(p, backward(p, cache, out));
  p.calibration = {0.125, -0.5};
  std::stringstream ss;
  save_checkpoint(p, ss);
  const auto q = load_checkpoint(ss);
  EXPECT_EQ(q.arch, p.arch);
  EXPECT_EQ(q.step, p.step);
  EXPECT_EQ(q.calibration, p.calibration);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    EXPECT_EQ(q.layers[i].weight, p.layers[i].weight);
    EXPECT_EQ(q.layers[i].bias, p.layers[i].bias);
    EXPECT_EQ(q.layers[i].m_weight, p.layers[i].m_weight);
    EXPECT_EQ(q.layers[i].v_weight, p.layers[i].v_weight);
    EXPECT_EQ(q.layers[i].m_bias, p.layers[i].m_bias);
    EXPECT_EQ(q.layers[i].v_bias, p.layers[i].v_bias);
  }
}

TEST(Checkpoint, TruncatedAndCorrupt) {
  const auto p = init_params<float>(Architecture{}, 1);
  std::stringstream ss;
  save_checkpoint(p, ss);
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(load_checkpoint(cut), Error);
  bytes[0] = 'X';
  std::stringstream bad(bytes);
  try {
    load_checkpoint(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(Checkpoint, ArchitectureMismatch) {
  Architecture with_z;
  with_z.channels.z = true;
  with_z.input_channels = 2;
  const auto path = (std::filesystem::temp_directory_path() / "lodestar_arch_mismatch.ckpt").string();
  save_checkpoint(init_params<float>(with_z, 1), path);
  Architecture plain;
  plain.input_channels = 2;
  try {
    load_checkpoint(path, plain);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("architecture mismatch"), std::string::npos);
  }
  EXPECT_NO_THROW(load_checkpoint(path, with_z));
  std::filesystem::remove(path);
}

TEST(Normalize, CenterKeepsScale) {
  const auto img = random_tensor<double>(2, 16, 16, 3, 1.0, 3.0);
  const auto c = normalize_input<double>(img, Normalization::center);
  for (int ch = 0; ch < 2; ++ch) {
    double s = 0.0;
    for (double v : c.plane(ch)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-9);
  }
  EXPECT_NEAR(c(0, 3, 4) - c(0, 5, 6), img(0, 3, 4) - img(0, 5, 6), 1e-12);
  const auto st = normalize_input<double>(img, Normalization::standardize);
  double sq = 0.0;
  for (double v : st.values()) sq += v * v;
  EXPECT_NEAR(sq / static_cast<double>(st.size()), 1.0, 1e-9);
}
