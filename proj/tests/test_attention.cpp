#include <gtest/gtest.h>

#include <cmath>

#include "sdist/attention.hpp"
#include "sdist/gradcheck.hpp"

#include "attention_oracle.hpp"

using namespace sdist;
using sdist::oracle::brute_force_attention;

namespace {

Tensor<double> random_input(Rng& rng, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  return Tensor<double>(Shape{b, c, h, w}, uniform_values<double>(rng, b * c * h * w, -1, 1));
}

AttentionLayerParams<double> random_params(const AttentionConfig& cfg, Rng& rng) {
  return sdist::oracle::random_attention_params(cfg, rng);
}

}  // namespace

TEST(Neighborhood, ExtentOneIsIdentity) {
  Rng rng(1);
  auto x = random_input(rng, 2, 3, 3, 4);
  auto n = neighborhood_extract(x, 1);
  EXPECT_EQ(n.patches.shape(), (Shape{2, 3, 4, 1, 3}));
  for (auto v : n.valid) EXPECT_EQ(v, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 12; ++p) EXPECT_EQ(n.patches.at((b * 12 + p) * 3 + c), x.at((b * 3 + c) * 12 + p));
}

TEST(Neighborhood, SinglePixelHasOneValidSlot) {
  Tensor<double> x(Shape{1, 1, 1, 1}, std::vector<double>{5.0});
  auto n = neighborhood_extract(x, 3);
  ASSERT_EQ(n.valid.size(), 9u);
  std::size_t valid = 0;
  for (std::size_t s = 0; s < 9; ++s) {
    valid += n.valid[s];
    EXPECT_EQ(n.patches.at(s), s == 4 ? 5.0 : 0.0);
  }
  EXPECT_EQ(valid, 1u);
}

TEST(Neighborhood, RampCornerWindow) {
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[i] = i;
  Tensor<double> x(Shape{1, 1, 4, 4}, ramp);
  auto n = neighborhood_extract(x, 3);
  // Pixel (0,0): slots (da,db) map to (da-1, db-1).
  std::size_t valid = 0;
  for (int da = 0; da < 3; ++da)
    for (int db = 0; db < 3; ++db) {
      const int yy = da - 1, xx = db - 1;
      const bool in = yy >= 0 && xx >= 0;
      const std::size_t slot = static_cast<std::size_t>(da * 3 + db);
      EXPECT_EQ(n.valid[slot], in ? 1 : 0);
      EXPECT_EQ(n.patches.at(slot), in ? ramp[yy * 4 + xx] : 0.0);
      valid += in;
    }
  EXPECT_EQ(valid, 4u);
}

TEST(Neighborhood, EvenExtentIsContractError) {
  Tensor<float> x(Shape{1, 1, 2, 2});
  EXPECT_THROW(neighborhood_extract(x, 2), ContractError);
}

TEST(LocalAttention, ExtentOneIsValueProjection) {
  Rng rng(2);
  AttentionConfig cfg{3, 4, 2, 1, 1};
  auto p = random_params(cfg, rng);
  auto x = random_input(rng, 2, 3, 3, 3);
  auto y = local_self_attention(x, p);
  auto v = channel_project(x, p.w_v);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), v.at(i), 1e-12);
}

TEST(LocalAttention, ZeroQueryGivesUniformAverage) {
  Rng rng(3);
  AttentionConfig cfg{2, 2, 1, 3, 1};
  auto p = random_params(cfg, rng);
  for (auto& w : p.w_q.mutable_data()) w = 0;
  for (auto& w : p.rel_pos.mutable_data()) w = 0;
  auto x = random_input(rng, 1, 2, 3, 3);
  auto y = local_self_attention(x, p);
  auto v = channel_project(x, p.w_v);
  for (std::size_t c = 0; c < 2; ++c)
    for (long i = 0; i < 3; ++i)
      for (long j = 0; j < 3; ++j) {
        double s = 0;
        int n = 0;
        for (long a = i - 1; a <= i + 1; ++a)
          for (long b = j - 1; b <= j + 1; ++b)
            if (a >= 0 && b >= 0 && a < 3 && b < 3) {
              s += v.at(c * 9 + a * 3 + b);
              ++n;
            }
        EXPECT_NEAR(y.at(c * 9 + i * 3 + j), s / n, 1e-12);
      }
}

TEST(LocalAttention, BruteForceSmallExample) {
  Rng rng(4);
  AttentionConfig cfg{2, 2, 1, 3, 1};
  auto p = random_params(cfg, rng);
  auto x = random_input(rng, 1, 2, 2, 2);
  auto y = local_self_attention(x, p);
  auto ref = brute_force_attention(x, p);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-5);
}

TEST(LocalAttention, BruteForceRandomConfigurations) {
  Rng rng(5);
  int tested = 0;
  while (tested < 60) {
    const auto [cfg, H, W] = sdist::oracle::random_oracle_case(rng);
    auto p = random_params(cfg, rng);
    auto x = random_input(rng, 2, cfg.c_in, H, W);
    auto y = local_self_attention(x, p);
    auto ref = brute_force_attention(x, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.at(i), ref[i], 1e-5) << "config " << tested;
    // Single precision path against the same oracle.
    AttentionLayerParams<float> pf{cfg,
                                   Tensor<float>(p.w_q.shape(), {p.w_q.data().begin(), p.w_q.data().end()}),
                                   Tensor<float>(p.w_k.shape(), {p.w_k.data().begin(), p.w_k.data().end()}),
                                   Tensor<float>(p.w_v.shape(), {p.w_v.data().begin(), p.w_v.data().end()}),
                                   Tensor<float>(p.rel_pos.shape(), {p.rel_pos.data().begin(), p.rel_pos.data().end()})};
    auto yf = local_self_attention(Tensor<float>(x.shape(), {x.data().begin(), x.data().end()}), pf);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(yf.at(i), ref[i], 1e-5) << "float config " << tested;
    ++tested;
  }
}

TEST(LocalAttention, SqrtPositionScaleSwitch) {
  AttentionConfig cfg{4, 16, 2, 3, 1};
  EXPECT_DOUBLE_EQ(cfg.position_scale(), 0.5);
  cfg.sqrt_position_scale = true;
  EXPECT_DOUBLE_EQ(cfg.position_scale(), 0.25);
  EXPECT_DOUBLE_EQ(cfg.content_scale(), 0.25);
}

TEST(LocalAttention, WeightsSumToOneAndIgnorePadding) {
  // Constant-one values: output equals the total attention mass on real pixels.
  Rng rng(6);
  AttentionConfig cfg{2, 4, 2, 3, 1};
  auto p = random_params(cfg, rng);
  auto& wv = p.w_v;
  for (auto& w : wv.mutable_data()) w = 0;
  for (std::size_t o = 0; o < 4; ++o) wv.mutable_data()[0 * 4 + o] = 1;  // v = x channel 0
  auto x = random_input(rng, 1, 2, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) x.mutable_data()[i] = 1;  // channel 0 == 1
  auto y = local_self_attention(x, p);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), 1.0, 1e-6);
}

TEST(LocalAttention, BatchPermutationEquivariance) {
  Rng rng(7);
  AttentionConfig cfg{3, 4, 2, 3, 1};
  auto p = random_params(cfg, rng);
  auto x = random_input(rng, 3, 3, 3, 3);
  std::vector<double> swapped(x.numel());
  const std::size_t per = 27;
  for (std::size_t b = 0; b < 3; ++b)
    std::copy_n(x.data().begin() + (2 - b) * per, per, swapped.begin() + b * per);
  auto y = local_self_attention(x, p);
  auto ys = local_self_attention(Tensor<double>(x.shape(), swapped), p);
  const std::size_t out = 4 * 9;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < out; ++i) EXPECT_NEAR(ys.at(b * out + i), y.at((2 - b) * out + i), 1e-12);
}

TEST(LocalAttention, Locality) {
  Rng rng(8);
  for (std::size_t k : {1u, 3u, 5u}) {
    AttentionConfig cfg{2, 2, 1, k, 1};
    auto p = random_params(cfg, rng);
    auto x = random_input(rng, 1, 2, 7, 7);
    auto y = local_self_attention(x, p);
    const long ci = 3, cj = 3, r = static_cast<long>(k / 2);
    auto perturbed = std::vector<double>(x.data().begin(), x.data().end());
    for (std::size_t c = 0; c < 2; ++c)
      for (long i = 0; i < 7; ++i)
        for (long j = 0; j < 7; ++j)
          if (std::abs(i - ci) > r || std::abs(j - cj) > r) perturbed[(c * 7 + i) * 7 + j] += 10.0 + i + j;
    auto y2 = local_self_attention(Tensor<double>(x.shape(), perturbed), p);
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_NEAR(y.at((c * 7 + ci) * 7 + cj), y2.at((c * 7 + ci) * 7 + cj), 1e-12) << "k=" << k;
  }
}

TEST(LocalAttention, HeadIsolation) {
  Rng rng(9);
  AttentionConfig cfg{3, 4, 2, 3, 1};
  auto p = random_params(cfg, rng);
  auto x = random_input(rng, 1, 3, 3, 3);
  auto y = local_self_attention(x, p);
  // Perturb only head 1's position table.
  const std::size_t per_head = p.rel_pos.numel() / 2;
  for (std::size_t i = per_head; i < 2 * per_head; ++i) p.rel_pos.mutable_data()[i] += 0.5;
  auto y2 = local_self_attention(x, p);
  bool head1_changed = false;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t s = 0; s < 9; ++s) {
      if (c < 2) EXPECT_EQ(y.at(c * 9 + s), y2.at(c * 9 + s));
      else head1_changed |= y.at(c * 9 + s) != y2.at(c * 9 + s);
    }
  EXPECT_TRUE(head1_changed);
}

TEST(LocalAttention, HeadDivisibilityIsConfigError) {
  Rng rng(10);
  AttentionConfig cfg{4, 6, 4, 3, 1};
  EXPECT_THROW(init_attention<float>(cfg, rng), ConfigError);
}

TEST(LocalAttention, ChannelMismatchIsShapeError) {
  Rng rng(10);
  auto p = init_attention<float>({4, 4, 1, 3, 1}, rng);
  Tensor<float> x(Shape{1, 3, 2, 2});
  EXPECT_THROW(local_self_attention(x, p), ShapeError);
}

TEST(LocalAttention, GradCheckAllParameters) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    AttentionConfig cfg{3, 4, 2, 3, seed % 2 ? 2u : 1u};
    auto p = random_params(cfg, rng);
    auto x = random_input(rng, 2, 3, 4, 4);
    x.set_requires_grad(true);
    Tensor<double> w(Shape{2, 4, 4 / cfg.stride, 4 / cfg.stride},
                     uniform_values<double>(rng, 2 * 4 * 16 / (cfg.stride * cfg.stride), -1, 1));
    auto f = [&] { return sum(mul(local_self_attention(x, p), w)); };
    for (auto* t : {&x, &p.w_q, &p.w_k, &p.w_v, &p.rel_pos})
      EXPECT_LE(grad_check<double>(f, *t, {1e-6, 20, seed}), 1e-4) << "seed " << seed;
  }
}

TEST(ParamCount, HandEvaluation) {
  EXPECT_EQ(attention_param_count({64, 64, 8, 7, 1}), 23104u);
  EXPECT_EQ(attention_projection_count({64, 64, 8, 3, 1}), attention_projection_count({64, 64, 8, 7, 1}));
  EXPECT_EQ(attention_projection_count({64, 64, 8, 3, 1}), 12288u);
  EXPECT_GT(64u * 64u * 9u, attention_projection_count({64, 64, 8, 3, 1}));
}

TEST(ParamCount, MatchesAllocatedScalars) {
  Rng rng(11);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    AttentionConfig cfg{8, 16, 4, k, 1};
    auto p = init_attention<float>(cfg, rng);
    EXPECT_EQ(attention_param_count(cfg), p.w_q.numel() + p.w_k.numel() + p.w_v.numel() + p.rel_pos.numel());
  }
}
