#include <gtest/gtest.h>

#include <cmath>

#include "layerskip/kvq_cache.hpp"
#include "layerskip/model.hpp"
#include "layerskip/ops.hpp"
#include "toy.hpp"

using namespace layerskip;
using layerskip::testing::random_tokens;
using layerskip::testing::toy_config;

namespace {

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  EXPECT_EQ(a.size(), b.size());
  float m = 0.f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Reference forward without a cache: full causal recomputation.
Tensor full_forward_last(const ModelParams& params, const std::vector<int>& tokens) {
  const auto hs = forward_train<float>(params, {tokens}, DropMask(params.config.n_layers, 1));
  return hs[0].x.back();
}

}  // namespace

TEST(InitParams, DeterministicPerSeed) {
  const auto cfg = toy_config();
  EXPECT_TRUE(bitwise_equal(init_params(cfg, 1), init_params(cfg, 1)));
  EXPECT_FALSE(bitwise_equal(init_params(cfg, 1), init_params(cfg, 2)));
}

TEST(InitParams, ParameterCountMatchesBlockStructure) {
  const auto cfg = toy_config(2, 32, 4, 256, 64, 88);
  const std::size_t V = 256, d = 32, f = 88, L = 2;
  const std::size_t per_layer = 4 * d * d + 3 * d * f + 2 * d;
  EXPECT_EQ(init_params(cfg, 0).parameter_count(), V * d + L * per_layer + d + d * V);
  EXPECT_EQ(closed_form_parameter_count(cfg), V * d + L * per_layer + d + d * V);
}

TEST(ModelConfig, RejectsBadShapes) {
  auto cfg = toy_config();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config(2, 18, 2);  // odd head_dim 9
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config(0);
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ForwardTrain, AllDroppedIsIdentity) {
  const auto cfg = toy_config(3);
  const auto params = init_params(cfg, 4);
  const auto hs = forward_train<float>(params, {random_tokens(10, cfg.vocab, 1)}, DropMask(3, 1, true));
  EXPECT_TRUE(hs[0].x[3] == hs[0].x[0]);
}

TEST(ForwardTrain, PerSampleMask) {
  const auto cfg = toy_config(3);
  const auto params = init_params(cfg, 4);
  const std::vector<std::vector<int>> batch{random_tokens(10, cfg.vocab, 1), random_tokens(10, cfg.vocab, 2)};
  DropMask mask(3, 2);
  const auto plain = forward_train<float>(params, batch, mask);
  mask.set(1, 0, true);
  const auto dropped = forward_train<float>(params, batch, mask);
  for (int l = 0; l <= 3; ++l) EXPECT_TRUE(dropped[1].x[static_cast<std::size_t>(l)] == plain[1].x[static_cast<std::size_t>(l)]);
  EXPECT_TRUE(dropped[0].x[2] == dropped[0].x[1]);
  EXPECT_FALSE(dropped[0].x[3] == plain[0].x[3]);
}

TEST(ForwardTrain, Causal) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 4);
  auto a = random_tokens(12, cfg.vocab, 1);
  auto b = a;
  b.back() = (b.back() + 1) % cfg.vocab;
  const auto ha = forward_train<float>(params, {a}, DropMask(2, 1));
  const auto hb = forward_train<float>(params, {b}, DropMask(2, 1));
  for (std::size_t r = 0; r + 1 < a.size(); ++r) EXPECT_EQ(max_abs_diff(ha[0].x[2].row(r), hb[0].x[2].row(r)), 0.f);
  EXPECT_GT(max_abs_diff(ha[0].x[2].row(11), hb[0].x[2].row(11)), 0.f);
}

TEST(ForwardTrain, RejectsBadTokens) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 4);
  EXPECT_THROW(forward_train<float>(params, {{1, cfg.vocab}}, DropMask(2, 1)), std::out_of_range);
  EXPECT_THROW(forward_train<float>(params, {random_tokens(65, cfg.vocab, 1)}, DropMask(2, 1)), ContextOverflow);
}

TEST(Unembed, ZeroHeadIsUniform) {
  const auto cfg = toy_config(2);
  auto params = init_params(cfg, 4);
  params.lm_head.value.fill(0.f);
  std::vector<float> x(16, 0.7f);
  const auto logits = unembed(params, x);
  for (float v : logits) EXPECT_EQ(v, 0.f);
  EXPECT_NEAR(softmax<float>(logits)[5], 1.0 / cfg.vocab, 1e-7);
}

TEST(Unembed, RowsMatchSingle) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 4);
  const auto hs = forward_train<float>(params, {random_tokens(6, cfg.vocab, 3)}, DropMask(2, 1));
  const Tensor logits = unembed_rows<float>(params, hs[0].x[2]);
  for (std::size_t r = 0; r < 6; ++r) {
    const auto one = unembed(params, hs[0].x[2].row(r));
    EXPECT_EQ(max_abs_diff(one, logits.row(r)), 0.f);
  }
}

TEST(ForwardStep, FullExitMatchesTrainingForward) {
  const auto cfg = toy_config(3);
  const auto params = init_params(cfg, 4);
  const auto tokens = random_tokens(9, cfg.vocab, 5);
  KVQCache cache(cfg);
  const Tensor x = forward_step(params, tokens, cache, 3);
  const Tensor ref = full_forward_last(params, tokens);
  const auto a = unembed(params, x.row(8));
  const auto b = unembed(params, ref.row(8));
  EXPECT_LT(max_abs_diff(a, b), 1e-5f);
  EXPECT_EQ(argmax<float>(a), argmax<float>(b));
}

TEST(ForwardStep, IncrementalEqualsBatch) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 4);
  const auto tokens = random_tokens(2, cfg.vocab, 6);
  KVQCache one(cfg), two(cfg);
  forward_step(params, std::span<const int>(tokens).first(1), one, 2);
  forward_step(params, std::span<const int>(tokens).subspan(1), one, 2);
  forward_step(params, tokens, two, 2);
  for (int l = 0; l < 2; ++l) {
    ASSERT_EQ(one.valid_len(l), 2);
    for (int p = 0; p < 2; ++p) {
      EXPECT_LT(max_abs_diff(one.key(l, p), two.key(l, p)), 1e-6f);
      EXPECT_LT(max_abs_diff(one.value(l, p), two.value(l, p)), 1e-6f);
    }
  }
}

TEST(ForwardStep, SingleLayerModel) {
  const auto cfg = toy_config(1);
  const auto params = init_params(cfg, 8);
  const auto tokens = random_tokens(5, cfg.vocab, 6);
  KVQCache cache(cfg);
  Tensor x;
  for (int t : tokens) x = forward_step(params, std::span<const int>(&t, 1), cache, 1);
  EXPECT_LT(max_abs_diff(x.row(0), full_forward_last(params, tokens).row(4)), 1e-5f);
}

TEST(ForwardStep, ExitBelowLastLeavesUpperLayers) {
  const auto cfg = toy_config(4);
  const auto params = init_params(cfg, 8);
  KVQCache cache(cfg);
  forward_step(params, random_tokens(3, cfg.vocab, 1), cache, 4);
  forward_step(params, random_tokens(2, cfg.vocab, 2), cache, 2);
  EXPECT_EQ(cache.valid_len(0), 5);
  EXPECT_EQ(cache.valid_len(1), 5);
  EXPECT_EQ(cache.valid_len(2), 3);
  EXPECT_EQ(cache.valid_len(3), 3);
}

TEST(ForwardRemainder, MatchesFromScratch) {
  const auto cfg = toy_config(4);
  const auto params = init_params(cfg, 8);
  const auto tokens = random_tokens(8, cfg.vocab, 3);
  KVQCache cache(cfg);
  forward_step(params, std::span<const int>(tokens).first(5), cache, 4);
  cache.clear_exit_states();
  forward_step(params, std::span<const int>(tokens).subspan(5), cache, 2);
  const Tensor x = forward_remainder(params, cache, 2, 5, 3);
  const auto hs = forward_train<float>(params, {tokens}, DropMask(4, 1));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LT(max_abs_diff(unembed(params, x.row(i)), unembed(params, hs[0].x[4].row(5 + i))), 1e-5f);
  }
}

TEST(ForwardRemainder, ZeroExitIsFullForward) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 8);
  const auto tokens = random_tokens(6, cfg.vocab, 3);
  KVQCache cache(cfg);
  forward_step(params, tokens, cache, 0);
  const Tensor x = forward_remainder(params, cache, 0, 0, 6);
  const Tensor ref = full_forward_last(params, tokens);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_LT(max_abs_diff(x.row(i), ref.row(i)), 1e-5f);
}

TEST(ForwardRemainder, FullExitIsNoOp) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 8);
  const auto tokens = random_tokens(4, cfg.vocab, 3);
  KVQCache cache(cfg);
  const Tensor x = forward_step(params, tokens, cache, 2);
  const Tensor y = forward_remainder(params, cache, 2, 0, 4);
  EXPECT_TRUE(x == y);
  EXPECT_EQ(cache.valid_len(1), 4);
}

TEST(KVQCache, WriteRules) {
  const auto cfg = toy_config(2);
  KVQCache cache(cfg);
  const std::vector<float> k(16, 1.f), v(16, 2.f);
  EXPECT_THROW(cache.write(0, 1, k, v), CacheError);
  cache.write(0, 0, k, v);
  cache.write(0, 0, k, v);
  EXPECT_EQ(cache.valid_len(0), 1);
  EXPECT_THROW(cache.key(0, 1), CacheError);
  EXPECT_THROW(cache.commit(1), CacheError);
  cache.write(1, 0, k, v);
  cache.commit(1);
  EXPECT_EQ(cache.committed_len(), 1);
  cache.truncate(0);
  EXPECT_EQ(cache.valid_len(0), 0);
  EXPECT_EQ(cache.committed_len(), 0);
}
