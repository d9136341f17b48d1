#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "layerskip/checkpoint.hpp"
#include "layerskip/early_exit_loss.hpp"
#include "layerskip/trainer.hpp"
#include "toy.hpp"

using namespace layerskip;
using layerskip::testing::random_tokens;
using layerskip::testing::toy_config;

namespace fs = std::filesystem;

namespace {

TrainConfig small_train(int steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 2;
  tc.context_len = 8;
  tc.seed = 3;
  tc.eval_windows = 2;
  return tc;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("layerskip_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(EarlyExitLoss, ZeroScaleIsFinalLayerLoss) {
  const auto cfg = toy_config(3);
  const auto params = init_params(cfg, 1);
  const auto tokens = random_tokens(9, cfg.vocab, 2);
  const auto hs = forward_train<float>(params, {std::vector<int>(tokens.begin(), tokens.end() - 1)}, DropMask(3, 1));
  EarlyExitLossSchedule s;
  s.n_layers = 3;
  s.curriculum = ExitCurriculum::kAll;
  const std::span<const int> targets(tokens.data() + 1, 8);
  const auto j = total_loss<float>(hs[0], targets, 0, s, params);
  EXPECT_EQ(j.unembeddings, 1);
  EXPECT_DOUBLE_EQ(j.total, exit_cross_entropy<float>(params, hs[0].x[3], targets));
}

TEST(EarlyExitLoss, WeightedCombination) {
  const auto cfg = toy_config(2);
  const auto params = init_params(cfg, 1);
  const auto tokens = random_tokens(9, cfg.vocab, 2);
  const auto hs = forward_train<float>(params, {std::vector<int>(tokens.begin(), tokens.end() - 1)}, DropMask(2, 1));
  const std::span<const int> targets(tokens.data() + 1, 8);
  EarlyExitLossSchedule s;
  s.n_layers = 2;
  s.e_scale = 1.0;
  s.curriculum = ExitCurriculum::kAll;
  // e(0) = 0, e(1) = (L-1) + e_scale * 0 = 1, so all weight sits on the last exit.
  const double ce0 = exit_cross_entropy<float>(params, hs[0].x[1], targets);
  const double ce1 = exit_cross_entropy<float>(params, hs[0].x[2], targets);
  EXPECT_NEAR(total_loss<float>(hs[0], targets, 0, s, params).total, ce1, 1e-12);
  const auto j = total_loss<float>(hs[0], targets, {0.25, 0.75}, params);
  EXPECT_NEAR(j.total, 0.25 * ce0 + 0.75 * ce1, 1e-12);
  EXPECT_EQ(j.unembeddings, 2);
}

TEST(EarlyExitLoss, DisabledExitIgnored) {
  const auto cfg = toy_config(3);
  const auto params = init_params(cfg, 1);
  const auto tokens = random_tokens(9, cfg.vocab, 2);
  auto hs = forward_train<float>(params, {std::vector<int>(tokens.begin(), tokens.end() - 1)}, DropMask(3, 1));
  const std::span<const int> targets(tokens.data() + 1, 8);
  const std::vector<double> w{0.0, 0.4, 0.6};
  const double before = total_loss<float>(hs[0], targets, w, params).total;
  for (float& v : hs[0].x[1].span()) v += 3.f;
  EXPECT_EQ(total_loss<float>(hs[0], targets, w, params).total, before);
}

TEST(TrainConfig, Validation) {
  const auto cfg = toy_config();
  auto tc = small_train(10);
  tc.dropout.p_max = 1.5;
  EXPECT_THROW(tc.resolve(cfg), ConfigError);
  tc = small_train(10);
  tc.context_len = 65;
  EXPECT_THROW(tc.resolve(cfg), ConfigError);
  tc = small_train(0);
  EXPECT_THROW(tc.resolve(cfg), ConfigError);
}

TEST(TrainStep, DisabledRecipeIsPlainLanguageModelStep) {
  const auto cfg = toy_config(2);
  auto tc = small_train(5);
  tc.resolve(cfg);
  auto a = init_params(cfg, 1);
  auto b = a;
  const std::vector<std::vector<int>> batch{random_tokens(9, cfg.vocab, 1), random_tokens(9, cfg.vocab, 2)};
  AdamW opt_a(a), opt_b(b);
  const auto rec = train_step(a, opt_a, batch, 0, tc);
  EXPECT_EQ(rec.enabled_layers, std::vector<int>{1});
  EXPECT_EQ(rec.dropped_layer_samples, 0);

  // Plain next-token loss on the last layer, computed independently.
  b.zero_grad();
  std::vector<Tensor> grads(3);
  double loss = 0.0;
  for (const auto& row : batch) {
    std::span<const int> r(row);
    const auto fwd = forward_sequence<float>(b, r.first(8), {false, false});
    for (auto& g : grads) g = Tensor({8, 16});
    loss += 0.5 * exit_cross_entropy_backward<float>(b, fwd.hidden.x[2], r.subspan(1, 8), 0.5, grads[2]);
    backward_sequence<float>(b, fwd, grads);
  }
  EXPECT_NEAR(rec.loss, loss, 1e-9);
}

TEST(TrainStep, Deterministic) {
  const auto cfg = toy_config(2);
  auto tc = small_train(5);
  tc.dropout.p_max = 0.5;
  tc.early_exit.e_scale = 1.0;
  tc.early_exit.curriculum = ExitCurriculum::kAll;
  tc.resolve(cfg);
  auto a = init_params(cfg, 1);
  auto b = a;
  AdamW oa(a), ob(b);
  const std::vector<std::vector<int>> batch{random_tokens(9, cfg.vocab, 1), random_tokens(9, cfg.vocab, 2)};
  for (int t = 0; t < 3; ++t) {
    train_step(a, oa, batch, t, tc);
    train_step(b, ob, batch, t, tc);
  }
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(TrainRun, MemorizesRepeatingCorpus) {
  const auto cfg = toy_config(2, 32, 4, 257, 64, 64);
  auto tc = small_train(200);
  tc.batch_size = 4;
  tc.context_len = 16;
  tc.learning_rate = 1e-2;
  std::vector<int> corpus;
  for (int i = 0; i < 2000; ++i) corpus.push_back(i % 2 == 0 ? 'a' : 'b');
  const auto result = train_run(corpus, cfg, tc);
  EXPECT_LT(result.log.steps.back().loss, 0.05);
}

TEST(TrainRun, LogsEveryStepAndWritesFiles) {
  const auto cfg = toy_config(2);
  const auto dir = temp_dir("run50");
  TrainRunOptions opt;
  opt.output_dir = dir;
  const auto corpus = ByteTokenizer::encode(layerskip::testing::synthetic_corpus(3000, 1));
  auto tc = small_train(50);
  tc.eval_every = 25;
  const auto result = train_run(corpus, cfg, tc, opt);
  ASSERT_EQ(result.log.steps.size(), 50u);
  for (int t = 0; t < 50; ++t) EXPECT_EQ(result.log.steps[static_cast<std::size_t>(t)].step, t);
  EXPECT_EQ(result.log.evals.size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.lskp"));
  std::ifstream csv(dir / "train_log.csv");
  int lines = 0;
  for (std::string l; std::getline(csv, l);) ++lines;
  EXPECT_EQ(lines, 51);
  EXPECT_TRUE(bitwise_equal(load_checkpoint(dir / "checkpoint.lskp").params, result.params));
}

TEST(TrainRun, SameSeedSameCheckpointBytes) {
  const auto cfg = toy_config(2);
  const auto corpus = ByteTokenizer::encode(layerskip::testing::synthetic_corpus(3000, 1));
  auto tc = small_train(20);
  tc.dropout.p_max = 0.2;
  tc.early_exit.e_scale = 0.5;
  tc.early_exit.rotation = 2;
  const auto d1 = temp_dir("det1"), d2 = temp_dir("det2");
  TrainRunOptions o1, o2;
  o1.output_dir = d1;
  o2.output_dir = d2;
  train_run(corpus, cfg, tc, o1);
  train_run(corpus, cfg, tc, o2);
  EXPECT_EQ(read_file(d1 / "checkpoint.lskp"), read_file(d2 / "checkpoint.lskp"));
}

TEST(TrainRun, CorpusTooSmall) {
  EXPECT_THROW(train_run(std::vector<int>(5, 1), toy_config(), small_train(2)), ShapeError);
}

TEST(LearningRate, WarmupAndCosine) {
  auto tc = small_train(100);
  tc.learning_rate = 1.0;
  tc.warmup_fraction = 0.1;
  tc.resolve(toy_config());
  EXPECT_NEAR(learning_rate_at(0, tc), 0.1, 1e-12);
  EXPECT_NEAR(learning_rate_at(9, tc), 1.0, 1e-12);
  EXPECT_NEAR(learning_rate_at(99, tc), 0.1, 1e-12);
  tc.dropout.p_max = 0.1;
  EXPECT_NEAR(learning_rate_at(9, tc), 2.0, 1e-12);
}

TEST(BatchSampler, WindowsAreContiguous) {
  std::vector<int> corpus(200);
  for (int i = 0; i < 200; ++i) corpus[static_cast<std::size_t>(i)] = i % 250;
  BatchSampler s(corpus, 9, 3, 1);
  EXPECT_EQ(s.window_count(), 22u);  // stride 9, each window 10 tokens
  for (int step = 0; step < 10; ++step) {
    for (const auto& row : s.batch(step)) {
      ASSERT_EQ(row.size(), 10u);
      EXPECT_EQ(row.front() % 9, 0);
      for (std::size_t i = 1; i < row.size(); ++i) EXPECT_EQ(row[i], row[i - 1] + 1);
    }
  }
}

TEST(Checkpoint, RoundTripBitwise) {
  const auto params = init_params(toy_config(3), 9);
  const auto bytes = serialize_checkpoint(params, {{"note", "x"}});
  const auto ck = deserialize_checkpoint(bytes);
  EXPECT_TRUE(bitwise_equal(ck.params, params));
  EXPECT_EQ(ck.metadata.at("note"), "x");
  EXPECT_EQ(serialize_checkpoint(ck.params, ck.metadata), bytes);
}

TEST(Checkpoint, CorruptionRejected) {
  const auto bytes = serialize_checkpoint(init_params(toy_config(2), 9), {});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointError);
  auto bad_header = bytes;
  bad_header[24] ^= 0x20;
  EXPECT_THROW(deserialize_checkpoint(bad_header), CheckpointError);
  auto bad_payload = bytes;
  bad_payload[bytes.size() - 3] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(bad_payload), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 4)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), CheckpointError);
}

TEST(Checkpoint, NewerVersionRejected) {
  auto bytes = serialize_checkpoint(init_params(toy_config(2), 9), {});
  bytes[4] = 2;
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected UnsupportedVersion";
  } catch (const UnsupportedVersion& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(DropoutShapeAblation, EqualMeanRates) {
  const auto cfg = toy_config(4);
  const auto corpus = ByteTokenizer::encode(layerskip::testing::synthetic_corpus(3000, 1));
  auto tc = small_train(6);
  tc.dropout.p_max = 0.2;
  const auto ab = dropout_shape_ablation(corpus, cfg, tc);
  ASSERT_EQ(ab.uniform.steps.size(), 6u);
  ASSERT_EQ(ab.exponential.steps.size(), 6u);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_NEAR(ab.uniform.steps[t].mean_dropout, ab.exponential.steps[t].mean_dropout, 1e-12);
    EXPECT_NEAR(ab.uniform.steps[t].mean_dropout, ab.mean_rate, 1e-12);
  }
  std::ostringstream csv;
  ab.write_csv(csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "step,const_loss,exp_loss");
}
