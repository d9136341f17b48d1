#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "layerskip/cli.hpp"
#include "layerskip/run_config.hpp"
#include "layerskip/tokenizer.hpp"
#include "synthetic_corpus.hpp"

using namespace layerskip;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "layerskip_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "corpus.txt") << layerskip::testing::synthetic_corpus(6000, 2);
    std::ofstream(dir_ / "prompts.txt") << "The cat saw\nA dog found the\nMy sister\n";
    std::ofstream(dir_ / "model.cfg") << "# tiny model\nn_layers = 3\ndim = 16\nn_heads = 2\nffn_hidden = 24\n"
                                         "max_context = 64\ncontext_len = 16\nbatch_size = 2\nsteps = 10\n"
                                         "eval_windows = 2\nmax_new_tokens = 12\nrotation = 3\n";
    const auto r = run_cli({"train", "--config", cfg(), "--corpus", path("corpus.txt"), "--output_dir", path("model")});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }
  static std::string cfg() { return path("model.cfg"); }
  static std::string checkpoint() { return path("model/checkpoint.lskp"); }

  static fs::path dir_;
};

fs::path CliTest::dir_;

}  // namespace

TEST(Tokenizer, RandomByteStringsRoundTrip) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    std::string s(rng() % 64, '\0');
    for (char& c : s) c = static_cast<char>(rng() % 256);
    const auto ids = ByteTokenizer::encode(s);
    for (int id : ids) ASSERT_LT(id, ByteTokenizer::kEndOfText);
    ASSERT_EQ(ByteTokenizer::decode(ids), s);
  }
}

TEST(Tokenizer, DecodeSkipsEndOfTextAndRejectsOthers) {
  EXPECT_EQ(ByteTokenizer::decode(std::vector<int>{104, 105, 256}), "hi");
  EXPECT_THROW(ByteTokenizer::decode(std::vector<int>{300}), std::out_of_range);
}

TEST(RunConfig, ParsesAndRejects) {
  RunConfig c;
  c.merge_text("p_max = 0.2  # comment\n\nprompt = \"a # b\"\n");
  EXPECT_EQ(c.get_double("p_max"), 0.2);
  EXPECT_EQ(c.get("prompt"), "a # b");
  EXPECT_THROW(c.merge_text("no_such_key = 1"), ConfigError);
  EXPECT_THROW(c.merge_text("just words"), ConfigError);
  c.set("dim", "abc");
  EXPECT_THROW(c.model_config(), ConfigError);
}

TEST(RunConfig, ResolvedTextRoundTrips) {
  RunConfig a;
  a.set("prompt", "quote \" hash # backslash \\ end");
  a.set("steps", "17");
  RunConfig b;
  b.merge_text(a.resolved_text());
  EXPECT_EQ(a.values(), b.values());
}

TEST(RunConfig, CoversEveryConfigStruct) {
  for (const char* key : {"n_layers", "dim", "n_heads", "vocab", "max_context", "ffn_hidden", "steps", "batch_size",
                          "context_len", "learning_rate", "p_max", "time_curriculum", "layer_curve", "e_scale",
                          "exit_curriculum", "rotation", "exit_layer", "num_speculations", "max_new_tokens", "mode",
                          "reuse_kvq", "corpus", "checkpoint", "output_dir"}) {
    EXPECT_TRUE(RunConfig::is_known(key)) << key;
  }
}

TEST_F(CliTest, TrainWritesCheckpointLogAndConfig) {
  EXPECT_TRUE(fs::exists(checkpoint()));
  EXPECT_EQ(lines_of(read_file(path("model/train_log.csv"))).size(), 11u);
  EXPECT_TRUE(fs::exists(path("model/resolved_config.cfg")));
}

TEST_F(CliTest, TrainRerunFromEchoedConfigIsByteIdentical) {
  const auto r = run_cli({"train", "--config", path("model/resolved_config.cfg"), "--output_dir", path("model2")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(checkpoint()), read_file(path("model2/checkpoint.lskp")));
}

TEST_F(CliTest, TrainRejectsBadConfigBeforeWork) {
  auto r = run_cli({"train", "--config", cfg(), "--corpus", path("corpus.txt"), "--p_max", "1.5", "--output_dir", path("bad")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  EXPECT_FALSE(fs::exists(path("bad")));
  r = run_cli({"train", "--config", cfg(), "--corpus", path("missing.txt")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  r = run_cli({"train", "--config", cfg(), "--bogus", "1"});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  r = run_cli({"train", "--config", path("nope.cfg")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
}

TEST_F(CliTest, GenerateModesAgree) {
  auto gen = [&](const std::string& mode, const std::string& E, const std::string& out) {
    return run_cli({"generate", "--config", cfg(), "--checkpoint", checkpoint(), "--prompt", "The cat", "--mode", mode,
                    "--exit_layer", E, "--output_dir", path(out)});
  };
  const auto ar = gen("autoregressive", "3", "g_ar");
  const auto ss = gen("self_speculative", "1", "g_ss");
  const auto ee = gen("early_exit", "3", "g_ee");
  ASSERT_EQ(ar.code, 0) << ar.err;
  ASSERT_EQ(ss.code, 0) << ss.err;
  ASSERT_EQ(ee.code, 0) << ee.err;
  EXPECT_EQ(ss.out, ar.out);
  EXPECT_EQ(ee.out, ar.out);
  const auto report = nlohmann::json::parse(read_file(path("g_ss/generate_report.json")));
  EXPECT_EQ(report["tokens_emitted"], 12);
  EXPECT_GE(report["acceptance_rate"].get<double>(), 0.0);
}

TEST_F(CliTest, GenerateValidation) {
  auto r = run_cli({"generate", "--config", cfg(), "--checkpoint", checkpoint(), "--prompt", "", "--output_dir", path("g")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  r = run_cli({"generate", "--config", cfg(), "--checkpoint", checkpoint(), "--prompt", "x", "--exit_layer", "4",
               "--output_dir", path("g")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  r = run_cli({"generate", "--config", cfg(), "--checkpoint", checkpoint(), "--prompt", "x", "--num_speculations", "0",
               "--output_dir", path("g")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
  r = run_cli({"generate", "--config", cfg(), "--checkpoint", path("corpus.txt"), "--prompt", "x", "--output_dir", path("g")});
  EXPECT_EQ(r.code, cli::kExitRuntimeError);
}

TEST_F(CliTest, BenchCsvAndSummary) {
  const auto r = run_cli({"bench", "--config", cfg(), "--checkpoint", checkpoint(), "--prompts_file", path("prompts.txt"),
                          "--exit_layer", "1", "--output_dir", path("bench")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(read_file(path("bench/bench.csv")));
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[0], cli::kBenchCsvHeader);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i], ',');
    ASSERT_EQ(f.size(), 8u);
    const double acc = std::stod(f[5]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
  const auto md = lines_of(read_file(path("bench/bench_summary.md")));
  ASSERT_EQ(md.size(), 5u);
  std::vector<double> ms, speedups;
  for (std::size_t i = 2; i < md.size(); ++i) {
    const auto cells = split(md[i], '|');
    ms.push_back(std::stod(cells[6]));
    speedups.push_back(std::stod(cells[8]));
  }
  for (std::size_t i = 0; i < ms.size(); ++i) EXPECT_NEAR(speedups[i], ms[0] / ms[i], 1e-3 + 1e-4 * ms[0] / ms[i]);
}

TEST_F(CliTest, BenchRejectsEmptyPromptFile) {
  std::ofstream(path("empty.txt")) << "\n\n";
  const auto r = run_cli({"bench", "--config", cfg(), "--checkpoint", checkpoint(), "--prompts_file", path("empty.txt"),
                          "--exit_layer", "1", "--output_dir", path("bench_e")});
  EXPECT_EQ(r.code, cli::kExitConfigError);
}

TEST_F(CliTest, ProbeOneTokenGivesOneRowPerLayer) {
  const auto r = run_cli({"probe", "--config", cfg(), "--checkpoint", checkpoint(), "--prompt", "The", "--n_tokens", "1",
                          "--output_dir", path("probe")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(read_file(path("probe/probe.csv"))).size(), 1u + 3u);
  const auto s = nlohmann::json::parse(read_file(path("probe/probe_summary.json")));
  EXPECT_GE(s["mean_earliest_stable_layer"].get<double>(), 1.0);
  EXPECT_LE(s["mean_earliest_stable_layer"].get<double>(), 3.0);
}

TEST_F(CliTest, EvalPplReportsEveryLayer) {
  const auto r = run_cli({"eval-ppl", "--config", cfg(), "--checkpoint", checkpoint(), "--corpus", path("corpus.txt"),
                          "--output_dir", path("ppl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_file(path("ppl/eval_ppl.json")));
  ASSERT_EQ(j.size(), 3u);
  for (const auto& e : j) EXPECT_GT(e["perplexity"].get<double>(), 1.0);
}

TEST(Cli, UnknownCommandIsConfigError) {
  EXPECT_EQ(run_cli({"serve"}).code, cli::kExitConfigError);
  EXPECT_EQ(run_cli({}).code, cli::kExitConfigError);
  EXPECT_EQ(run_cli({"train", "--help"}).code, cli::kExitOk);
}
