#include "layerskip/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "layerskip/checkpoint.hpp"
#include "layerskip/decoder.hpp"
#include "layerskip/probe_eval.hpp"
#include "layerskip/tokenizer.hpp"
#include "layerskip/trainer.hpp"

namespace layerskip::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError(key + " is required");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(key + ": cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const RunConfig& config, const std::string& key) {
  const std::string& path = config.get(key);
  if (path.empty()) throw ConfigError(key + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(key + ": no such file '" + path + "'");
}

fs::path prepare_output_dir(const RunConfig& config) {
  const fs::path dir = config.get("output_dir");
  if (dir.empty()) throw ConfigError("output_dir must not be empty");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("output_dir: cannot create '" + dir.string() + "'");
  return dir;
}

void echo_config(const RunConfig& config, const fs::path& dir, std::ostream& out) {
  const std::string text = config.resolved_text();
  std::ofstream(dir / "resolved_config.cfg") << text;
  out << "# resolved config\n" << text;
}

Checkpoint load_model(const RunConfig& config) {
  require_file(config, "checkpoint");
  Checkpoint ckpt = load_checkpoint(config.get("checkpoint"));
  if (ckpt.params.config.vocab < ByteTokenizer::kVocabSize) {
    throw ConfigError("checkpoint vocabulary is smaller than the byte tokenizer");
  }
  return ckpt;
}

DecodeConfig checked_decode_config(const RunConfig& config, const ModelConfig& model) {
  DecodeConfig dc = config.decode_config();
  dc.validate(model);
  if (dc.mode == DecodeMode::kSelfSpeculative && dc.exit_layer >= model.n_layers) {
    throw ConfigError("self_speculative mode needs exit_layer < n_layers (" + std::to_string(model.n_layers) + ")");
  }
  return dc;
}

json report_json(const DecodeReport& r) {
  return json{{"tokens_emitted", r.tokens_emitted},
              {"rounds", r.rounds},
              {"drafts_proposed", r.drafts_proposed},
              {"drafts_accepted", r.drafts_accepted},
              {"acceptance_rate", r.acceptance_rate},
              {"layer_token_units", r.layer_token_units},
              {"prefill_units", r.prefill_units},
              {"draft_units", r.draft_units},
              {"verify_units", r.verify_units},
              {"bonus_units", r.bonus_units},
              {"layer_pass_units", r.layer_pass_units},
              {"wall_ms", r.wall_ms},
              {"wall_ms_per_token", r.wall_ms_per_token}};
}

std::vector<int> prompt_tokens(const std::string& text) {
  if (text.empty()) throw ConfigError("prompt must not be empty");
  return ByteTokenizer::encode(text);
}

}  // namespace

int cmd_train(const RunConfig& config, std::ostream& out) {
  require_file(config, "corpus");
  const ModelConfig model = config.model_config();
  const TrainConfig train = config.train_config();
  if (config.has_value("heldout")) require_file(config, "heldout");
  const fs::path dir = prepare_output_dir(config);
  echo_config(config, dir, out);

  const std::vector<int> corpus = ByteTokenizer::encode(read_text("corpus", config.get("corpus")));
  TrainRunOptions options;
  if (config.has_value("heldout")) options.heldout = ByteTokenizer::encode(read_text("heldout", config.get("heldout")));
  options.output_dir = dir;
  options.metadata = config.values();
  // Where the files land is not part of the run; keeps reruns byte-identical.
  options.metadata.erase("output_dir");
  options.progress = &out;
  const TrainResult result = train_run(corpus, model, train, options);
  out << "wrote " << (dir / "checkpoint.lskp").string() << " after " << result.log.steps.size() << " steps\n";
  return kExitOk;
}

int cmd_generate(const RunConfig& config, std::ostream& out) {
  const std::vector<int> prompt = prompt_tokens(config.get("prompt"));
  const Checkpoint ckpt = load_model(config);
  const DecodeConfig dc = checked_decode_config(config, ckpt.params.config);
  const fs::path dir = prepare_output_dir(config);
  std::ofstream(dir / "resolved_config.cfg") << config.resolved_text();

  const Generation g = generate(ckpt.params, prompt, dc);
  out << ByteTokenizer::decode(g.tokens) << '\n';
  json report = report_json(g.report);
  report["mode"] = to_string(dc.mode);
  report["exit_layer"] = dc.exit_layer;
  report["num_speculations"] = dc.num_speculations;
  report["tokens"] = g.tokens;
  std::ofstream(dir / "generate_report.json") << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_bench(const RunConfig& config, std::ostream& out) {
  require_file(config, "prompts_file");
  const Checkpoint ckpt = load_model(config);
  DecodeConfig base = checked_decode_config(config, ckpt.params.config);
  base.mode = DecodeMode::kSelfSpeculative;
  if (base.exit_layer >= ckpt.params.config.n_layers) throw ConfigError("bench needs exit_layer < n_layers");
  const fs::path dir = prepare_output_dir(config);
  std::ofstream(dir / "resolved_config.cfg") << config.resolved_text();

  std::vector<std::vector<int>> prompts;
  {
    std::istringstream in(read_text("prompts_file", config.get("prompts_file")));
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) prompts.push_back(ByteTokenizer::encode(line));
    }
  }
  if (prompts.empty()) throw ConfigError("prompts_file contains no prompts");

  const DecodeMode modes[] = {DecodeMode::kAutoregressive, DecodeMode::kEarlyExit, DecodeMode::kSelfSpeculative};
  std::ofstream csv(dir / "bench.csv");
  csv << kBenchCsvHeader << '\n';
  std::map<DecodeMode, DecodeReport> totals;
  for (DecodeMode mode : modes) {
    DecodeConfig dc = base;
    dc.mode = mode;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const Generation g = generate(ckpt.params, prompts[i], dc);
      totals[mode] += g.report;
      csv << to_string(mode) << ',' << (mode == DecodeMode::kAutoregressive ? ckpt.params.config.n_layers : dc.exit_layer)
          << ',' << (mode == DecodeMode::kSelfSpeculative ? dc.num_speculations : 0) << ',' << i << ','
          << g.report.tokens_emitted << ',' << g.report.acceptance_rate << ',' << g.report.wall_ms_per_token << ','
          << g.report.layer_token_units << '\n';
    }
  }

  std::ostringstream md;
  md << "| Mode | E | d | Tokens | Acceptance | ms/token | Tokens/s | Speedup |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  const DecodeReport& ar = totals[DecodeMode::kAutoregressive];
  for (DecodeMode mode : modes) {
    const DecodeReport& r = totals[mode];
    md << "| " << to_string(mode) << " | "
       << (mode == DecodeMode::kAutoregressive ? ckpt.params.config.n_layers : base.exit_layer) << " | "
       << (mode == DecodeMode::kSelfSpeculative ? std::to_string(base.num_speculations) : "-") << " | "
       << r.tokens_emitted << " | "
       << (mode == DecodeMode::kSelfSpeculative ? std::to_string(r.acceptance_rate) : "-") << " | "
       << std::setprecision(6) << r.wall_ms_per_token << " | " << std::fixed << std::setprecision(1)
       << (r.wall_ms > 0 ? 1000.0 * r.tokens_emitted / r.wall_ms : 0.0) << " | " << std::setprecision(3)
       << speedup(ar, r) << "x |\n"
       << std::defaultfloat;
  }
  std::ofstream(dir / "bench_summary.md") << md.str();
  out << md.str();
  return kExitOk;
}

int cmd_probe(const RunConfig& config, std::ostream& out) {
  const std::vector<int> prompt = prompt_tokens(config.get("prompt"));
  const int n_tokens = config.get_int("n_tokens");
  if (n_tokens < 1) throw ConfigError("n_tokens must be >= 1");
  const Checkpoint ckpt = load_model(config);
  const fs::path dir = prepare_output_dir(config);
  std::ofstream(dir / "resolved_config.cfg") << config.resolved_text();

  const auto preds = layerwise_predictions(ckpt.params, prompt, n_tokens);
  std::ofstream csv(dir / "probe.csv");
  csv << "token_index,layer,predicted_token_id,is_final_prediction\n";
  for (const auto& p : preds) {
    for (std::size_t l = 0; l < p.exit_predictions.size(); ++l) {
      csv << p.token_index << ',' << (l + 1) << ',' << p.exit_predictions[l] << ','
          << (p.exit_predictions[l] == p.final_token ? 1 : 0) << '\n';
    }
  }
  const ProbeSummary s = summarize(preds, ckpt.params.config.n_layers);
  std::vector<int> finals;
  for (const auto& p : preds) finals.push_back(p.final_token);
  const json summary{{"n_tokens", s.n_tokens},
                     {"n_layers", s.n_layers},
                     {"mean_earliest_stable_layer", s.mean_earliest_stable_layer},
                     {"mean_earliest_correct_layer", s.mean_earliest_correct_layer},
                     {"generated_text", ByteTokenizer::decode(finals)}};
  std::ofstream(dir / "probe_summary.json") << summary.dump(2) << '\n';
  out << summary.dump(2) << '\n';
  return kExitOk;
}

int cmd_eval_ppl(const RunConfig& config, std::ostream& out) {
  const std::string corpus_key = config.has_value("heldout") ? "heldout" : "corpus";
  require_file(config, corpus_key);
  const Checkpoint ckpt = load_model(config);
  const int context_len = config.get_int("context_len");
  if (context_len < 1 || context_len > ckpt.params.config.max_context) throw ConfigError("context_len out of range");
  const fs::path dir = prepare_output_dir(config);
  std::ofstream(dir / "resolved_config.cfg") << config.resolved_text();

  const std::vector<int> tokens = ByteTokenizer::encode(read_text(corpus_key, config.get(corpus_key)));
  const auto ppl = perplexity_per_layer(ckpt.params, tokens, context_len, config.get_int("eval_windows"));
  json j = json::array();
  for (std::size_t l = 0; l < ppl.size(); ++l) {
    j.push_back(json{{"layer", l + 1}, {"perplexity", ppl[l]}});
    out << "layer " << (l + 1) << " perplexity " << ppl[l] << '\n';
  }
  std::ofstream(dir / "eval_ppl.json") << j.dump(2) << '\n';
  return kExitOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layer-skip training, early-exit inference and self-speculative decoding"};
  app.require_subcommand(1);
  std::map<std::string, std::string> flags;
  std::string config_path;
  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&, std::ostream&);
  };
  const Command commands[] = {
      {"train", "train a model with layer dropout and early-exit loss", cmd_train},
      {"generate", "generate text from a prompt", cmd_generate},
      {"bench", "compare decoding modes over a prompt file", cmd_bench},
      {"probe", "per-layer unembedding predictions", cmd_probe},
      {"eval-ppl", "per-layer held-out perplexity", cmd_eval_ppl},
  };
  std::map<std::string, CLI::Option*> options;
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "key = value config file");
    for (const auto& key : RunConfig::keys()) {
      options[std::string(c.name) + "/" + key] = sub->add_option("--" + key, flags[key], RunConfig::description(key));
    }
    subs.emplace_back(sub, &c);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::ostringstream msg;
    app.exit(e, msg, msg);
    err << msg.str();
    return e.get_exit_code() == 0 ? kExitOk : kExitConfigError;
  }

  for (const auto& [sub, command] : subs) {
    if (!sub->parsed()) continue;
    try {
      RunConfig config;
      if (!config_path.empty()) config.merge_file(config_path);
      for (const auto& key : RunConfig::keys()) {
        if (options[std::string(command->name) + "/" + key]->count() > 0) config.set(key, flags[key]);
      }
      return command->fn(config, out);
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << '\n';
      return kExitConfigError;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitRuntimeError;
    }
  }
  return kExitConfigError;
}

}  // namespace layerskip::cli
