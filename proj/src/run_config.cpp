#include "layerskip/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "layerskip/tokenizer.hpp"

namespace layerskip {

namespace {

struct KeySpec {
  const char* key;
  const char* default_value;
  const char* help;
};

// clang-format off
const KeySpec kKeys[] = {
    {"n_layers", "8", "transformer layers L"},
    {"dim", "128", "model width"},
    {"n_heads", "4", "attention heads"},
    {"vocab", "257", "vocabulary size (byte tokenizer: 257)"},
    {"max_context", "256", "maximum positions"},
    {"ffn_hidden", "256", "gated FFN hidden width"},
    {"steps", "1000", "training steps T"},
    {"batch_size", "4", "sequences per step"},
    {"context_len", "64", "training window length"},
    {"learning_rate", "0.001", "peak learning rate"},
    {"lr_schedule", "cosine", "constant|cosine"},
    {"warmup_fraction", "0.02", "cosine warmup fraction"},
    {"dropout_lr_multiplier", "2.0", "learning-rate factor when p_max > 0"},
    {"beta1", "0.9", "AdamW beta1"},
    {"beta2", "0.95", "AdamW beta2"},
    {"weight_decay", "0.1", "AdamW weight decay"},
    {"grad_clip", "1.0", "global gradient-norm clip (0 disables)"},
    {"seed", "1234", "run seed"},
    {"p_max", "0.1", "maximum layer-dropout rate"},
    {"time_curriculum", "constant", "constant|exponential"},
    {"layer_curve", "exponential", "exponential|uniform"},
    {"e_scale", "0.2", "early-exit loss scale"},
    {"exit_curriculum", "rotational", "rotational|gradual|all"},
    {"rotation", "8", "rotational curriculum dilation R"},
    {"always_include_last", "false", "keep last-layer loss on every step"},
    {"eval_every", "0", "held-out eval/checkpoint interval (0: end only)"},
    {"eval_windows", "16", "held-out windows per eval"},
    {"exit_layer", "4", "early-exit / draft layer E"},
    {"num_speculations", "4", "draft tokens per round d"},
    {"max_new_tokens", "512", "generation budget"},
    {"mode", "self_speculative", "autoregressive|early_exit|self_speculative"},
    {"reuse_kvq", "true", "resume verification from the exit-state cache"},
    {"stop_at_eot", "true", "stop at the end-of-text token"},
    {"n_tokens", "16", "tokens generated by probe"},
    {"corpus", "", "training text file"},
    {"heldout", "", "held-out text file (default: last 10% of corpus)"},
    {"checkpoint", "", "checkpoint path"},
    {"output_dir", "out", "artifact directory"},
    {"prompt", "", "prompt text"},
    {"prompts_file", "", "bench prompts, one per line"},
};
// clang-format on

const KeySpec* find(const std::string& key) {
  for (const auto& k : kKeys) {
    if (key == k.key) return &k;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_[k.key] = k.default_value;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> out;
    for (const auto& k : kKeys) out.emplace_back(k.key);
    return out;
  }();
  return all;
}

bool RunConfig::is_known(const std::string& key) { return find(key) != nullptr; }

std::string RunConfig::default_value(const std::string& key) {
  const KeySpec* k = find(key);
  if (!k) throw ConfigError("unknown config key '" + key + "'");
  return k->default_value;
}

std::string RunConfig::description(const std::string& key) {
  const KeySpec* k = find(key);
  return k ? k->help : "";
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    const std::string head = trim(line.substr(0, std::min(eq, line.find('#'))));
    if (eq == std::string::npos || line.find('#') < eq) {
      if (!head.empty()) throw ConfigError(where + ": expected key = value");
      continue;
    }
    if (!is_known(head)) throw ConfigError(where + ": unknown config key '" + head + "'");
    std::string value = trim(line.substr(eq + 1));
    if (!value.empty() && value.front() == '"') {
      // Quoted values are JSON strings and may contain '#' or escapes.
      try {
        std::size_t end = 1;
        while (end < value.size() && value[end] != '"') end += value[end] == '\\' ? 2 : 1;
        const std::string rest = trim(value.substr(std::min(end + 1, value.size())));
        if (!rest.empty() && rest.front() != '#') throw std::invalid_argument("trailing text");
        value = nlohmann::json::parse(value.substr(0, end + 1)).get<std::string>();
      } catch (const std::exception&) {
        throw ConfigError(where + ": malformed quoted value for '" + head + "'");
      }
    } else {
      if (const auto hash = value.find('#'); hash != std::string::npos) value = trim(value.substr(0, hash));
    }
    values_[head] = value;
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str(), path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + s + "'");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.n_layers = get_int("n_layers");
  c.dim = get_int("dim");
  c.n_heads = get_int("n_heads");
  c.vocab = get_int("vocab");
  c.max_context = get_int("max_context");
  c.ffn_hidden = get_int("ffn_hidden");
  c.validate();
  if (c.vocab < ByteTokenizer::kVocabSize) {
    throw ConfigError("vocab must be >= " + std::to_string(ByteTokenizer::kVocabSize) + " for the byte tokenizer");
  }
  return c;
}

TrainConfig RunConfig::train_config() const {
  const ModelConfig model = model_config();
  TrainConfig c;
  c.steps = get_int("steps");
  c.batch_size = get_int("batch_size");
  c.context_len = get_int("context_len");
  c.learning_rate = get_double("learning_rate");
  c.lr_schedule = parse_lr_schedule(get("lr_schedule"));
  c.warmup_fraction = get_double("warmup_fraction");
  c.dropout_lr_multiplier = get_double("dropout_lr_multiplier");
  c.beta1 = get_double("beta1");
  c.beta2 = get_double("beta2");
  c.weight_decay = get_double("weight_decay");
  c.grad_clip = get_double("grad_clip");
  c.seed = get_u64("seed");
  c.dropout.p_max = get_double("p_max");
  c.dropout.time_curriculum = parse_time_curriculum(get("time_curriculum"));
  c.dropout.layer_curve = parse_layer_curve(get("layer_curve"));
  c.early_exit.e_scale = get_double("e_scale");
  c.early_exit.curriculum = parse_exit_curriculum(get("exit_curriculum"));
  c.early_exit.rotation = get_int("rotation");
  c.early_exit.always_include_last = get_bool("always_include_last");
  c.eval_every = get_int("eval_every");
  c.eval_windows = get_int("eval_windows");
  c.resolve(model);
  return c;
}

DecodeConfig RunConfig::decode_config() const {
  DecodeConfig c;
  c.exit_layer = get_int("exit_layer");
  c.num_speculations = get_int("num_speculations");
  c.max_new_tokens = get_int("max_new_tokens");
  c.mode = parse_decode_mode(get("mode"));
  c.reuse_kvq = get_bool("reuse_kvq");
  c.eot_token = get_bool("stop_at_eot") ? ByteTokenizer::kEndOfText : -1;
  return c;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) {
    const bool plain = v.find_first_of("#\"\n\r\\") == std::string::npos && trim(v) == v;
    out << k << " = " << (plain ? v : nlohmann::json(v).dump()) << '\n';
  }
  return out.str();
}

}  // namespace layerskip
