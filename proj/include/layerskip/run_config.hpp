#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "layerskip/decoder.hpp"
#include "layerskip/model.hpp"
#include "layerskip/trainer.hpp"

namespace layerskip {

/// Flat key=value run configuration. Every key has a default; files and
/// command-line flags override them (flags last). Unknown keys are rejected.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<std::string>& keys();
  static bool is_known(const std::string& key);
  static std::string default_value(const std::string& key);
  static std::string description(const std::string& key);

  /// Parses "key = value" lines; '#' starts a comment.
  void merge_text(const std::string& text, const std::string& origin = "<config>");
  void merge_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  bool has_value(const std::string& key) const { return !get(key).empty(); }
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;  // resolved against model_config()
  DecodeConfig decode_config() const;

  /// Every key in sorted order, one "key = value" per line.
  std::string resolved_text() const;
  std::map<std::string, std::string> values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace layerskip
