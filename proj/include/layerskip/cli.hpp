#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "layerskip/run_config.hpp"

namespace layerskip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitRuntimeError = 3;

/// Entry point shared by the `layerskip` binary and the tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_generate(const RunConfig& config, std::ostream& out);
int cmd_bench(const RunConfig& config, std::ostream& out);
int cmd_probe(const RunConfig& config, std::ostream& out);
int cmd_eval_ppl(const RunConfig& config, std::ostream& out);

/// Bench CSV header row.
inline constexpr const char* kBenchCsvHeader = "mode,E,d,prompt_id,tokens,acceptance_rate,ms_per_token,layer_token_units";

}  // namespace layerskip::cli
