#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "hovertrans/model.hpp"
#include "hovertrans/train.hpp"

namespace hovertrans {

// Every setting of every command, flat. Keys map 1:1 to schema entries.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::string manifest;
  std::string image_root;  // defaults to the manifest's directory
  std::string output_dir;
  std::string folds;  // fold CSV (split writes it, train reads it)
  std::string checkpoint;
  std::string image;
  std::string scores;
  std::string scores_b;

  std::size_t k = 5;
  double threshold = kDefaultThreshold;
  bool birads_subgroups = false;

  std::string method = "activation";
  double alpha = 0.5;

  bool variants = true;
  bool grid = false;
  std::size_t synthetic_count = 64;
  std::uint64_t synthetic_seed = 0;
};

struct ConfigKey {
  std::string key;
  std::string type;  // int, float, bool, string, list, choice
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_schema();

// Preset applied before any other key: "full" (the full-size defaults) or
// "desk" (tiny model at 64 px, short schedule, synthetic data for ablate).
RunConfig profile_config(const std::string& profile);

// Parses a flat "key = value" file ('#' starts a comment). Unknown keys and
// malformed lines are ConfigErrors naming the file, line and key.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// Applies `profile` (if present) and then every other key in schema order.
// Validates the merged model and training configuration.
RunConfig make_run_config(const std::map<std::string, std::string>& values);

// "key = value" lines for every schema key, in schema order.
std::string dump_run_config(const RunConfig& config);

// Schema reference printed by --help.
std::string schema_help();

const std::vector<std::string>& command_names();

// Runs one command. Returns 0 on success, 1 for validation, configuration
// and input errors, 2 for runtime failures; messages go to err.
int run(const std::string& command, const RunConfig& config, std::ostream& out, std::ostream& err);

// Full command-line entry point: `hovertrans <command> [--config FILE] [--key value ...]`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hovertrans
