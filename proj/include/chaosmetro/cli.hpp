#pragma once

// Command-line front end: configuration, dispatch, CSV + manifest emission.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chaosmetro/propagation.hpp"

namespace chaosmetro::cli {

inline constexpr const char* kToolName = "chaosmetro";
inline constexpr const char* kToolVersion = "0.3.0";
/// Default output directory when --out is not given.
inline constexpr const char* kOutputDirEnv = "CHAOSMETRO_OUTPUT_DIR";
inline constexpr const char* kDefaultOutputDir = "chaosmetro-out";

enum ExitCode : int { kExitOk = 0, kExitNumerical = 1, kExitUsage = 2 };

/// Effective configuration of one run. `values` holds every key accepted by
/// the command after applying defaults < config file < flags; the typed
/// fields are parsed from it.
struct RunConfig {
  std::string command;
  std::map<std::string, std::string> values;

  ModelParams model;
  int steps = kDefaultSteps;
  SplitOrder split_order = kDefaultSplitOrder;
  StepMethod method = StepMethod::SplitStep;
  std::optional<double> epsilon;  ///< unset: auto_epsilon(t, J)
  bool richardson = true;
  double probability_floor = 1e-12;
  unsigned workers = 0;

  std::filesystem::path output_dir;
  bool overwrite = false;

  /// file -> sha256 from a previous manifest; when set, execute() fails with
  /// exit code 1 unless every output reproduces.
  std::map<std::string, std::string> expected_checksums;
};

/// Keys accepted by `command` (flag --key-name or config key key_name).
std::vector<std::string> command_keys(const std::string& command);
std::vector<std::string> commands();

/// Reads a flat `key = value` file ('#' starts a comment). Keys may use '-'
/// or '_'; unknown keys are rejected by the caller.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

/// Builds the typed config; throws ValidationError naming the bad field.
RunConfig make_config(const std::string& command, const std::map<std::string, std::string>& file_values,
                      const std::map<std::string, std::string>& flag_values);

/// Parses argv (subcommand first) into a config. Throws UsageError /
/// ValidationError. Returns nullopt when help was printed.
std::optional<RunConfig> parse_config(int argc, const char* const* argv);

/// Runs one configured command and writes its outputs; returns the exit code.
int execute(const RunConfig& config);

/// Full entry point: parse, execute, map exceptions to exit codes.
int run(int argc, const char* const* argv);

/// Lower-case hex SHA-256 of a file.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace chaosmetro::cli
