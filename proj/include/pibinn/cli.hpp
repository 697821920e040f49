#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pibinn/data.hpp"
#include "pibinn/train.hpp"

namespace pibinn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

/// Flags shared by every subcommand.
struct Options {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  /// diagnose only: comma-separated support, st|ht, delta override.
  std::optional<std::string> support;
  std::optional<std::string> variant;
  std::optional<double> delta;
};

/// A dataset named by a config: a directory written by gen-data or an
/// inline spec generated in memory.
struct DatasetRef {
  std::optional<std::filesystem::path> dir;
  std::optional<DatasetSpec> spec;

  Dataset resolve() const;
  bool same_as(const DatasetRef& other) const;
};

/// Parses {"dataset": "dir"} or {"dataset": {...}}; relative paths are taken
/// from the config file's directory.
DatasetRef dataset_ref_from_json(const nlohmann::json& j, const std::filesystem::path& base);

/// Reads a JSON config; throws IoError when unreadable and ConfigError when
/// it is not a JSON object.
nlohmann::json read_config(const std::filesystem::path& path);

int cmd_gen_data(const Options& opts);
int cmd_train(const Options& opts);
int cmd_eval(const Options& opts);
int cmd_diagnose(const Options& opts);
int cmd_compare(const Options& opts);
int cmd_bits(const Options& opts);
int cmd_fmt(const Options& opts);

/// Argument parsing, PIBINN_LOG handling and exception-to-exit-code mapping.
int run(int argc, char** argv);

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e) noexcept;

}  // namespace pibinn::cli
