#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedcrfd/federation.hpp"
#include "fedcrfd/partition.hpp"

namespace fedcrfd::cli {

/// Everything a command needs: federation and data parameters plus run plumbing.
///
/// Text form is TOML-style: `[section]` headers and `key = value` lines, `#` comments.
/// Values are integers, floats, booleans, bare or quoted strings, and `[a, b]` lists.
/// Sections: federation, data, model, run. Unknown sections and keys are rejected.
struct RunConfig {
  FederationConfig federation;
  DataConfig data;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path out = "out";
  std::size_t checkpoint_every = 10;
  std::size_t parallel_trials = 1;

  /// federation.clients; when set, unset client_modalities/masks are derived from it.
  std::optional<std::size_t> clients;
  bool modalities_set = false;
  bool masks_set = false;

  /// Resolves derived fields (client lists, arch sizes, seeds) and validates everything.
  void finalize();
};

/// Applies one `section.key = value` setting; throws ConfigError on unknown keys or bad values.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

/// Parses config text; `origin` names the source in error messages. Not finalized.
RunConfig parse_config(std::string_view text, const std::string& origin = "<config>");

/// Reads and parses a config file. A missing or unreadable file is a ConfigError.
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text of a finalized config; parse_config of it reproduces the same settings.
std::string config_text(const RunConfig& config);

/// Mask specs cycled when federation.clients is set without data.masks.
const std::vector<MaskSpec>& default_mask_cycle();

}  // namespace fedcrfd::cli
