#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "forge/config.hpp"
#include "forge/training.hpp"

namespace forge {

// Everything a training run can be configured with.
struct RunSettings {
  DecoderConfig decoder;
  TrainConfig train;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Flat "key = value" lines; '#' starts a comment. Dashes in keys read as underscores.
KeyValues parse_config_text(std::string_view text);
KeyValues read_config_file(const std::filesystem::path& path);

std::vector<std::string> known_setting_keys();
// ConfigError for unknown keys or values that do not parse.
void apply_setting(RunSettings& settings, const std::string& key, const std::string& value);

// Family defaults, then the file, then the command line. The decoder family is
// taken from the last source that names it.
RunSettings resolve_settings(const KeyValues& file, const KeyValues& command_line);

// Every key with its effective value, in known_setting_keys() order.
KeyValues effective_settings(const RunSettings& settings);
std::string format_settings(const KeyValues& values);

}  // namespace forge
