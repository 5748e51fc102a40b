#include "forge/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>

#include "forge/encoder.hpp"
#include "forge/error.hpp"

namespace forge {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string normalise_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
    throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
  return out;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("setting '" + key + "' expects true or false, got '" + v + "'");
}

std::string show(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunSettings&, const std::string&)> set;
  std::function<std::string(const RunSettings&)> get;
};

#define SIZE_FIELD(name, member)                                                       \
  {name,                                                                               \
   {[](RunSettings& s, const std::string& v) { s.member = parse_size(name, v); },     \
    [](const RunSettings& s) { return std::to_string(s.member); }}}
#define REAL_FIELD(name, member)                                                       \
  {name,                                                                               \
   {[](RunSettings& s, const std::string& v) { s.member = parse_real(name, v); },     \
    [](const RunSettings& s) { return show(s.member); }}}
#define FLAG_FIELD(name, member)                                                       \
  {name,                                                                               \
   {[](RunSettings& s, const std::string& v) { s.member = parse_flag(name, v); },     \
    [](const RunSettings& s) { return std::string(s.member ? "true" : "false"); }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"decoder",
       {[](RunSettings& s, const std::string& v) { s.decoder.family = parse_decoder_family(v); },
        [](const RunSettings& s) { return to_string(s.decoder.family); }}},
      {"attention",
       {[](RunSettings& s, const std::string& v) { s.decoder.attention = parse_attention_kind(v); },
        [](const RunSettings& s) { return to_string(s.decoder.attention); }}},
      SIZE_FIELD("hidden", decoder.hidden),
      SIZE_FIELD("layers", decoder.layers),
      SIZE_FIELD("heads", decoder.heads),
      SIZE_FIELD("ffn_inner", decoder.ffn_inner),
      SIZE_FIELD("kernel_width", decoder.kernel_width),
      FLAG_FIELD("concat_global", decoder.concat_global),
      SIZE_FIELD("embed_dim", decoder.embed_dim),
      REAL_FIELD("dropout", decoder.dropout),
      {"positional",
       {[](RunSettings& s, const std::string& v) { s.decoder.positional = parse_positional_kind(v); },
        [](const RunSettings& s) { return to_string(s.decoder.positional); }}},
      SIZE_FIELD("max_positions", decoder.max_positions),
      SIZE_FIELD("attention_hidden", decoder.attention_hidden),
      SIZE_FIELD("feature_dim", decoder.feature_dim),
      SIZE_FIELD("projected_dim", decoder.projected_dim),
      FLAG_FIELD("weight_norm", decoder.weight_norm),
      SIZE_FIELD("batch_size", train.batch_size),
      REAL_FIELD("lr", train.lr),
      REAL_FIELD("clip_abs", train.clip_abs),
      REAL_FIELD("plateau_factor", train.plateau_factor),
      SIZE_FIELD("plateau_patience", train.plateau_patience),
      REAL_FIELD("plateau_threshold", train.plateau_threshold),
      SIZE_FIELD("checkpoint_interval", train.checkpoint_interval),
      SIZE_FIELD("max_epochs", train.max_epochs),
      SIZE_FIELD("max_steps", train.max_steps),
      {"seed",
       {[](RunSettings& s, const std::string& v) { s.train.seed = parse_u64("seed", v); },
        [](const RunSettings& s) { return std::to_string(s.train.seed); }}},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields())
    if (name == key) return &field;
  return nullptr;
}

}  // namespace

KeyValues parse_config_text(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::string trimmed = trim(line);
    if (!trimmed.empty()) {
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      std::string key = normalise_key(trim(std::string_view(trimmed).substr(0, eq)));
      std::string value = trim(std::string_view(trimmed).substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
      out.emplace_back(std::move(key), std::move(value));
    }
    start = end + 1;
  }
  return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return parse_config_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::vector<std::string> known_setting_keys() {
  std::vector<std::string> keys;
  for (const auto& [name, field] : fields()) keys.push_back(name);
  return keys;
}

void apply_setting(RunSettings& settings, const std::string& key, const std::string& value) {
  const Field* f = find_field(normalise_key(key));
  if (!f) throw ConfigError("unknown setting '" + key + "'");
  f->set(settings, value);
}

RunSettings resolve_settings(const KeyValues& file, const KeyValues& command_line) {
  std::string family = "arnn";
  for (const auto* source : {&file, &command_line})
    for (const auto& [k, v] : *source)
      if (normalise_key(k) == "decoder") family = v;
  RunSettings s;
  s.decoder = DecoderConfig::defaults_for(parse_decoder_family(family));
  for (const auto* source : {&file, &command_line})
    for (const auto& [k, v] : *source) apply_setting(s, k, v);
  return s;
}

KeyValues effective_settings(const RunSettings& settings) {
  KeyValues out;
  for (const auto& [name, field] : fields()) out.emplace_back(name, field.get(settings));
  return out;
}

std::string format_settings(const KeyValues& values) {
  std::string out;
  for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  return out;
}

}  // namespace forge
