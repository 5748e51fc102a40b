#include "forge/config.hpp"

#include <set>

#include "forge/error.hpp"

namespace forge {

std::string to_string(DecoderFamily family) {
  switch (family) {
    case DecoderFamily::arnn: return "arnn";
    case DecoderFamily::transformer: return "transformer";
    case DecoderFamily::fcn: return "fcn";
  }
  return "?";
}

DecoderFamily parse_decoder_family(const std::string& name) {
  if (name == "arnn") return DecoderFamily::arnn;
  if (name == "transformer") return DecoderFamily::transformer;
  if (name == "fcn") return DecoderFamily::fcn;
  throw ConfigError("unknown decoder '" + name + "' (expected arnn|transformer|fcn)");
}

std::string to_string(PositionalKind kind) {
  return kind == PositionalKind::fixed ? "fixed" : "learned";
}

PositionalKind parse_positional_kind(const std::string& name) {
  if (name == "fixed") return PositionalKind::fixed;
  if (name == "learned") return PositionalKind::learned;
  throw ConfigError("unknown positional kind '" + name + "' (expected fixed|learned)");
}

DecoderConfig DecoderConfig::defaults_for(DecoderFamily family) {
  DecoderConfig c;
  c.family = family;
  switch (family) {
    case DecoderFamily::arnn:
      c.attention = AttentionKind::mlp;
      c.dropout = 0.0;
      break;
    case DecoderFamily::transformer:
      c.attention = AttentionKind::multihead;
      c.layers = 1;
      break;
    case DecoderFamily::fcn:
      c.attention = AttentionKind::multihead;
      c.layers = 3;
      c.heads = 1;
      c.kernel_width = 3;
      break;
  }
  return c;
}

void DecoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(hidden, "hidden");
  positive(layers, "layers");
  positive(embed_dim, "embed_dim");
  positive(feature_dim, "feature_dim");
  positive(projected_dim, "projected_dim");
  positive(max_positions, "max_positions");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  switch (family) {
    case DecoderFamily::arnn:
      if (attention == AttentionKind::mlp) positive(attention_hidden, "attention_hidden");
      if (attention == AttentionKind::multihead) {
        positive(heads, "heads");
        if (projected_dim % heads != 0) {
          throw ConfigError("heads (" + std::to_string(heads) + ") must divide projected_dim (" +
                            std::to_string(projected_dim) + ") for arnn multihead attention");
        }
      }
      break;
    case DecoderFamily::transformer:
    case DecoderFamily::fcn:
      if (attention != AttentionKind::multihead) {
        throw ConfigError(to_string(family) +
                          " decoders attend with scaled dot-product heads; attention must be "
                          "multihead, got " + to_string(attention));
      }
      if (embed_dim != hidden) {
        throw ConfigError(to_string(family) + " needs embed_dim == hidden for its residual path");
      }
      positive(heads, "heads");
      if (hidden % heads != 0) {
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide hidden (" +
                          std::to_string(hidden) + ")");
      }
      if (family == DecoderFamily::transformer) positive(ffn_inner, "ffn_inner");
      if (family == DecoderFamily::fcn) {
        if (kernel_width < 1) throw ConfigError("kernel_width must be at least 1");
        if (heads != 1) throw ConfigError("fcn attention uses a single head");
      }
      break;
  }
}

nlohmann::json DecoderConfig::to_json() const {
  return {
      {"family", to_string(family)},
      {"hidden", hidden},
      {"layers", layers},
      {"heads", heads},
      {"ffn_inner", ffn_inner},
      {"kernel_width", kernel_width},
      {"attention", to_string(attention)},
      {"concat_global", concat_global},
      {"embed_dim", embed_dim},
      {"dropout", dropout},
      {"positional", to_string(positional)},
      {"max_positions", max_positions},
      {"attention_hidden", attention_hidden},
      {"feature_dim", feature_dim},
      {"projected_dim", projected_dim},
      {"weight_norm", weight_norm},
  };
}

DecoderConfig DecoderConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("decoder config must be a JSON object");
  static const std::set<std::string> known{
      "family",        "hidden",        "layers",       "heads",
      "ffn_inner",     "kernel_width",  "attention",    "concat_global",
      "embed_dim",     "dropout",       "positional",   "max_positions",
      "attention_hidden", "feature_dim", "projected_dim", "weight_norm"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown decoder config key '" + key + "'");
  }
  DecoderConfig c = defaults_for(parse_decoder_family(j.value("family", std::string("arnn"))));
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_inner = j.value("ffn_inner", c.ffn_inner);
    c.kernel_width = j.value("kernel_width", c.kernel_width);
    if (j.contains("attention")) c.attention = parse_attention_kind(j.at("attention"));
    c.concat_global = j.value("concat_global", c.concat_global);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("positional")) c.positional = parse_positional_kind(j.at("positional"));
    c.max_positions = j.value("max_positions", c.max_positions);
    c.attention_hidden = j.value("attention_hidden", c.attention_hidden);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.projected_dim = j.value("projected_dim", c.projected_dim);
    c.weight_norm = j.value("weight_norm", c.weight_norm);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad decoder config value: ") + e.what());
  }
  return c;
}

}  // namespace forge
