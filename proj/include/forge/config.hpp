#pragma once

#include <cstddef>
#include <string>

#include "forge/attention.hpp"
#include "json.hpp"

namespace forge {

enum class DecoderFamily { arnn, transformer, fcn };
enum class PositionalKind { fixed, learned };

std::string to_string(DecoderFamily family);
DecoderFamily parse_decoder_family(const std::string& name);
std::string to_string(PositionalKind kind);
PositionalKind parse_positional_kind(const std::string& name);

// Architecture of one caption model: encoder projection plus decoder.
struct DecoderConfig {
  DecoderFamily family = DecoderFamily::arnn;
  std::size_t hidden = 512;
  // LSTM layers (arnn), blocks (transformer) or convolution layers (fcn).
  std::size_t layers = 1;
  std::size_t heads = 8;
  std::size_t ffn_inner = 2048;
  std::size_t kernel_width = 3;
  AttentionKind attention = AttentionKind::mlp;
  bool concat_global = false;
  std::size_t embed_dim = 512;
  double dropout = 0.1;
  PositionalKind positional = PositionalKind::fixed;
  std::size_t max_positions = 64;
  // Hidden size a of MLP attention.
  std::size_t attention_hidden = 512;
  // Raw feature width d.
  std::size_t feature_dim = 2048;
  // Projected width d'.
  std::size_t projected_dim = 512;
  bool weight_norm = false;

  // Family defaults: arnn uses MLP attention and no dropout; transformer one
  // block with 8-head attention; fcn three GLU layers of width 3 with a single head.
  static DecoderConfig defaults_for(DecoderFamily family);

  // Throws ConfigError on any inconsistent or non-positive field.
  void validate() const;

  nlohmann::json to_json() const;
  // Rejects unknown keys; missing keys keep their defaults.
  static DecoderConfig from_json(const nlohmann::json& j);

  bool operator==(const DecoderConfig&) const = default;
};

}  // namespace forge
