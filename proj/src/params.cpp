#include "forge/params.hpp"

#include <bit>
#include <cmath>

#include "forge/encoder.hpp"
#include "forge/error.hpp"
#include "forge/ops.hpp"

namespace forge {

std::string to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::dense: return "dense";
    case ParamKind::vector: return "vector";
    case ParamKind::bias: return "bias";
    case ParamKind::gain: return "gain";
    case ParamKind::embedding: return "embedding";
    case ParamKind::positional: return "positional";
    case ParamKind::kernel: return "kernel";
    case ParamKind::wn_direction: return "wn_direction";
    case ParamKind::wn_gain: return "wn_gain";
  }
  return "?";
}

ParamKind parse_param_kind(const std::string& name) {
  for (ParamKind k : {ParamKind::dense, ParamKind::vector, ParamKind::bias, ParamKind::gain,
                      ParamKind::embedding, ParamKind::positional, ParamKind::kernel,
                      ParamKind::wn_direction, ParamKind::wn_gain}) {
    if (to_string(k) == name) return k;
  }
  throw FormatError("unknown parameter kind '" + name + "'", 0);
}

Tensor& ModelParameters::add(std::string name, Tensor value, ParamKind kind) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  value.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), kind});
  return entries_.back().value;
}

const ModelParameters::Entry& ModelParameters::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
  return entries_[it->second];
}

const Tensor& ModelParameters::get(const std::string& name) const { return entry(name).value; }

std::size_t ModelParameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ModelParameters::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

ModelParameters ModelParameters::clone() const {
  ModelParameters copy;
  for (const auto& e : entries_) copy.add(e.name, e.value.detach(), e.kind);
  return copy;
}

namespace {

class Builder {
 public:
  Builder(ModelParameters& params, Rng& rng) : params_(params), rng_(rng) {}

  void dense(const std::string& name, std::size_t out, std::size_t in) {
    params_.add(name, glorot({out, in}, in, out), ParamKind::dense);
  }
  void vector(const std::string& name, std::size_t n) {
    params_.add(name, glorot({n}, n, 1), ParamKind::vector);
  }
  void bias(const std::string& name, std::size_t n) {
    params_.add(name, Tensor(Shape{n}), ParamKind::bias);
  }
  void layer_norm(const std::string& prefix, std::size_t n) {
    params_.add(prefix + ".g", Tensor(Shape{n}, 1.0), ParamKind::gain);
    params_.add(prefix + ".b", Tensor(Shape{n}), ParamKind::bias);
  }
  void table(const std::string& name, std::size_t rows, std::size_t cols, ParamKind kind) {
    params_.add(name, glorot({rows, cols}, cols, rows), kind);
  }
  void kernel(const std::string& name, std::size_t w, std::size_t in, std::size_t out) {
    params_.add(name, glorot({w, in, out}, w * in, w * out), ParamKind::kernel);
  }

 private:
  Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (double& v : t.mutable_data()) v = rng_.uniform(-bound, bound);
    return t;
  }

  ModelParameters& params_;
  Rng& rng_;
};

std::string block(const char* family, std::size_t l) {
  return std::string(family) + "." + std::to_string(l);
}

std::size_t arnn_input_width(const DecoderConfig& c, std::size_t layer) {
  if (layer > 0) return c.hidden;
  return c.embed_dim + c.hidden + (c.concat_global ? c.projected_dim : 0);
}

}  // namespace

ModelParameters init_parameters(const DecoderConfig& c, std::size_t vocab_size, Rng& rng) {
  c.validate();
  if (vocab_size == 0) throw ConfigError("vocabulary is empty");
  ModelParameters params;
  Builder b(params, rng);
  const std::size_t h = c.hidden, dp = c.projected_dim;
  b.dense("encoder.W_f", dp, c.feature_dim);
  b.dense("encoder.W_g", dp, c.feature_dim);
  b.table("embed.E", vocab_size, c.embed_dim, ParamKind::embedding);
  switch (c.family) {
    case DecoderFamily::arnn:
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = block("arnn", l);
        b.dense(p + ".W_x", 4 * h, arnn_input_width(c, l));
        b.dense(p + ".W_h", 4 * h, h);
        b.bias(p + ".b", 4 * h);
      }
      switch (c.attention) {
        case AttentionKind::none: break;
        case AttentionKind::dot:
          if (h != dp) b.dense("attn.W_q", dp, h);
          break;
        case AttentionKind::mlp:
          b.dense("attn.W_v", c.attention_hidden, dp);
          b.dense("attn.W_h", c.attention_hidden, h);
          b.vector("attn.w", c.attention_hidden);
          break;
        case AttentionKind::multihead:
          b.dense("attn.W_Q", dp, h);
          b.dense("attn.W_K", dp, dp);
          b.dense("attn.W_L", dp, dp);
          b.dense("attn.W_O", dp, dp);
          break;
      }
      b.dense("arnn.W_c", h, h + dp);
      break;
    case DecoderFamily::transformer:
      if (c.positional == PositionalKind::learned) {
        b.table("pos.table", c.max_positions, h, ParamKind::positional);
      }
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = block("tf", l);
        for (const char* m : {".self.W_Q", ".self.W_K", ".self.W_L", ".self.W_O"}) b.dense(p + m, h, h);
        b.layer_norm(p + ".ln1", h);
        b.dense(p + ".enc.W_Q", h, h);
        b.dense(p + ".enc.W_K", h, dp);
        b.dense(p + ".enc.W_L", h, dp);
        b.dense(p + ".enc.W_O", h, h);
        b.layer_norm(p + ".ln2", h);
        b.dense(p + ".ffn.W_1", c.ffn_inner, h);
        b.bias(p + ".ffn.b_1", c.ffn_inner);
        b.dense(p + ".ffn.W_2", h, c.ffn_inner);
        b.bias(p + ".ffn.b_2", h);
        b.layer_norm(p + ".ln3", h);
      }
      break;
    case DecoderFamily::fcn:
      if (c.positional == PositionalKind::learned) {
        b.table("pos.table", c.max_positions, h, ParamKind::positional);
      }
      for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = block("fcn", l);
        b.kernel(p + ".conv.K", c.kernel_width, h, 2 * h);
        b.bias(p + ".conv.b", 2 * h);
        b.dense(p + ".att.W_Q", h, h);
        b.dense(p + ".att.W_K", h, dp);
        b.dense(p + ".att.W_L", h, dp);
        b.dense(p + ".att.W_O", h, h);
      }
      break;
  }
  b.dense("output.W", vocab_size, h);
  b.bias("output.b", vocab_size);
  if (c.weight_norm) apply_weight_norm(params);
  return params;
}

std::size_t parameter_count(const DecoderConfig& c, std::size_t v) {
  const std::size_t h = c.hidden, dp = c.projected_dim, d = c.feature_dim, e = c.embed_dim;
  std::size_t n = 2 * dp * d + v * e + v * h + v;
  const std::size_t positions = c.positional == PositionalKind::learned ? c.max_positions * h : 0;
  switch (c.family) {
    case DecoderFamily::arnn: {
      for (std::size_t l = 0; l < c.layers; ++l) n += 4 * h * (arnn_input_width(c, l) + h + 1);
      if (c.attention == AttentionKind::dot && h != dp) n += dp * h;
      if (c.attention == AttentionKind::mlp) n += c.attention_hidden * (dp + h + 1);
      if (c.attention == AttentionKind::multihead) n += dp * h + 3 * dp * dp;
      n += h * (h + dp);
      break;
    }
    case DecoderFamily::transformer:
      n += positions;
      // self attention 4h^2, encoder attention 2h^2 + 2h*d', ffn 2*h*F + F + h, three norms 6h
      n += c.layers * (6 * h * h + 2 * h * dp + 2 * h * c.ffn_inner + c.ffn_inner + h + 6 * h);
      break;
    case DecoderFamily::fcn:
      n += positions;
      // kernel w*h*2h + bias 2h, attention 2h^2 + 2h*d'
      n += c.layers * (c.kernel_width * h * 2 * h + 2 * h + 2 * h * h + 2 * h * dp);
      break;
  }
  return n;
}

void apply_weight_norm(ModelParameters& params) {
  ModelParameters rebuilt;
  for (auto& e : params.entries()) {
    if (e.kind != ParamKind::dense) {
      rebuilt.add(e.name, e.value, e.kind);
      continue;
    }
    const std::size_t rows = e.value.dim(0), cols = e.value.dim(1);
    Tensor gain(Shape{rows});
    auto w = e.value.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double sq = 0.0;
      for (std::size_t j = 0; j < cols; ++j) sq += w[r * cols + j] * w[r * cols + j];
      if (sq == 0.0) {
        throw NumericError("weight norm: row " + std::to_string(r) + " of '" + e.name +
                           "' has zero norm");
      }
      gain.mutable_data()[r] = std::sqrt(sq);
    }
    rebuilt.add(e.name + ".direction", e.value, ParamKind::wn_direction);
    rebuilt.add(e.name + ".gain", std::move(gain), ParamKind::wn_gain);
  }
  params = std::move(rebuilt);
}

Weights effective_weights(const ModelParameters& params) {
  Weights w;
  const std::string suffix = ".direction";
  for (const auto& e : params.entries()) {
    if (e.kind == ParamKind::wn_gain) continue;
    if (e.kind == ParamKind::wn_direction) {
      const std::string base = e.name.substr(0, e.name.size() - suffix.size());
      w.emplace(base, weight_norm(e.value, params.get(base + ".gain")));
    } else {
      w.emplace(e.name, e.value);
    }
  }
  return w;
}

const Tensor& lookup(const Weights& weights, const std::string& name) {
  auto it = weights.find(name);
  if (it == weights.end()) throw ConfigError("model has no weight '" + name + "'");
  return it->second;
}

// ---- checkpoints -------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : checkpoint.parameters.entries()) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.value.shape()},
                       {"offset", offset},
                       {"kind", to_string(e.kind)}});
    offset += 4 * e.value.size();
  }
  nlohmann::json header = {{"config", checkpoint.config.to_json()},
                           {"vocab", checkpoint.vocabulary},
                           {"tensors", tensors}};
  const std::string text = header.dump() + "\n";
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t length = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(length >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& e : checkpoint.parameters.entries()) {
    for (double v : e.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  return out;
}

namespace {
Checkpoint decode_body(const nlohmann::json& header, std::span<const std::uint8_t> bytes,
                            std::size_t payload) {
  Checkpoint ck;
  ck.config = DecoderConfig::from_json(header.at("config"));
  if (header.contains("vocab")) ck.vocabulary = header.at("vocab").get<std::vector<std::string>>();
  std::uint64_t expected_offset = 0;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const ParamKind kind = parse_param_kind(t.value("kind", std::string("dense")));
    if (offset != expected_offset) {
      throw FormatError("checkpoint: tensor '" + name + "' offset out of order", payload + offset);
    }
    const std::size_t n = shape_size(shape);
    if (payload + offset + 4 * n > bytes.size()) {
      throw FormatError("checkpoint: tensor '" + name + "' truncated", bytes.size());
    }
    std::vector<double> values(n);
    const std::uint8_t* p = bytes.data() + payload + offset;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[4 * i + k]) << (8 * k);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) throw DataError("checkpoint: non-finite value in '" + name + "'");
      values[i] = f;
    }
    ck.parameters.add(name, Tensor(shape, std::move(values)), kind);
    expected_offset += 4 * n;
  }
  if (payload + expected_offset != bytes.size()) {
    throw FormatError("checkpoint: trailing bytes after last tensor", payload + expected_offset);
  }
  return ck;
}
}  // namespace

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint: missing header length", bytes.size());
  std::uint64_t length = 0;
  for (int i = 0; i < 8; ++i) length |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if (length == 0 || length > bytes.size() - 8) {
    throw FormatError("checkpoint: header length " + std::to_string(length) + " exceeds file", 0);
  }
  if (bytes[8 + length - 1] != '\n') {
    throw FormatError("checkpoint: header is not newline-terminated", 8 + length - 1);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(length));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what(), 8);
  }
  if (!header.is_object() || !header.contains("config") || !header.contains("tensors")) {
    throw FormatError("checkpoint: header lacks config/tensors", 8);
  }
  try {
    return decode_body(header, bytes, 8 + length);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header field: ") + e.what(), 8);
  }
}


void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file_bytes(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace forge
