#include "forge/decoder.hpp"

#include <cmath>

#include "forge/error.hpp"
#include "forge/ops.hpp"

namespace forge {

namespace {

MultiHeadParams multihead_params(const Weights& w, const std::string& prefix, std::size_t heads) {
  return {lookup(w, prefix + ".W_Q"), lookup(w, prefix + ".W_K"), lookup(w, prefix + ".W_L"),
          lookup(w, prefix + ".W_O"), heads};
}

// Copies per-step weights [B x slots] into rows b*steps + t of a [B*steps x slots] matrix.
void store_step_weights(Tensor& all, const Tensor& step_weights, std::size_t t,
                        std::size_t steps) {
  const std::size_t batch = step_weights.dim(0), slots = step_weights.dim(1);
  auto src = step_weights.data();
  auto dst = all.mutable_data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < slots; ++s) dst[(b * steps + t) * slots + s] = src[b * slots + s];
}

// Head-averaged [B x heads x T x slots] -> [B*T x slots].
Tensor average_heads(const Tensor& weights) {
  const std::size_t b = weights.dim(0), heads = weights.dim(1), t = weights.dim(2),
                    slots = weights.dim(3);
  Tensor out(Shape{b * t, slots});
  auto w = weights.data();
  auto o = out.mutable_data();
  const double inv = 1.0 / static_cast<double>(heads);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t u = 0; u < heads; ++u)
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t s = 0; s < slots; ++s)
          o[(i * t + r) * slots + s] += inv * w[((i * heads + u) * t + r) * slots + s];
  return out;
}

Tensor prefix_append(const Tensor& prefix, const Tensor& row) {
  return prefix.defined() ? concat({prefix, row}, 0) : row;
}

Tensor lift(const Tensor& matrix) { return reshape(matrix, {1, matrix.dim(0), matrix.dim(1)}); }

void require_single(const EncoderMemory& memory) {
  if (memory.batch() != 1) {
    throw DimensionError("incremental decoding runs one image at a time, got a batch of " +
                         std::to_string(memory.batch()));
  }
}

// ---------------------------------------------------------------------------

class ArnnDecoder final : public Decoder {
 public:
  ArnnDecoder(const DecoderConfig& c, const Weights& w) : Decoder(c, w) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "arnn." + std::to_string(l);
      layers_.push_back({lookup(w, p + ".W_x"), lookup(w, p + ".W_h"), lookup(w, p + ".b")});
    }
    combine_ = lookup(w, "arnn.W_c");
    switch (c.attention) {
      case AttentionKind::none: break;
      case AttentionKind::dot:
        if (w.contains("attn.W_q")) dot_query_ = lookup(w, "attn.W_q");
        break;
      case AttentionKind::mlp:
        mlp_ = {lookup(w, "attn.W_v"), lookup(w, "attn.W_h"), lookup(w, "attn.w")};
        break;
      case AttentionKind::multihead:
        multihead_ = multihead_params(w, "attn", c.heads);
        break;
    }
  }

  Tensor forward(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
                 bool, Rng&) const override {
    return run(memory, inputs, steps, nullptr);
  }

  Tensor forward_attention(const EncoderMemory& memory, std::span<const TokenId> inputs,
                           std::size_t steps) const override {
    Tensor weights(Shape{memory.batch() * steps, memory.slots()});
    run(memory, inputs, steps, &weights);
    return weights;
  }

  DecoderState start(const EncoderMemory& memory) const override {
    require_single(memory);
    DecoderState s;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      s.hidden.emplace_back(Shape{1, config_.hidden});
      s.cell.emplace_back(Shape{1, config_.hidden});
    }
    s.feed = Tensor(Shape{1, config_.hidden});
    return s;
  }

  StepOutput step(const EncoderMemory& memory, const DecoderState& state,
                  TokenId previous) const override {
    require_single(memory);
    const TokenId ids[1] = {previous};
    check_ids(ids);
    StepOutput out;
    out.state = state;
    Tensor keys = config_.attention == AttentionKind::mlp ? mlp_attention_keys(memory, mlp_) : Tensor();
    AttentionOutput att = advance(memory, keys, embedding_lookup(embed_, ids), out.state.hidden,
                                  out.state.cell, out.state.feed);
    out.state.position = state.position + 1;
    out.logits = reshape(linear(out.state.feed, out_w_, out_b_), {vocab_size_});
    out.attention = {reshape(att.context, {att.context.dim(1)}),
                     reshape(att.weights, {att.weights.dim(1)})};
    return out;
  }

 private:
  struct Layer {
    Tensor w_x, w_h, b;
  };

  Tensor run(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
             Tensor* weights_out) const {
    check_ids(inputs);
    const std::size_t batch = memory.batch(), h = config_.hidden, e = config_.embed_dim;
    if (inputs.size() != batch * steps) {
      throw DimensionError("arnn forward: " + std::to_string(inputs.size()) + " ids for " +
                           std::to_string(batch) + " x " + std::to_string(steps));
    }
    Tensor embedded = reshape(embedding_lookup(embed_, inputs), {batch, steps, e});
    std::vector<Tensor> hs(layers_.size(), Tensor(Shape{batch, h}));
    std::vector<Tensor> cs(layers_.size(), Tensor(Shape{batch, h}));
    Tensor feed(Shape{batch, h});
    Tensor keys = config_.attention == AttentionKind::mlp ? mlp_attention_keys(memory, mlp_) : Tensor();
    std::vector<Tensor> feeds;
    feeds.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor x = reshape(slice(embedded, 1, t, 1), {batch, e});
      AttentionOutput att = advance(memory, keys, x, hs, cs, feed);
      if (weights_out) store_step_weights(*weights_out, att.weights, t, steps);
      feeds.push_back(reshape(feed, {batch, 1, h}));
    }
    Tensor all = steps == 1 ? feeds.front() : concat(feeds, 1);
    return reshape(linear(all, out_w_, out_b_), {batch * steps, vocab_size_});
  }

  // One LSTM step for the batch, then attention and the attentional vector h-bar.
  AttentionOutput advance(const EncoderMemory& memory, const Tensor& keys, const Tensor& embedded,
                          std::vector<Tensor>& hs, std::vector<Tensor>& cs, Tensor& feed) const {
    const std::size_t h = config_.hidden;
    std::vector<Tensor> parts{embedded, feed};
    if (config_.concat_global) parts.push_back(memory.global);
    Tensor x = concat(parts, 1);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Tensor gates = add(linear(x, layers_[l].w_x, layers_[l].b), linear(hs[l], layers_[l].w_h));
      Tensor in = sigmoid(slice(gates, 1, 0, h));
      Tensor forget = sigmoid(slice(gates, 1, h, h));
      Tensor candidate = tanh(slice(gates, 1, 2 * h, h));
      Tensor out = sigmoid(slice(gates, 1, 3 * h, h));
      cs[l] = add(mul(forget, cs[l]), mul(in, candidate));
      hs[l] = mul(out, tanh(cs[l]));
      x = hs[l];
    }
    AttentionOutput att = attend(memory, keys, x);
    feed = tanh(linear(concat({x, att.context}, 1), combine_));
    return att;
  }

  AttentionOutput attend(const EncoderMemory& memory, const Tensor& keys, const Tensor& h) const {
    switch (config_.attention) {
      case AttentionKind::none: return attend_none(memory);
      case AttentionKind::dot:
        return attend_dot(memory, dot_query_.defined() ? linear(h, dot_query_) : h);
      case AttentionKind::mlp: return attend_mlp(memory, keys, h, mlp_);
      case AttentionKind::multihead: return attend_multihead(memory, h, multihead_);
    }
    throw ConfigError("unreachable attention kind");
  }

  std::vector<Layer> layers_;
  Tensor combine_;
  Tensor dot_query_;
  MlpAttentionParams mlp_;
  MultiHeadParams multihead_;
};

// ---------------------------------------------------------------------------

class TransformerDecoder final : public Decoder {
 public:
  TransformerDecoder(const DecoderConfig& c, const Weights& w) : Decoder(c, w), weights_(&w) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "tf." + std::to_string(l);
      Block b;
      b.self = multihead_params(w, p + ".self", c.heads);
      b.enc = multihead_params(w, p + ".enc", c.heads);
      for (int n = 0; n < 3; ++n) {
        const std::string ln = p + ".ln" + std::to_string(n + 1);
        b.norm_gain[n] = lookup(w, ln + ".g");
        b.norm_bias[n] = lookup(w, ln + ".b");
      }
      b.w1 = lookup(w, p + ".ffn.W_1");
      b.b1 = lookup(w, p + ".ffn.b_1");
      b.w2 = lookup(w, p + ".ffn.W_2");
      b.b2 = lookup(w, p + ".ffn.b_2");
      blocks_.push_back(std::move(b));
    }
  }

  Tensor forward(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
                 bool training, Rng& rng) const override {
    return run(memory, inputs, steps, training, rng, nullptr);
  }

  Tensor forward_attention(const EncoderMemory& memory, std::span<const TokenId> inputs,
                           std::size_t steps) const override {
    Rng unused(0);
    Tensor weights;
    run(memory, inputs, steps, false, unused, &weights);
    return weights;
  }

  DecoderState start(const EncoderMemory& memory) const override {
    require_single(memory);
    DecoderState s;
    s.hidden.resize(blocks_.size());
    return s;
  }

  StepOutput step(const EncoderMemory& memory, const DecoderState& state,
                  TokenId previous) const override {
    require_single(memory);
    const TokenId ids[1] = {previous};
    check_ids(ids);
    const std::size_t h = config_.hidden;
    Tensor x = add(embedding_lookup(embed_, ids),
                   positional_rows(config_, *weights_, state.position, 1));  // [1 x H]
    StepOutput out;
    out.state.position = state.position + 1;
    out.state.hidden.resize(blocks_.size());
    AttentionMask memory_mask;
    memory_mask.key_valid = memory.valid;
    Tensor enc_weights;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& b = blocks_[l];
      Tensor seen = prefix_append(state.hidden[l], x);
      out.state.hidden[l] = seen;
      Tensor q = reshape(x, {1, 1, h});
      Tensor self = multihead_attention(q, lift(seen), lift(seen), b.self).output;
      Tensor y = layer_norm(add(q, self), b.norm_gain[0], b.norm_bias[0]);
      MultiHeadOutput enc = multihead_attention(y, memory.states, memory.states, b.enc, memory_mask);
      y = layer_norm(add(y, enc.output), b.norm_gain[1], b.norm_bias[1]);
      y = layer_norm(add(y, feed_forward(b, y)), b.norm_gain[2], b.norm_bias[2]);
      x = reshape(y, {1, h});
      enc_weights = enc.weights;
    }
    out.logits = reshape(linear(x, out_w_, out_b_), {vocab_size_});
    Tensor averaged = average_heads(enc_weights);
    out.attention = {reshape(x, {h}), reshape(averaged, {averaged.dim(1)})};
    return out;
  }

 private:
  struct Block {
    MultiHeadParams self, enc;
    Tensor norm_gain[3], norm_bias[3];
    Tensor w1, b1, w2, b2;
  };

  static Tensor feed_forward(const Block& b, const Tensor& x) {
    return linear(relu(linear(x, b.w1, b.b1)), b.w2, b.b2);
  }

  Tensor run(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
             bool training, Rng& rng, Tensor* weights_out) const {
    check_ids(inputs);
    const std::size_t batch = memory.batch(), h = config_.hidden;
    if (inputs.size() != batch * steps || steps == 0) {
      throw DimensionError("transformer forward: " + std::to_string(inputs.size()) +
                           " ids for " + std::to_string(batch) + " x " + std::to_string(steps));
    }
    Tensor positions = reshape(positional_rows(config_, *weights_, 0, steps), {1, steps, h});
    Tensor x = add(reshape(embedding_lookup(embed_, inputs), {batch, steps, h}),
                   expand(positions, 0, batch));
    AttentionMask causal;
    causal.causal = true;
    AttentionMask memory_mask;
    memory_mask.key_valid = memory.valid;
    const double rate = config_.dropout;
    for (const Block& b : blocks_) {
      Tensor self = multihead_attention(x, x, x, b.self, causal).output;
      x = layer_norm(add(x, dropout(self, rate, training, rng)), b.norm_gain[0], b.norm_bias[0]);
      MultiHeadOutput enc = multihead_attention(x, memory.states, memory.states, b.enc, memory_mask);
      x = layer_norm(add(x, dropout(enc.output, rate, training, rng)), b.norm_gain[1],
                     b.norm_bias[1]);
      x = layer_norm(add(x, dropout(feed_forward(b, x), rate, training, rng)), b.norm_gain[2],
                     b.norm_bias[2]);
      if (weights_out) *weights_out = average_heads(enc.weights);
    }
    return reshape(linear(x, out_w_, out_b_), {batch * steps, vocab_size_});
  }

  const Weights* weights_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------

class FcnDecoder final : public Decoder {
 public:
  FcnDecoder(const DecoderConfig& c, const Weights& w) : Decoder(c, w), weights_(&w) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "fcn." + std::to_string(l);
      layers_.push_back({lookup(w, p + ".conv.K"), lookup(w, p + ".conv.b"),
                         multihead_params(w, p + ".att", 1)});
    }
  }

  Tensor forward(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
                 bool training, Rng& rng) const override {
    return run(memory, inputs, steps, training, rng, nullptr);
  }

  Tensor forward_attention(const EncoderMemory& memory, std::span<const TokenId> inputs,
                           std::size_t steps) const override {
    Rng unused(0);
    Tensor weights;
    run(memory, inputs, steps, false, unused, &weights);
    return weights;
  }

  DecoderState start(const EncoderMemory& memory) const override {
    require_single(memory);
    DecoderState s;
    s.hidden.resize(layers_.size());
    return s;
  }

  StepOutput step(const EncoderMemory& memory, const DecoderState& state,
                  TokenId previous) const override {
    require_single(memory);
    const TokenId ids[1] = {previous};
    check_ids(ids);
    const std::size_t h = config_.hidden, w = config_.kernel_width;
    Tensor x = add(embedding_lookup(embed_, ids),
                   positional_rows(config_, *weights_, state.position, 1));
    StepOutput out;
    out.state.position = state.position + 1;
    out.state.hidden.resize(layers_.size());
    AttentionMask memory_mask;
    memory_mask.key_valid = memory.valid;
    Tensor att_weights;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& layer = layers_[l];
      Tensor seen = prefix_append(state.hidden[l], x);
      out.state.hidden[l] = seen;
      const std::size_t have = seen.dim(0);
      const std::size_t window = std::min(have, w);
      Tensor conv = glu(conv1d_causal(slice(seen, 0, have - window, window), layer.kernel,
                                      layer.bias));
      Tensor current = reshape(slice(conv, 0, window - 1, 1), {1, 1, h});
      MultiHeadOutput att =
          multihead_attention(current, memory.states, memory.states, layer.attention, memory_mask);
      x = reshape(scale(add(current, att.output), kResidualScale), {1, h});
      att_weights = att.weights;
    }
    out.logits = reshape(linear(x, out_w_, out_b_), {vocab_size_});
    Tensor flat = average_heads(att_weights);
    out.attention = {reshape(x, {h}), reshape(flat, {flat.dim(1)})};
    return out;
  }

 private:
  static constexpr double kResidualScale = 0.70710678118654752440;

  struct Layer {
    Tensor kernel, bias;
    MultiHeadParams attention;
  };

  Tensor run(const EncoderMemory& memory, std::span<const TokenId> inputs, std::size_t steps,
             bool training, Rng& rng, Tensor* weights_out) const {
    check_ids(inputs);
    const std::size_t batch = memory.batch(), h = config_.hidden;
    if (inputs.size() != batch * steps || steps == 0) {
      throw DimensionError("fcn forward: " + std::to_string(inputs.size()) + " ids for " +
                           std::to_string(batch) + " x " + std::to_string(steps));
    }
    Tensor positions = reshape(positional_rows(config_, *weights_, 0, steps), {1, steps, h});
    Tensor x = add(reshape(embedding_lookup(embed_, inputs), {batch, steps, h}),
                   expand(positions, 0, batch));
    AttentionMask memory_mask;
    memory_mask.key_valid = memory.valid;
    for (const Layer& layer : layers_) {
      Tensor conv = glu(conv1d_causal(dropout(x, config_.dropout, training, rng), layer.kernel,
                                      layer.bias));
      MultiHeadOutput att =
          multihead_attention(conv, memory.states, memory.states, layer.attention, memory_mask);
      x = scale(add(conv, att.output), kResidualScale);
      if (weights_out) *weights_out = average_heads(att.weights);
    }
    return reshape(linear(x, out_w_, out_b_), {batch * steps, vocab_size_});
  }

  const Weights* weights_;
  std::vector<Layer> layers_;
};

}  // namespace

Decoder::Decoder(const DecoderConfig& config, const Weights& weights)
    : config_(config),
      embed_(lookup(weights, "embed.E")),
      out_w_(lookup(weights, "output.W")),
      out_b_(lookup(weights, "output.b")),
      vocab_size_(out_w_.dim(0)) {
  config_.validate();
}

void Decoder::check_ids(std::span<const TokenId> ids) const {
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab_size_));
    }
  }
}

std::unique_ptr<Decoder> Decoder::create(const DecoderConfig& config, const Weights& weights) {
  switch (config.family) {
    case DecoderFamily::arnn: return std::make_unique<ArnnDecoder>(config, weights);
    case DecoderFamily::transformer: return std::make_unique<TransformerDecoder>(config, weights);
    case DecoderFamily::fcn: return std::make_unique<FcnDecoder>(config, weights);
  }
  throw ConfigError("unknown decoder family");
}

Tensor positional_rows(const DecoderConfig& config, const Weights& weights, std::size_t start,
                       std::size_t count) {
  const std::size_t h = config.hidden;
  if (config.positional == PositionalKind::learned) {
    if (start + count > config.max_positions) {
      throw LengthError("position " + std::to_string(start + count - 1) +
                        " is past the learned positional table of " +
                        std::to_string(config.max_positions) + " rows");
    }
    return slice(lookup(weights, "pos.table"), 0, start, count);
  }
  Tensor table(Shape{count, h});
  auto t = table.mutable_data();
  for (std::size_t r = 0; r < count; ++r) {
    const double pos = static_cast<double>(start + r);
    for (std::size_t i = 0; i < h; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(h);
      const double angle = pos / std::pow(10000.0, exponent);
      t[r * h + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

StepOutput arnn_step(const DecoderConfig& config, const Weights& weights,
                     const EncoderMemory& memory, const DecoderState& state, TokenId previous) {
  if (config.family != DecoderFamily::arnn) throw ConfigError("arnn_step on a non-arnn config");
  return Decoder::create(config, weights)->step(memory, state, previous);
}

namespace {
Tensor prefix_forward(DecoderFamily family, const DecoderConfig& config, const Weights& weights,
                      std::span<const TokenId> prefix, const EncoderMemory& memory, bool training,
                      Rng& rng) {
  if (config.family != family) throw ConfigError("decoder family mismatch");
  if (prefix.empty()) throw DimensionError("prefix must hold at least the start token");
  require_single(memory);
  return Decoder::create(config, weights)->forward(memory, prefix, prefix.size(), training, rng);
}
}  // namespace

Tensor transformer_forward(const DecoderConfig& config, const Weights& weights,
                           std::span<const TokenId> prefix, const EncoderMemory& memory,
                           bool training, Rng& rng) {
  return prefix_forward(DecoderFamily::transformer, config, weights, prefix, memory, training, rng);
}

Tensor fcn_forward(const DecoderConfig& config, const Weights& weights,
                   std::span<const TokenId> prefix, const EncoderMemory& memory, bool training,
                   Rng& rng) {
  return prefix_forward(DecoderFamily::fcn, config, weights, prefix, memory, training, rng);
}

}  // namespace forge
