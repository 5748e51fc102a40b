#pragma once

#include <memory>
#include <span>
#include <vector>

#include "forge/attention.hpp"
#include "forge/config.hpp"
#include "forge/encoder.hpp"
#include "forge/params.hpp"
#include "forge/ops.hpp"
#include "forge/rng.hpp"

namespace forge {

// Per-hypothesis decoding state. step() never modifies the state it is given.
//  arnn:        hidden/cell hold h and c per LSTM layer, feed holds h-bar_{t-1}.
//  transformer: hidden[l] holds the inputs block l has seen so far, [t x H].
//  fcn:         hidden[l] holds the inputs layer l has seen so far, [t x H].
struct DecoderState {
  std::size_t position = 0;
  std::vector<Tensor> hidden;
  std::vector<Tensor> cell;
  Tensor feed;
};

struct StepOutput {
  Tensor logits;  // [|V|]
  DecoderState state;
  // Context and the weights over memory slots (K locations, then v^g).
  AttentionOutput attention;
};

// One decoder family bound to a set of effective weights.
// forward() is the teacher-forced batch path; start()/step() decode incrementally.
class Decoder {
 public:
  static std::unique_ptr<Decoder> create(const DecoderConfig& config, const Weights& weights);
  virtual ~Decoder() = default;

  // inputs is a row-major [B x steps] id matrix (y_0..y_{m-1}, padded).
  // Returns logits [B*steps x |V|], row b*steps + t.
  virtual Tensor forward(const EncoderMemory& memory, std::span<const TokenId> inputs,
                         std::size_t steps, bool training, Rng& rng) const = 0;

  // Attention weights per (b, t) from the teacher-forced pass, [B*steps x slots].
  virtual Tensor forward_attention(const EncoderMemory& memory, std::span<const TokenId> inputs,
                                   std::size_t steps) const = 0;

  // Fresh state for a single image (memory.batch() == 1).
  virtual DecoderState start(const EncoderMemory& memory) const = 0;
  virtual StepOutput step(const EncoderMemory& memory, const DecoderState& state,
                          TokenId previous) const = 0;

  const DecoderConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }

 protected:
  Decoder(const DecoderConfig& config, const Weights& weights);
  void check_ids(std::span<const TokenId> ids) const;

  DecoderConfig config_;
  Tensor embed_;
  Tensor out_w_;
  Tensor out_b_;
  std::size_t vocab_size_;
};

// Fixed sinusoidal table, or the learned one (LengthError past its end).
Tensor positional_rows(const DecoderConfig& config, const Weights& weights, std::size_t start,
                       std::size_t count);

// ARNN single step against one image.
StepOutput arnn_step(const DecoderConfig& config, const Weights& weights,
                     const EncoderMemory& memory, const DecoderState& state, TokenId previous);
// Full-prefix logits [T x |V|] for one image.
Tensor transformer_forward(const DecoderConfig& config, const Weights& weights,
                           std::span<const TokenId> prefix, const EncoderMemory& memory,
                           bool training, Rng& rng);
Tensor fcn_forward(const DecoderConfig& config, const Weights& weights,
                   std::span<const TokenId> prefix, const EncoderMemory& memory, bool training,
                   Rng& rng);

}  // namespace forge
