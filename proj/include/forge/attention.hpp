#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forge/encoder.hpp"
#include "forge/tensor.hpp"

namespace forge {

enum class AttentionKind { none, dot, mlp, multihead };

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& name);

// Context vector(s) plus the distribution that produced them.
struct AttentionOutput {
  Tensor context;  // [B x d_ctx] (batched) or [d_ctx] (single image)
  Tensor weights;  // [B x slots] or [K]; each row sums to 1
};

struct MlpAttentionParams {
  Tensor w_value;  // W_v [a x d']
  Tensor w_query;  // W_h [a x h]
  Tensor w_score;  // w_h [a]
};

struct MultiHeadParams {
  Tensor w_query;   // [d x d_q]   (all heads stacked; head u owns rows u*d_u .. (u+1)*d_u)
  Tensor w_key;     // [d x d_kv]
  Tensor w_value;   // [d x d_kv]
  Tensor w_output;  // [d_out x d]
  std::size_t heads = 1;
};

// Which (query, key) pairs may interact. Empty key_valid means all keys are valid.
struct AttentionMask {
  bool causal = false;
  std::span<const std::uint8_t> key_valid;  // [B x n_k]
};

struct MultiHeadOutput {
  Tensor output;   // [B x n_q x d_out]
  Tensor weights;  // [B x heads x n_q x n_k], detached
};

// ---- single-image forms ------------------------------------------------

// Context is v^g itself; reported weights are uniform over the K locations.
AttentionOutput attend_none(const Tensor& global, std::size_t locations);
// score_k = v_k . query, where query already has width d'.
AttentionOutput attend_dot(const Tensor& states, const Tensor& query);
// score_k = w_h^T tanh(W_v v_k + W_h h).
AttentionOutput attend_mlp(const Tensor& states, const Tensor& hidden,
                           const MlpAttentionParams& params);
// Q [n_q x d_q], K/L [n_k x d_kv] -> [n_q x d_out].
Tensor attend_multihead(const Tensor& queries, const Tensor& keys, const Tensor& values,
                        const MultiHeadParams& params, bool causal = false);

// ---- batched forms over encoder memory ---------------------------------

AttentionOutput attend_none(const EncoderMemory& memory);
// query [B x d'].
AttentionOutput attend_dot(const EncoderMemory& memory, const Tensor& query);
// W_v V for the whole memory; computed once per sequence and reused every step.
Tensor mlp_attention_keys(const EncoderMemory& memory, const MlpAttentionParams& params);
// hidden [B x h]; keys from mlp_attention_keys.
AttentionOutput attend_mlp(const EncoderMemory& memory, const Tensor& keys, const Tensor& hidden,
                           const MlpAttentionParams& params);
// Single query per image against the memory; weights averaged over heads.
AttentionOutput attend_multihead(const EncoderMemory& memory, const Tensor& query,
                                 const MultiHeadParams& params);

// General scaled dot-product attention. Q [B x n_q x d_q], K/L [B x n_k x d_kv].
// Per head: C_u = softmax(Q Wq_u (K Wk_u)^T / sqrt(d_u)) L Wl_u; output = [C_1..C_h] W_O^T.
MultiHeadOutput multihead_attention(const Tensor& queries, const Tensor& keys,
                                    const Tensor& values, const MultiHeadParams& params,
                                    const AttentionMask& mask = {});

}  // namespace forge
