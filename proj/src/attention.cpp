#include "forge/attention.hpp"

#include <cmath>

#include "forge/error.hpp"
#include "forge/ops.hpp"

namespace forge {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::none: return "none";
    case AttentionKind::dot: return "dot";
    case AttentionKind::mlp: return "mlp";
    case AttentionKind::multihead: return "multihead";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "none") return AttentionKind::none;
  if (name == "dot") return AttentionKind::dot;
  if (name == "mlp") return AttentionKind::mlp;
  if (name == "multihead") return AttentionKind::multihead;
  throw ConfigError("unknown attention kind '" + name + "' (expected none|dot|mlp|multihead)");
}

namespace {

EncoderMemory wrap_states(const Tensor& states) {
  if (states.rank() != 2) {
    throw DimensionError("attention states must be [K x d'], got " + shape_string(states.shape()));
  }
  EncoderMemory m;
  m.states = reshape(states, {1, states.dim(0), states.dim(1)});
  m.valid.assign(states.dim(0), 1);
  // Every row is attended; the memory has no separate global row here.
  m.locations = {states.dim(0)};
  return m;
}

AttentionOutput unbatch(const AttentionOutput& out) {
  return {reshape(out.context, {out.context.dim(1)}), reshape(out.weights, {out.weights.dim(1)})};
}

// alpha [B x S] applied to memory states [B x S x d'] -> [B x d'].
Tensor weighted_sum(const EncoderMemory& memory, const Tensor& alpha) {
  const std::size_t b = memory.batch(), s = memory.slots();
  return reshape(bmm(reshape(alpha, {b, 1, s}), memory.states), {b, memory.width()});
}

AttentionOutput finish(const EncoderMemory& memory, const Tensor& scores) {
  Tensor alpha = masked_softmax(scores, memory.valid);
  return {weighted_sum(memory, alpha), alpha};
}

}  // namespace

AttentionOutput attend_none(const Tensor& global, std::size_t locations) {
  if (locations == 0) throw DimensionError("attend_none: no locations");
  return {global, Tensor(Shape{locations}, 1.0 / static_cast<double>(locations))};
}

AttentionOutput attend_dot(const Tensor& states, const Tensor& query) {
  return unbatch(attend_dot(wrap_states(states), reshape(query, {1, query.size()})));
}

AttentionOutput attend_mlp(const Tensor& states, const Tensor& hidden,
                           const MlpAttentionParams& params) {
  EncoderMemory m = wrap_states(states);
  Tensor keys = mlp_attention_keys(m, params);
  return unbatch(attend_mlp(m, keys, reshape(hidden, {1, hidden.size()}), params));
}

Tensor attend_multihead(const Tensor& queries, const Tensor& keys, const Tensor& values,
                        const MultiHeadParams& params, bool causal) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2) {
    throw DimensionError("attend_multihead expects rank-2 Q, K, L");
  }
  auto lift = [](const Tensor& t) { return reshape(t, {1, t.dim(0), t.dim(1)}); };
  AttentionMask mask;
  mask.causal = causal;
  Tensor out = multihead_attention(lift(queries), lift(keys), lift(values), params, mask).output;
  return reshape(out, {out.dim(1), out.dim(2)});
}

AttentionOutput attend_none(const EncoderMemory& memory) {
  const std::size_t b = memory.batch(), s = memory.slots();
  Tensor weights(Shape{b, s});
  auto w = weights.mutable_data();
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t k = memory.locations[i];
    for (std::size_t j = 0; j < k; ++j) w[i * s + j] = 1.0 / static_cast<double>(k);
  }
  return {memory.global, weights};
}

AttentionOutput attend_dot(const EncoderMemory& memory, const Tensor& query) {
  const std::size_t b = memory.batch(), s = memory.slots(), d = memory.width();
  if (query.rank() != 2 || query.dim(0) != b || query.dim(1) != d) {
    throw DimensionError("attend_dot: query " + shape_string(query.shape()) + " against memory " +
                         shape_string(memory.states.shape()));
  }
  Tensor scores = reshape(bmm(memory.states, reshape(query, {b, d, 1})), {b, s});
  return finish(memory, scores);
}

Tensor mlp_attention_keys(const EncoderMemory& memory, const MlpAttentionParams& params) {
  return linear(memory.states, params.w_value);
}

AttentionOutput attend_mlp(const EncoderMemory& memory, const Tensor& keys, const Tensor& hidden,
                           const MlpAttentionParams& params) {
  const std::size_t b = memory.batch(), s = memory.slots();
  const std::size_t a = params.w_value.dim(0);
  if (params.w_query.dim(0) != a || params.w_score.rank() != 1 || params.w_score.dim(0) != a) {
    throw DimensionError("attend_mlp: inconsistent parameter shapes W_v " +
                         shape_string(params.w_value.shape()) + ", W_h " +
                         shape_string(params.w_query.shape()) + ", w_h " +
                         shape_string(params.w_score.shape()));
  }
  Tensor q = reshape(linear(hidden, params.w_query), {b, 1, a});
  Tensor act = tanh(add(keys, expand(q, 1, s)));
  Tensor scores = reshape(linear(act, reshape(params.w_score, {1, a})), {b, s});
  return finish(memory, scores);
}

AttentionOutput attend_multihead(const EncoderMemory& memory, const Tensor& query,
                                 const MultiHeadParams& params) {
  const std::size_t b = memory.batch(), s = memory.slots();
  AttentionMask mask;
  mask.key_valid = memory.valid;
  MultiHeadOutput out = multihead_attention(reshape(query, {b, 1, query.dim(1)}), memory.states,
                                            memory.states, params, mask);
  Tensor averaged(Shape{b, s});
  auto w = out.weights.data();
  auto avg = averaged.mutable_data();
  const double inv_heads = 1.0 / static_cast<double>(params.heads);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t u = 0; u < params.heads; ++u)
      for (std::size_t j = 0; j < s; ++j) avg[i * s + j] += inv_heads * w[(i * params.heads + u) * s + j];
  return {reshape(out.output, {b, out.output.dim(2)}), averaged};
}

MultiHeadOutput multihead_attention(const Tensor& queries, const Tensor& keys,
                                    const Tensor& values, const MultiHeadParams& params,
                                    const AttentionMask& mask) {
  if (queries.rank() != 3 || keys.rank() != 3 || values.rank() != 3) {
    throw DimensionError("multihead_attention expects [B x n x d] inputs");
  }
  const std::size_t b = queries.dim(0), n_q = queries.dim(1), n_k = keys.dim(1);
  if (keys.dim(0) != b || values.dim(0) != b || values.dim(1) != n_k) {
    throw DimensionError("multihead_attention: Q " + shape_string(queries.shape()) + ", K " +
                         shape_string(keys.shape()) + ", L " + shape_string(values.shape()));
  }
  const std::size_t width = params.w_query.dim(0);
  const std::size_t heads = params.heads;
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("multihead_attention: " + std::to_string(heads) +
                      " heads do not divide width " + std::to_string(width));
  }
  if (params.w_key.dim(0) != width || params.w_value.dim(0) != width ||
      params.w_output.dim(1) != width) {
    throw DimensionError("multihead_attention: projection widths disagree");
  }
  if (!mask.key_valid.empty() && mask.key_valid.size() != b * n_k) {
    throw DimensionError("multihead_attention: key mask has " +
                         std::to_string(mask.key_valid.size()) + " entries for " +
                         std::to_string(b * n_k) + " keys");
  }
  if (mask.causal && n_q != n_k) {
    throw DimensionError("multihead_attention: causal mask needs n_q == n_k");
  }
  const std::size_t head_width = width / heads;
  const double temperature = 1.0 / std::sqrt(static_cast<double>(head_width));

  std::vector<std::uint8_t> allowed(b * n_q * n_k, 1);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t q = 0; q < n_q; ++q)
      for (std::size_t k = 0; k < n_k; ++k) {
        bool ok = !mask.causal || k <= q;
        if (!mask.key_valid.empty()) ok = ok && mask.key_valid[i * n_k + k] != 0;
        allowed[(i * n_q + q) * n_k + k] = ok ? 1 : 0;
      }

  Tensor q_all = linear(queries, params.w_query);
  Tensor k_all = linear(keys, params.w_key);
  Tensor v_all = linear(values, params.w_value);
  std::vector<Tensor> contexts;
  Tensor weights(Shape{b, heads, n_q, n_k});
  auto wv = weights.mutable_data();
  for (std::size_t u = 0; u < heads; ++u) {
    Tensor qu = heads == 1 ? q_all : slice(q_all, 2, u * head_width, head_width);
    Tensor ku = heads == 1 ? k_all : slice(k_all, 2, u * head_width, head_width);
    Tensor vu = heads == 1 ? v_all : slice(v_all, 2, u * head_width, head_width);
    Tensor probs = masked_softmax(scale(bmm_nt(qu, ku), temperature), allowed);
    auto pv = probs.data();
    for (std::size_t i = 0; i < b; ++i)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * n_q * n_k), n_q * n_k,
                  wv.begin() + static_cast<std::ptrdiff_t>((i * heads + u) * n_q * n_k));
    contexts.push_back(bmm(probs, vu));
  }
  Tensor joined = heads == 1 ? contexts.front() : concat(contexts, 2);
  return {linear(joined, params.w_output), weights};
}

}  // namespace forge
