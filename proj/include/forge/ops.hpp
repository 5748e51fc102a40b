#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "forge/rng.hpp"
#include "forge/tensor.hpp"

namespace forge {

using TokenId = std::int32_t;

// Every operation below returns a fresh tensor, checks its output for
// NaN/inf (NumericError naming the op), and records an exact backward rule
// when a tape is active and some input requires a gradient.

// ---- products ----------------------------------------------------------

// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T -> [m x n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// Batched [B x m x k] * [B x k x n] -> [B x m x n].
Tensor bmm(const Tensor& a, const Tensor& b);
// Batched [B x m x k] * [B x n x k]^T -> [B x m x n].
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// x[..., in] * W[out x in]^T (+ bias[out]) -> [..., out].
Tensor linear(const Tensor& x, const Tensor& weight);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a);

// ---- pointwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// Adds bias[n] to every length-n slice along the last axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Gated linear unit over the last axis: first half * sigmoid(second half).
Tensor glu(const Tensor& x);

// ---- reductions and layout ---------------------------------------------

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
// Repeats a size-1 axis n times.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t n);

// ---- normalisation, probabilities, losses ------------------------------

// Max-subtracted softmax along an axis.
Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis where mask[i] == 0 excludes entry i (probability exactly 0,
// no gradient). A slice with every entry masked is an error.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask);
Tensor log_softmax(const Tensor& x);
// Mean over non-pad rows of -log softmax(logits[t])[target_t].
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId pad_id);
// Normalizes the last axis to zero mean / unit variance (epsilon 1e-6), then gain * . + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Inverted dropout. Identity when !training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

// ---- lookups and structured ops ----------------------------------------

// Row gather from a [rows x e] table; backward scatter-adds.
Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids);
// Causal convolution over time. x is [T x e] or [B x T x e], kernel [w x e x c], bias [c].
// Inputs are left-padded with w-1 zero frames.
Tensor conv1d_causal(const Tensor& x, const Tensor& kernel, const Tensor& bias);
// W = gain[r] * direction[r, :] / ||direction[r, :]|| for a [rows x cols] direction.
Tensor weight_norm(const Tensor& direction, const Tensor& gain);

}  // namespace forge
