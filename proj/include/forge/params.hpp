#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "forge/config.hpp"
#include "forge/rng.hpp"
#include "forge/tensor.hpp"

namespace forge {

enum class ParamKind {
  dense,        // [out x in] matrix applied by linear()
  vector,       // weight vector (MLP attention score w_h)
  bias,
  gain,         // layer-norm gain
  embedding,    // token table
  positional,   // learned position table
  kernel,       // convolution kernel [w x e x c]
  wn_direction, // weight-normalised direction V of a dense matrix
  wn_gain,      // weight-normalised per-row magnitude g
};

std::string to_string(ParamKind kind);
ParamKind parse_param_kind(const std::string& name);

// Every learnable tensor of a model, in a fixed registration order.
class ModelParameters {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    ParamKind kind;
  };

  Tensor& add(std::string name, Tensor value, ParamKind kind);
  bool contains(const std::string& name) const { return index_.contains(name); }
  const Tensor& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();
  // Deep copy: fresh storage, same values.
  ModelParameters clone() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Glorot-uniform matrices (bound sqrt(6 / (fan_in + fan_out))), zero biases, unit gains.
// Registration order and draws are a pure function of (config, vocab_size, seed).
ModelParameters init_parameters(const DecoderConfig& config, std::size_t vocab_size, Rng& rng);

// Closed-form scalar count of init_parameters (before weight normalisation).
std::size_t parameter_count(const DecoderConfig& config, std::size_t vocab_size);

// Reparameterises every dense matrix W as g * V / ||V||_row with g = row norms of W,
// so the effective weights start out equal to W. Embeddings, biases, gains,
// kernels and weight vectors are left alone.
void apply_weight_norm(ModelParameters& params);

// Name -> tensor the forward pass uses. Weight-normalised matrices are rebuilt
// through the weight_norm op, so gradients reach their direction and gain.
using Weights = std::map<std::string, Tensor>;
Weights effective_weights(const ModelParameters& params);
const Tensor& lookup(const Weights& weights, const std::string& name);

// ---- checkpoints -------------------------------------------------------
//
// u64 little-endian header length, then the header: a JSON object
// {"config": {...}, "vocab": [...], "tensors": [{"name", "shape", "offset", "kind"}]}
// ending in '\n'; then the tensors as little-endian binary32, in header order.
// Offsets count bytes from the start of the payload.

struct Checkpoint {
  DecoderConfig config;
  std::vector<std::string> vocabulary;
  ModelParameters parameters;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace forge
