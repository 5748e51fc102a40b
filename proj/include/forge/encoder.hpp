#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

// Precomputed image features: one row f_k per spatial location or detection.
struct FeatureGrid {
  std::string image_id;
  Tensor features;  // [K x d]

  std::size_t locations() const { return features.dim(0); }
  std::size_t width() const { return features.dim(1); }
};

// Projected encoder states v_1..v_K and the global descriptor v^g.
struct EncodedImage {
  Tensor states;  // [K x d']
  Tensor global;  // [d']
};

// v_k = ReLU(W_f f_k), v^g = ReLU(W_g mean_k f_k). Weights are [d' x d], no bias.
EncodedImage project(const FeatureGrid& grid, const Tensor& w_feature, const Tensor& w_global);

// Encoder states of a batch, laid out for attention.
//
// Row layout per image: its K projected locations, then v^g, then zero
// padding up to the widest image of the batch. `valid` marks the
// non-padding slots.
struct EncoderMemory {
  Tensor states;                     // [B x slots x d']
  Tensor global;                     // [B x d']
  std::vector<std::uint8_t> valid;   // [B x slots]
  std::vector<std::size_t> locations;

  std::size_t batch() const { return states.dim(0); }
  std::size_t slots() const { return states.dim(1); }
  std::size_t width() const { return states.dim(2); }
  // Index of the global-descriptor row of image b.
  std::size_t global_slot(std::size_t b) const { return locations[b]; }
};

// Batched projection. Records on the active tape so W_f / W_g receive gradients.
EncoderMemory encode_batch(std::span<const FeatureGrid* const> grids, const Tensor& w_feature,
                           const Tensor& w_global);
// Single-image memory (B = 1) from an already projected image.
EncoderMemory memory_from(const EncodedImage& image);

// ---- feature-grid files ------------------------------------------------
//
// "IMGF", u16 version = 1, u32 K, u32 d, then K*d IEEE-754 binary32 values,
// all little-endian, row-major.

std::vector<std::uint8_t> encode_feature_grid(const FeatureGrid& grid);
FeatureGrid decode_feature_grid(std::span<const std::uint8_t> bytes, std::string image_id);
FeatureGrid load_feature_grid(const std::filesystem::path& path);
void write_feature_grid(const std::filesystem::path& path, const FeatureGrid& grid);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace forge
