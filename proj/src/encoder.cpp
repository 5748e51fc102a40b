#include "forge/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "forge/error.hpp"
#include "forge/ops.hpp"

namespace forge {

namespace {

constexpr std::uint8_t kMagic[4] = {'I', 'M', 'G', 'F'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 4;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void check_projection_shapes(std::size_t d, const Tensor& w_feature, const Tensor& w_global) {
  if (w_feature.rank() != 2 || w_global.rank() != 2 || w_feature.dim(1) != d ||
      w_global.dim(1) != d || w_feature.dim(0) != w_global.dim(0)) {
    throw DimensionError("projection weights " + shape_string(w_feature.shape()) + " / " +
                         shape_string(w_global.shape()) + " do not map feature width " +
                         std::to_string(d));
  }
}

}  // namespace

EncodedImage project(const FeatureGrid& grid, const Tensor& w_feature, const Tensor& w_global) {
  check_projection_shapes(grid.width(), w_feature, w_global);
  EncodedImage out;
  out.states = relu(linear(grid.features, w_feature));
  Tensor pooled = mean(grid.features, 0);
  out.global = relu(linear(pooled, w_global));
  return out;
}

EncoderMemory encode_batch(std::span<const FeatureGrid* const> grids, const Tensor& w_feature,
                           const Tensor& w_global) {
  if (grids.empty()) throw DimensionError("encode_batch: no images");
  const std::size_t d = grids.front()->width();
  std::size_t widest = 0;
  for (const FeatureGrid* g : grids) {
    if (g->width() != d) {
      throw DimensionError("encode_batch: feature widths " + std::to_string(d) + " and " +
                           std::to_string(g->width()) + " in one batch");
    }
    widest = std::max(widest, g->locations());
  }
  check_projection_shapes(d, w_feature, w_global);
  const std::size_t batch = grids.size();
  const std::size_t projected = w_feature.dim(0);
  const std::size_t slots = widest + 1;

  Tensor stacked(Shape{batch * widest, d});
  Tensor pooled(Shape{batch, d});
  auto sv = stacked.mutable_data();
  auto pv = pooled.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    auto f = grids[b]->features.data();
    const std::size_t k = grids[b]->locations();
    std::copy(f.begin(), f.end(), sv.begin() + static_cast<std::ptrdiff_t>(b * widest * d));
    for (std::size_t row = 0; row < k; ++row)
      for (std::size_t j = 0; j < d; ++j) pv[b * d + j] += f[row * d + j];
    for (std::size_t j = 0; j < d; ++j) pv[b * d + j] /= static_cast<double>(k);
  }

  Tensor locations = relu(linear(stacked, w_feature));  // [B*widest x d']
  Tensor global = relu(linear(pooled, w_global));       // [B x d']
  Tensor zero_row(Shape{1, projected});
  Tensor table = concat({locations, global, zero_row}, 0);

  EncoderMemory memory;
  memory.valid.assign(batch * slots, 0);
  std::vector<TokenId> gather(batch * slots);
  const auto global_base = static_cast<TokenId>(batch * widest);
  const auto zero_index = static_cast<TokenId>(batch * widest + batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t k = grids[b]->locations();
    memory.locations.push_back(k);
    for (std::size_t s = 0; s < slots; ++s) {
      TokenId src = zero_index;
      if (s < k) {
        src = static_cast<TokenId>(b * widest + s);
      } else if (s == k) {
        src = global_base + static_cast<TokenId>(b);
      }
      gather[b * slots + s] = src;
      memory.valid[b * slots + s] = s <= k ? 1 : 0;
    }
  }
  memory.states = reshape(embedding_lookup(table, gather), {batch, slots, projected});
  memory.global = global;
  return memory;
}

EncoderMemory memory_from(const EncodedImage& image) {
  const std::size_t k = image.states.dim(0);
  const std::size_t width = image.states.dim(1);
  EncoderMemory memory;
  memory.states =
      reshape(concat({image.states, reshape(image.global, {1, width})}, 0), {1, k + 1, width});
  memory.global = reshape(image.global, {1, width});
  memory.valid.assign(k + 1, 1);
  memory.locations = {k};
  return memory;
}

std::vector<std::uint8_t> encode_feature_grid(const FeatureGrid& grid) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(grid.locations()));
  put_u32(out, static_cast<std::uint32_t>(grid.width()));
  out.reserve(kHeaderBytes + 4 * grid.features.size());
  for (double v : grid.features.data()) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

FeatureGrid decode_feature_grid(std::span<const std::uint8_t> bytes, std::string image_id) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("feature grid: bad magic, expected \"IMGF\"", 0);
  }
  if (bytes.size() < kHeaderBytes) {
    throw FormatError("feature grid: truncated header", bytes.size());
  }
  const std::uint16_t version = get_u16(bytes.data() + 4);
  if (version != kVersion) {
    throw FormatError("feature grid: unsupported version " + std::to_string(version), 4);
  }
  const std::uint32_t k = get_u32(bytes.data() + 6);
  const std::uint32_t d = get_u32(bytes.data() + 10);
  if (k == 0) throw FormatError("feature grid: K must be at least 1", 6);
  if (d == 0) throw FormatError("feature grid: d must be at least 1", 10);
  const std::uint64_t values = static_cast<std::uint64_t>(k) * d;
  const std::uint64_t expected = kHeaderBytes + 4 * values;
  if (bytes.size() < expected) {
    throw FormatError("feature grid: truncated payload, expected " + std::to_string(expected) +
                          " bytes",
                      bytes.size());
  }
  if (bytes.size() > expected) {
    throw FormatError("feature grid: trailing bytes after payload", expected);
  }
  std::vector<double> data(values);
  for (std::uint64_t i = 0; i < values; ++i) {
    const float f = std::bit_cast<float>(get_u32(bytes.data() + kHeaderBytes + 4 * i));
    if (!std::isfinite(f)) {
      throw DataError("feature grid " + image_id + ": non-finite value at row " +
                      std::to_string(i / d) + ", column " + std::to_string(i % d));
    }
    data[i] = f;
  }
  return FeatureGrid{std::move(image_id), Tensor(Shape{k, d}, std::move(data))};
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

FeatureGrid load_feature_grid(const std::filesystem::path& path) {
  return decode_feature_grid(read_file_bytes(path), path.stem().string());
}

void write_feature_grid(const std::filesystem::path& path, const FeatureGrid& grid) {
  write_file_bytes(path, encode_feature_grid(grid));
}

}  // namespace forge
