#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "forge/encoder.hpp"
#include "forge/ops.hpp"

namespace forge {

// Token table with the four reserved entries <pad>, <s>, </s>, <unk> at ids 0..3.
class Vocabulary {
 public:
  Vocabulary();

  // Tokens with count >= min_frequency, ordered by descending count then
  // lexicographically. DataError when the sentences hold no tokens at all.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t min_frequency);
  // Full token list, reserved entries first. Validates reserved names and uniqueness.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t min_frequency() const { return min_frequency_; }

  bool contains(const std::string& token) const { return ids_.contains(token); }
  TokenId id(const std::string& token) const;  // <unk> when absent
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::span<const std::string> words) const;
  // BOS + encode(words) + EOS
  std::vector<TokenId> encode_caption(std::span<const std::string> words) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;
  // Drops <pad>, <s>, </s> and joins with single spaces.
  std::string detokenize(std::span<const TokenId> ids) const;

  // One token per line, line number = id.
  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  explicit Vocabulary(std::in_place_t) {}

  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> ids_;
  std::size_t min_frequency_ = 1;
};

// Manifest: line-delimited JSON {"id", "features", "captions": [...]}.
// Relative feature paths resolve against the manifest's directory.
struct ManifestEntry {
  std::string id;
  std::filesystem::path features;
  std::vector<std::string> captions;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
// Paths are written as stored in the entries.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
Vocabulary build_vocab(const std::vector<ManifestEntry>& entries, std::size_t min_frequency);

struct CaptionExample {
  std::string image_id;
  std::size_t image = 0;                         // index into Dataset::grids
  std::vector<std::vector<TokenId>> references;  // each <s> ... </s>
};

struct Dataset {
  std::vector<FeatureGrid> grids;
  std::vector<CaptionExample> examples;
};

// Loads every feature file. DataError on an entry without captions.
Dataset load_dataset(const std::vector<ManifestEntry>& entries, const Vocabulary& vocab);

// Teacher-forced rows: inputs y_0..y_{m-1}, targets y_1..y_m, padded with <pad>.
struct Batch {
  std::vector<std::size_t> images;  // one grid index per row
  std::vector<TokenId> inputs;      // [rows x steps]
  std::vector<TokenId> targets;     // [rows x steps]
  std::size_t steps = 0;
  std::size_t rows() const { return images.size(); }
};

struct TrainingRow {
  std::size_t image;
  std::span<const TokenId> tokens;
};

Batch make_batch(std::span<const TrainingRow> rows);
// Every (image, reference) pair is a row; rows are shuffled by seed and grouped.
std::vector<Batch> make_batches(std::span<const CaptionExample> examples, std::size_t batch_size,
                                std::uint64_t seed);
// Same rows in order, no shuffle.
std::vector<Batch> make_ordered_batches(std::span<const CaptionExample> examples,
                                        std::size_t batch_size);

// ---- synthetic alignment task ------------------------------------------
//
// Each image has K slots holding distinct objects. A slot's feature row is a
// one-hot object code followed by a one-hot code of the slot's position in the
// caption, plus Gaussian noise; the caption lists the objects in that order.

struct SyntheticConfig {
  std::size_t examples = 2000;
  std::size_t slots = 4;
  std::size_t objects = 20;
  double noise = 0.05;
  std::uint64_t seed = 1;
};

struct SyntheticExample {
  FeatureGrid grid;
  std::vector<std::size_t> objects;  // object index per slot
  std::vector<std::size_t> order;    // order[i] = slot named i-th in the caption
  std::string caption;
  // For each object word: its token index in the caption and the slot it came from.
  std::vector<std::pair<std::size_t, std::size_t>> alignment;
};

std::string object_word(std::size_t object);
std::vector<SyntheticExample> generate_synthetic_task(const SyntheticConfig& config);

// Writes features/<id>.feat, manifest.jsonl and alignment.jsonl under dir.
void write_synthetic_task(const std::filesystem::path& dir,
                          const std::vector<SyntheticExample>& examples);

struct AlignmentRecord {
  std::string id;
  std::vector<std::pair<std::size_t, std::size_t>> words;  // (token index, slot)
};
std::vector<AlignmentRecord> read_alignment(const std::filesystem::path& path);

}  // namespace forge
