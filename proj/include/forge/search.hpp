#pragma once

#include <span>
#include <vector>

#include "forge/data.hpp"
#include "forge/decoder.hpp"

namespace forge {

struct SearchOptions {
  std::size_t beam_size = 3;
  std::size_t max_len = 25;      // content tokens; </s> is forced after this many
  double length_exponent = 0.0;  // ranking score = logprob / length^exponent; 0 keeps raw sums
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // <s> ... </s>
  double logprob = 0.0;
  double score = 0.0;
  bool truncated = false;       // </s> was forced at max_len
  std::vector<double> step_logprobs;
};

// Tokens a decoder may emit: everything except <pad> and <s>.
bool emittable(TokenId id);

// Ranked finished hypotheses (at most beam_size). Ties go to the shorter
// sequence, then to the lexicographically lower token ids.
std::vector<Hypothesis> beam_search(const Decoder& decoder, const EncoderMemory& memory,
                                    const SearchOptions& options);
Hypothesis greedy_decode(const Decoder& decoder, const EncoderMemory& memory,
                         std::size_t max_len);

// Log-likelihood of a full <s> ... </s> sequence from one teacher-forced forward pass.
double score_sequence(const Decoder& decoder, const EncoderMemory& memory,
                      std::span<const TokenId> tokens);

// Attention weights per generated token for a finished sequence, replayed stepwise.
std::vector<std::vector<double>> attention_trace(const Decoder& decoder,
                                                 const EncoderMemory& memory,
                                                 std::span<const TokenId> tokens);

// A loaded checkpoint ready to caption feature grids.
class Captioner {
 public:
  explicit Captioner(Checkpoint checkpoint);

  const DecoderConfig& config() const { return checkpoint_.config; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const Decoder& decoder() const { return *decoder_; }

  EncoderMemory encode(const FeatureGrid& grid) const;
  std::vector<Hypothesis> caption(const FeatureGrid& grid, const SearchOptions& options) const;

 private:
  Checkpoint checkpoint_;
  Vocabulary vocab_;
  Weights weights_;
  std::unique_ptr<Decoder> decoder_;
};

}  // namespace forge
