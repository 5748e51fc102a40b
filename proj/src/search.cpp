#include "forge/search.hpp"

#include <algorithm>
#include <cmath>

#include "forge/error.hpp"
#include "forge/ops.hpp"
#include "forge/tokens.hpp"

namespace forge {

bool emittable(TokenId id) { return id != kPad && id != kBos; }

namespace {

struct Live {
  Hypothesis hyp;
  DecoderState state;
  bool finished = false;
};

double rank_score(double logprob, std::size_t length, double exponent) {
  if (exponent == 0.0) return logprob;
  return logprob / std::pow(static_cast<double>(length), exponent);
}

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(),
                                      b.tokens.end());
}

std::vector<double> step_log_probs(const Tensor& logits) {
  NoGradGuard no_grad;
  Tensor lp = log_softmax(reshape(logits, {1, logits.size()}));
  return {lp.data().begin(), lp.data().end()};
}

}  // namespace

std::vector<Hypothesis> beam_search(const Decoder& decoder, const EncoderMemory& memory,
                                    const SearchOptions& options) {
  if (options.beam_size < 1) throw ConfigError("beam size must be at least 1");
  if (options.max_len < 1) throw ConfigError("max_len must be at least 1");
  if (options.length_exponent < 0) throw ConfigError("length exponent must be non-negative");
  NoGradGuard no_grad;
  const auto vocab = static_cast<TokenId>(decoder.vocab_size());

  std::vector<Live> beam(1);
  beam[0].hyp.tokens = {kBos};
  beam[0].state = decoder.start(memory);

  while (std::any_of(beam.begin(), beam.end(), [](const Live& l) { return !l.finished; })) {
    std::vector<Live> pool;
    for (Live& live : beam) {
      if (live.finished) {
        pool.push_back(std::move(live));
        continue;
      }
      StepOutput out = decoder.step(memory, live.state, live.hyp.tokens.back());
      std::vector<double> lp = step_log_probs(out.logits);
      const bool forced = live.hyp.tokens.size() - 1 >= options.max_len;
      for (TokenId t = 0; t < vocab; ++t) {
        if (!emittable(t) || (forced && t != kEos)) continue;
        Live next;
        next.hyp = live.hyp;
        next.hyp.tokens.push_back(t);
        next.hyp.logprob += lp[static_cast<std::size_t>(t)];
        next.hyp.step_logprobs.push_back(lp[static_cast<std::size_t>(t)]);
        next.hyp.score = rank_score(next.hyp.logprob, next.hyp.tokens.size() - 1,
                                    options.length_exponent);
        next.hyp.truncated = forced;
        next.finished = t == kEos;
        if (!next.finished) next.state = out.state;
        pool.push_back(std::move(next));
      }
    }
    const std::size_t keep = std::min(options.beam_size, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(),
                      [](const Live& a, const Live& b) { return better(a.hyp, b.hyp); });
    pool.resize(keep);
    beam = std::move(pool);
  }

  std::vector<Hypothesis> out;
  for (Live& l : beam) out.push_back(std::move(l.hyp));
  return out;
}

Hypothesis greedy_decode(const Decoder& decoder, const EncoderMemory& memory,
                         std::size_t max_len) {
  if (max_len < 1) throw ConfigError("max_len must be at least 1");
  NoGradGuard no_grad;
  Hypothesis h;
  h.tokens = {kBos};
  DecoderState state = decoder.start(memory);
  while (h.tokens.back() != kEos) {
    StepOutput out = decoder.step(memory, state, h.tokens.back());
    std::vector<double> lp = step_log_probs(out.logits);
    const bool forced = h.tokens.size() - 1 >= max_len;
    TokenId best = kEos;  // lowest emittable id, so strict > keeps the lowest among ties
    if (!forced) {
      for (TokenId t = 0; t < static_cast<TokenId>(lp.size()); ++t)
        if (emittable(t) && lp[static_cast<std::size_t>(t)] > lp[static_cast<std::size_t>(best)])
          best = t;
    }
    h.tokens.push_back(best);
    h.logprob += lp[static_cast<std::size_t>(best)];
    h.step_logprobs.push_back(lp[static_cast<std::size_t>(best)]);
    h.truncated = forced;
    state = std::move(out.state);
  }
  h.score = h.logprob;
  return h;
}

double score_sequence(const Decoder& decoder, const EncoderMemory& memory,
                      std::span<const TokenId> tokens) {
  if (tokens.size() < 2 || tokens.front() != kBos)
    throw DataError("a scored sequence starts with <s> and has at least one more token");
  NoGradGuard no_grad;
  Rng unused(0);
  const std::size_t steps = tokens.size() - 1;
  Tensor lp = log_softmax(decoder.forward(memory, tokens.first(steps), steps, false, unused));
  const std::size_t v = lp.dim(1);
  double total = 0;
  for (std::size_t t = 0; t < steps; ++t)
    total += lp.data()[t * v + static_cast<std::size_t>(tokens[t + 1])];
  return total;
}

std::vector<std::vector<double>> attention_trace(const Decoder& decoder,
                                                 const EncoderMemory& memory,
                                                 std::span<const TokenId> tokens) {
  NoGradGuard no_grad;
  std::vector<std::vector<double>> rows;
  DecoderState state = decoder.start(memory);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    StepOutput out = decoder.step(memory, state, tokens[t]);
    const auto w = out.attention.weights.data();
    rows.emplace_back(w.begin(), w.end());
    state = std::move(out.state);
  }
  return rows;
}

Captioner::Captioner(Checkpoint checkpoint)
    : checkpoint_(std::move(checkpoint)),
      vocab_(Vocabulary::from_tokens(checkpoint_.vocabulary)) {
  checkpoint_.config.validate();
  weights_ = effective_weights(checkpoint_.parameters);
  decoder_ = Decoder::create(checkpoint_.config, weights_);
  if (decoder_->vocab_size() != vocab_.size()) {
    throw FormatError("checkpoint vocabulary has " + std::to_string(vocab_.size()) +
                          " entries but the output layer has " +
                          std::to_string(decoder_->vocab_size()),
                      0);
  }
}

EncoderMemory Captioner::encode(const FeatureGrid& grid) const {
  NoGradGuard no_grad;
  const Tensor& wf = lookup(weights_, "encoder.W_f");
  if (grid.width() != wf.dim(1)) {
    throw DimensionError("feature width " + std::to_string(grid.width()) +
                         " does not match the model's " + std::to_string(wf.dim(1)));
  }
  return memory_from(project(grid, wf, lookup(weights_, "encoder.W_g")));
}

std::vector<Hypothesis> Captioner::caption(const FeatureGrid& grid,
                                           const SearchOptions& options) const {
  return beam_search(*decoder_, encode(grid), options);
}

}  // namespace forge
