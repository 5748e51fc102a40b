#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace forge {

// Lowercase, drop . , ! ? ; : " ' ( ), split on whitespace.
std::vector<std::string> tokenize(std::string_view raw);
std::string join_tokens(const std::vector<std::string>& tokens);

using Sentence = std::vector<std::string>;

struct EvalItem {
  std::string id;
  Sentence candidate;
  std::vector<Sentence> references;
};
using EvalCorpus = std::vector<EvalItem>;

// Corpus-level BLEU with clipped counts and the closest-reference brevity
// penalty (ties to the shorter reference). No smoothing.
double bleu(const EvalCorpus& corpus, int max_n);

enum class CiderVariant { cider_d, plain };

struct CiderOptions {
  CiderVariant variant = CiderVariant::cider_d;
  double sigma = 6.0;
  // Reference sets that define document frequencies. Empty: use the corpus's own references.
  std::vector<std::vector<Sentence>> idf_documents;
};

struct CiderResult {
  double score = 0.0;
  std::vector<double> per_image;
};

// Requires at least two documents for the IDF (DataError otherwise).
CiderResult cider(const EvalCorpus& corpus, const CiderOptions& options = {});

struct MetricScores {
  std::array<double, 4> bleu{};
  double cider = 0.0;
};

MetricScores evaluate_corpus(const EvalCorpus& corpus, const CiderOptions& options = {});
// {"B@1": ..., "B@4": ..., "CIDEr": ...} with four decimals.
std::string metrics_json(const MetricScores& scores);

// Line-delimited JSON {"id", "candidate", "references": [...]} with raw strings.
EvalCorpus read_eval_corpus(const std::filesystem::path& path);
void write_eval_corpus(const std::filesystem::path& path, const EvalCorpus& corpus);

}  // namespace forge
