#include "forge/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "forge/error.hpp"
#include "forge/encoder.hpp"
#include "json.hpp"

namespace forge {

std::vector<std::string> tokenize(std::string_view raw) {
  static constexpr std::string_view kPunct = ".,!?;:\"'()";
  std::vector<std::string> out;
  std::string current;
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (kPunct.find(ch) != std::string_view::npos) continue;
    if (std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
      continue;
    }
    current += static_cast<char>(std::tolower(c));
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, double>;

NgramCounts ngrams(const Sentence& s, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                    s.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1.0;
  return counts;
}

void require_corpus(const EvalCorpus& corpus) {
  if (corpus.empty()) throw DataError("evaluation corpus is empty");
  for (const auto& item : corpus)
    if (item.references.empty())
      throw DataError("image '" + item.id + "' has no references");
}

}  // namespace

double bleu(const EvalCorpus& corpus, int max_n) {
  if (max_n < 1 || max_n > 4) throw ConfigError("BLEU order must be in 1..4");
  require_corpus(corpus);
  std::vector<double> matched(static_cast<std::size_t>(max_n), 0.0);
  std::vector<double> total(static_cast<std::size_t>(max_n), 0.0);
  double cand_len = 0, ref_len = 0;
  for (const auto& item : corpus) {
    const double c = static_cast<double>(item.candidate.size());
    cand_len += c;
    double best = -1, best_gap = 0;
    for (const auto& r : item.references) {
      const double l = static_cast<double>(r.size());
      const double gap = std::abs(l - c);
      if (best < 0 || gap < best_gap || (gap == best_gap && l < best)) {
        best = l;
        best_gap = gap;
      }
    }
    ref_len += best;
    for (int n = 1; n <= max_n; ++n) {
      NgramCounts cand = ngrams(item.candidate, static_cast<std::size_t>(n));
      NgramCounts limit;
      for (const auto& r : item.references)
        for (const auto& [g, k] : ngrams(r, static_cast<std::size_t>(n)))
          limit[g] = std::max(limit[g], k);
      for (const auto& [g, k] : cand) {
        auto it = limit.find(g);
        matched[n - 1] += std::min(k, it == limit.end() ? 0.0 : it->second);
        total[n - 1] += k;
      }
    }
  }
  if (cand_len == 0) return 0.0;
  double log_sum = 0;
  for (int n = 0; n < max_n; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_sum += std::log(matched[n] / total[n]);
  }
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / max_n);
}

namespace {

constexpr std::size_t kCiderN = 4;

struct TfIdf {
  std::array<std::map<std::vector<std::string>, double>, kCiderN> vec;
  std::array<double, kCiderN> norm{};
  double length = 0;
};

using DocFreq = std::map<std::vector<std::string>, double>;

TfIdf tf_idf(const Sentence& s, const DocFreq& df, double log_docs) {
  TfIdf out;
  out.length = static_cast<double>(s.size());
  for (std::size_t n = 1; n <= kCiderN; ++n) {
    for (const auto& [g, tf] : ngrams(s, n)) {
      auto it = df.find(g);
      const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      const double v = tf * (log_docs - d);
      out.vec[n - 1][g] = v;
      out.norm[n - 1] += v * v;
    }
    out.norm[n - 1] = std::sqrt(out.norm[n - 1]);
  }
  return out;
}

}  // namespace

CiderResult cider(const EvalCorpus& corpus, const CiderOptions& options) {
  require_corpus(corpus);
  std::vector<std::vector<Sentence>> own;
  const std::vector<std::vector<Sentence>>* documents = &options.idf_documents;
  if (documents->empty()) {
    for (const auto& item : corpus) own.push_back(item.references);
    documents = &own;
  }
  if (documents->size() < 2) {
    throw DataError(
        "CIDEr needs at least two images to estimate document frequencies; "
        "supply an IDF corpus for single-image evaluation");
  }
  DocFreq df;
  for (const auto& refs : *documents) {
    std::set<std::vector<std::string>> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= kCiderN; ++n)
        for (const auto& [g, k] : ngrams(r, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(documents->size()));
  const bool clipped = options.variant == CiderVariant::cider_d;

  CiderResult result;
  for (const auto& item : corpus) {
    TfIdf cand = tf_idf(item.candidate, df, log_docs);
    std::array<double, kCiderN> acc{};
    for (const auto& r : item.references) {
      TfIdf ref = tf_idf(r, df, log_docs);
      const double delta = cand.length - ref.length;
      const double penalty =
          clipped ? std::exp(-(delta * delta) / (2.0 * options.sigma * options.sigma)) : 1.0;
      for (std::size_t n = 0; n < kCiderN; ++n) {
        double dot = 0;
        for (const auto& [g, vc] : cand.vec[n]) {
          auto it = ref.vec[n].find(g);
          if (it == ref.vec[n].end()) continue;
          dot += (clipped ? std::min(vc, it->second) : vc) * it->second;
        }
        if (cand.norm[n] != 0 && ref.norm[n] != 0) dot /= cand.norm[n] * ref.norm[n];
        acc[n] += dot * penalty;
      }
    }
    double mean = 0;
    for (double a : acc) mean += a;
    mean /= static_cast<double>(kCiderN);
    result.per_image.push_back(10.0 * mean / static_cast<double>(item.references.size()));
  }
  double total = 0;
  for (double s : result.per_image) total += s;
  result.score = total / static_cast<double>(result.per_image.size());
  return result;
}

MetricScores evaluate_corpus(const EvalCorpus& corpus, const CiderOptions& options) {
  MetricScores s;
  for (int n = 1; n <= 4; ++n) s.bleu[n - 1] = bleu(corpus, n);
  s.cider = cider(corpus, options).score;
  return s;
}

std::string metrics_json(const MetricScores& scores) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\"B@1\": %.4f, \"B@2\": %.4f, \"B@3\": %.4f, \"B@4\": %.4f, \"CIDEr\": %.4f}\n",
                scores.bleu[0], scores.bleu[1], scores.bleu[2], scores.bleu[3], scores.cider);
  return buf;
}

EvalCorpus read_eval_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  EvalCorpus corpus;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      EvalItem item;
      item.id = j.at("id").get<std::string>();
      item.candidate = tokenize(j.at("candidate").get<std::string>());
      for (const auto& r : j.at("references")) item.references.push_back(tokenize(r.get<std::string>()));
      corpus.push_back(std::move(item));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + ex.what());
    }
  }
  return corpus;
}

void write_eval_corpus(const std::filesystem::path& path, const EvalCorpus& corpus) {
  std::string out;
  for (const auto& item : corpus) {
    nlohmann::ordered_json j;
    j["id"] = item.id;
    j["candidate"] = join_tokens(item.candidate);
    auto refs = nlohmann::json::array();
    for (const auto& r : item.references) refs.push_back(join_tokens(r));
    j["references"] = refs;
    out += j.dump() + "\n";
  }
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(out.data()), out.size()));
}

}  // namespace forge
