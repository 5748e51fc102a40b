#include "forge/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/rng.hpp"
#include "forge/tokens.hpp"
#include "json.hpp"

namespace forge {

namespace {

const std::vector<std::string> kReserved{"<pad>", "<s>", "</s>", "<unk>"};

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (in.bad()) throw IoError("failed reading " + path.string());
  return lines;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

// ---- vocabulary --------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(from_tokens(kReserved)) {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kReserved.size() ||
      !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw FormatError("vocabulary must start with <pad>, <s>, </s>, <unk>", 0);
  }
  Vocabulary v(std::in_place);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos)
      throw FormatError("bad vocabulary token at line " + std::to_string(i + 1), i);
    if (!v.ids_.emplace(t, static_cast<TokenId>(i)).second)
      throw FormatError("duplicate vocabulary token '" + t + "'", i);
  }
  v.tokens_ = std::move(tokens);
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences,
                             std::size_t min_frequency) {
  if (min_frequency < 1) throw ConfigError("min_frequency must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& s : sentences)
    for (const auto& w : s) ++counts[w];
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, n] : counts)
    if (n >= min_frequency && std::find(kReserved.begin(), kReserved.end(), w) == kReserved.end())
      kept.emplace_back(w, n);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = kReserved;
  for (auto& [w, n] : kept) tokens.push_back(w);
  Vocabulary v = from_tokens(std::move(tokens));
  v.min_frequency_ = min_frequency;
  return v;
}

TokenId Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<TokenId> Vocabulary::encode_caption(std::span<const std::string> words) const {
  std::vector<TokenId> ids{kBos};
  for (const auto& w : words) ids.push_back(id(w));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (TokenId i : ids) words.push_back(token(i));
  return words;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos)
      throw FormatError("vocabulary file does not end with a newline", text.size());
    tokens.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const { write_text(path, serialize()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---- manifest ----------------------------------------------------------

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (blank(lines[n])) continue;
    const std::string where = path.string() + ":" + std::to_string(n + 1);
    try {
      auto j = nlohmann::json::parse(lines[n]);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      std::filesystem::path features = j.at("features").get<std::string>();
      e.features = features.is_absolute() ? features : base / features;
      e.captions = j.at("captions").get<std::vector<std::string>>();
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(where + ": " + ex.what());
    }
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["features"] = e.features.generic_string();
    j["captions"] = e.captions;
    out += j.dump() + "\n";
  }
  write_text(path, out);
}

Vocabulary build_vocab(const std::vector<ManifestEntry>& entries, std::size_t min_frequency) {
  std::vector<std::vector<std::string>> sentences;
  for (const auto& e : entries)
    for (const auto& c : e.captions) sentences.push_back(tokenize(c));
  return Vocabulary::build(sentences, min_frequency);
}

Dataset load_dataset(const std::vector<ManifestEntry>& entries, const Vocabulary& vocab) {
  Dataset data;
  for (const auto& e : entries) {
    if (e.captions.empty()) throw DataError("image '" + e.id + "' has no captions");
    FeatureGrid grid = load_feature_grid(e.features);
    grid.image_id = e.id;
    CaptionExample ex{e.id, data.grids.size(), {}};
    for (const auto& c : e.captions) {
      auto words = tokenize(c);
      ex.references.push_back(vocab.encode_caption(words));
    }
    data.grids.push_back(std::move(grid));
    data.examples.push_back(std::move(ex));
  }
  return data;
}

// ---- batching ----------------------------------------------------------

Batch make_batch(std::span<const TrainingRow> rows) {
  Batch b;
  for (const auto& r : rows) {
    if (r.tokens.size() < 2) throw DataError("a training sequence needs at least <s> and </s>");
    b.steps = std::max(b.steps, r.tokens.size() - 1);
  }
  b.inputs.assign(rows.size() * b.steps, kPad);
  b.targets.assign(rows.size() * b.steps, kPad);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.images.push_back(rows[i].image);
    const auto& t = rows[i].tokens;
    for (std::size_t s = 0; s + 1 < t.size(); ++s) {
      b.inputs[i * b.steps + s] = t[s];
      b.targets[i * b.steps + s] = t[s + 1];
    }
  }
  return b;
}

namespace {
std::vector<TrainingRow> all_rows(std::span<const CaptionExample> examples) {
  std::vector<TrainingRow> rows;
  for (const auto& e : examples)
    for (const auto& r : e.references) rows.push_back({e.image, r});
  return rows;
}

std::vector<Batch> group(const std::vector<TrainingRow>& rows, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < rows.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, rows.size() - i);
    batches.push_back(make_batch(std::span(rows).subspan(i, n)));
  }
  return batches;
}
}  // namespace

std::vector<Batch> make_batches(std::span<const CaptionExample> examples, std::size_t batch_size,
                                std::uint64_t seed) {
  auto rows = all_rows(examples);
  Rng rng(seed);
  rng.shuffle(rows);
  return group(rows, batch_size);
}

std::vector<Batch> make_ordered_batches(std::span<const CaptionExample> examples,
                                        std::size_t batch_size) {
  return group(all_rows(examples), batch_size);
}

// ---- synthetic task ----------------------------------------------------

std::string object_word(std::size_t object) {
  static const char* const kNouns[] = {
      "apple", "boat",  "bus",   "cake",   "car",    "cat",    "chair", "clock",
      "cow",   "cup",   "dog",   "horse",  "kite",   "lamp",   "pizza", "plane",
      "sheep", "sofa",  "train", "truck",  "vase",   "zebra",  "bear",  "bench",
      "bike",  "bird",  "bowl",  "book",   "bottle", "giraffe", "knife", "phone"};
  constexpr std::size_t n = sizeof(kNouns) / sizeof(kNouns[0]);
  return object < n ? kNouns[object] : "object" + std::to_string(object);
}

std::vector<SyntheticExample> generate_synthetic_task(const SyntheticConfig& config) {
  if (config.slots < 1) throw ConfigError("synthetic task needs at least one slot");
  if (config.objects < config.slots)
    throw ConfigError("synthetic task needs at least as many objects as slots");
  if (config.noise < 0) throw ConfigError("synthetic noise must be non-negative");
  const std::size_t k = config.slots, d = config.objects + config.slots;
  Rng rng(config.seed);
  std::vector<SyntheticExample> out;
  out.reserve(config.examples);
  const std::size_t digits = std::to_string(config.examples).size();
  for (std::size_t n = 0; n < config.examples; ++n) {
    SyntheticExample ex;
    std::string id = std::to_string(n);
    ex.grid.image_id = "syn" + std::string(digits - id.size(), '0') + id;

    std::vector<std::size_t> pool(config.objects);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t s = 0; s < k; ++s) {  // partial Fisher-Yates
      std::size_t j = s + static_cast<std::size_t>(rng.below(pool.size() - s));
      std::swap(pool[s], pool[j]);
    }
    ex.objects.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    ex.order.resize(k);
    std::iota(ex.order.begin(), ex.order.end(), 0);
    rng.shuffle(ex.order);

    std::vector<std::size_t> rank(k);
    for (std::size_t i = 0; i < k; ++i) rank[ex.order[i]] = i;
    Tensor f(Shape{k, d});
    auto data = f.mutable_data();
    for (std::size_t s = 0; s < k; ++s) {
      data[s * d + ex.objects[s]] = 1.0;
      data[s * d + config.objects + rank[s]] = 1.0;
      if (config.noise > 0)
        for (std::size_t j = 0; j < d; ++j) data[s * d + j] += config.noise * rng.normal();
      // feature files hold binary32; keep the in-memory copy identical to what is written
      for (std::size_t j = 0; j < d; ++j)
        data[s * d + j] = static_cast<double>(static_cast<float>(data[s * d + j]));
    }
    ex.grid.features = std::move(f);

    for (std::size_t i = 0; i < k; ++i) {
      if (i > 0) ex.caption += " and ";
      ex.caption += "a " + object_word(ex.objects[ex.order[i]]);
      ex.alignment.emplace_back(3 * i + 1, ex.order[i]);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_synthetic_task(const std::filesystem::path& dir,
                          const std::vector<SyntheticExample>& examples) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create " + (dir / "features").string() + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  std::string alignment;
  for (const auto& ex : examples) {
    const std::filesystem::path rel = std::filesystem::path("features") / (ex.grid.image_id + ".feat");
    write_feature_grid(dir / rel, ex.grid);
    entries.push_back({ex.grid.image_id, rel, {ex.caption}});
    nlohmann::ordered_json j;
    j["id"] = ex.grid.image_id;
    auto words = nlohmann::json::array();
    for (auto [pos, slot] : ex.alignment) words.push_back({{"token", pos}, {"slot", slot}});
    j["words"] = words;
    alignment += j.dump() + "\n";
  }
  write_manifest(dir / "manifest.jsonl", entries);
  write_text(dir / "alignment.jsonl", alignment);
}

std::vector<AlignmentRecord> read_alignment(const std::filesystem::path& path) {
  std::vector<AlignmentRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (blank(lines[n])) continue;
    try {
      auto j = nlohmann::json::parse(lines[n]);
      AlignmentRecord r{j.at("id").get<std::string>(), {}};
      for (const auto& w : j.at("words"))
        r.words.emplace_back(w.at("token").get<std::size_t>(), w.at("slot").get<std::size_t>());
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(n + 1) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace forge
