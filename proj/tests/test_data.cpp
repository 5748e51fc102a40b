#include <filesystem>

#include "doctest.h"
#include "forge/data.hpp"
#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/tokens.hpp"
#include "test_support.hpp"

using namespace forge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("forge_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::vector<std::string>> sentences(std::initializer_list<const char*> lines) {
  std::vector<std::vector<std::string>> out;
  for (const char* l : lines) out.push_back(tokenize(l));
  return out;
}

}  // namespace

TEST_CASE("vocabulary ordering and thresholds") {
  Vocabulary v = Vocabulary::build(sentences({"a b c", "a b", "b a"}), 2);
  CHECK(v.size() == 6);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("c") == kUnk);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(1) == "<s>");
  CHECK(v.token(2) == "</s>");
  CHECK(v.token(3) == "<unk>");

  Vocabulary all = Vocabulary::build(sentences({"x y", "z"}), 1);
  CHECK(all.size() == 7);
  CHECK(all.id("x") == 4);

  Vocabulary rare = Vocabulary::build(sentences({"w w w w q q q q q"}), 5);
  CHECK(rare.id("w") == kUnk);
  CHECK(rare.id("q") == 4);

  Vocabulary counts = Vocabulary::build(sentences({"m m n n n o"}), 1);
  CHECK(counts.id("n") == 4);
  CHECK(counts.id("m") == 5);
  CHECK(counts.id("o") == 6);

  CHECK_THROWS_AS(Vocabulary::build({}, 1), DataError);
  CHECK_THROWS_AS(Vocabulary::build(sentences({""}), 1), DataError);
  CHECK_THROWS_AS(v.token(6), VocabularyError);
}

TEST_CASE("vocabulary encode/decode and file round trip") {
  Vocabulary v = Vocabulary::build(sentences({"a dog on the grass", "the dog"}), 1);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<TokenId> ids(rng.below(8));
    for (auto& id : ids) {
      do id = static_cast<TokenId>(rng.below(v.size()));
      while (id == kUnk);
    }
    auto words = v.decode(ids);
    CHECK(v.encode(words) == ids);
  }
  std::vector<TokenId> cap{kBos, v.id("a"), v.id("dog"), kEos, kPad};
  CHECK(v.detokenize(cap) == "a dog");

  fs::path dir = scratch("vocab");
  v.save(dir / "v.txt");
  auto bytes = read_file_bytes(dir / "v.txt");
  Vocabulary back = Vocabulary::load(dir / "v.txt");
  CHECK(back == v);
  back.save(dir / "w.txt");
  CHECK(read_file_bytes(dir / "w.txt") == bytes);
  std::string text(bytes.begin(), bytes.end());
  CHECK(text.rfind("<pad>\n<s>\n</s>\n<unk>\n", 0) == 0);

  CHECK_THROWS_AS(Vocabulary::parse("<s>\n<pad>\n</s>\n<unk>\n"), FormatError);
  CHECK_THROWS_AS(Vocabulary::parse("<pad>\n<s>\n</s>\n<unk>\na\na\n"), FormatError);
  CHECK_THROWS_AS(Vocabulary::parse("<pad>\n<s>\n</s>\n<unk>"), FormatError);
}

TEST_CASE("manifest round trip and dataset loading") {
  fs::path dir = scratch("manifest");
  Rng rng(2);
  fs::create_directories(dir / "f");
  write_feature_grid(dir / "f/one.feat", {"one", testing::random_tensor({2, 3}, rng)});
  write_feature_grid(dir / "f/two.feat", {"two", testing::random_tensor({3, 3}, rng)});
  std::vector<ManifestEntry> entries{{"one", "f/one.feat", {"A dog.", "The dog runs"}},
                                     {"two", "f/two.feat", {"a cat"}}};
  write_manifest(dir / "m.jsonl", entries);
  auto back = read_manifest(dir / "m.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].features == dir / "f/one.feat");
  CHECK(back[1].captions == entries[1].captions);

  Vocabulary v = build_vocab(back, 1);
  Dataset data = load_dataset(back, v);
  REQUIRE(data.examples.size() == 2);
  CHECK(data.grids[1].locations() == 3);
  CHECK(data.examples[0].references.size() == 2);
  CHECK(data.examples[0].references[0] == std::vector<TokenId>{kBos, v.id("a"), v.id("dog"), kEos});

  CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl"), IoError);
  write_file_bytes(dir / "bad.jsonl", std::vector<std::uint8_t>{'{', '\n'});
  CHECK_THROWS_AS(read_manifest(dir / "bad.jsonl"), DataError);
}

TEST_CASE("make_batches") {
  std::vector<CaptionExample> ex{{"a", 0, {{1, 4, 2}}}, {"b", 1, {{1, 4, 5, 6, 2}}},
                                 {"c", 2, {{1, 5, 2}}}};
  auto batches = make_batches(ex, 2, 7);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].rows() == 2);
  CHECK(batches[1].rows() == 1);
  auto again = make_batches(ex, 2, 7);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(again[i].images == batches[i].images);
    CHECK(again[i].inputs == batches[i].inputs);
  }

  // every reference is a row
  std::vector<CaptionExample> multi{{"a", 0, {{1, 4, 2}, {1, 5, 5, 2}}}};
  auto one = make_ordered_batches(multi, 8);
  REQUIRE(one.size() == 1);
  CHECK(one[0].rows() == 2);
  CHECK(one[0].steps == 3);
  CHECK(one[0].inputs == std::vector<TokenId>{1, 4, 0, 1, 5, 5});
  CHECK(one[0].targets == std::vector<TokenId>{4, 2, 0, 5, 5, 2});
}

TEST_CASE("padding never contributes to the loss") {
  Rng rng(3);
  Tensor logits = testing::random_tensor({4, 7}, rng, -2, 2);
  std::vector<TokenId> targets{4, 5, 2, 6};
  double base = cross_entropy(logits, targets, kPad).item();
  Tensor padded = concat({logits, testing::random_tensor({3, 7}, rng, -2, 2)}, 0);
  targets.insert(targets.end(), 3, kPad);
  CHECK(cross_entropy(padded, targets, kPad).item() == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("synthetic task") {
  SyntheticConfig one{5, 1, 6, 0.05, 9};
  for (const auto& ex : generate_synthetic_task(one)) {
    CHECK(tokenize(ex.caption).size() == 2);
    CHECK(ex.caption == "a " + object_word(ex.objects[0]));
  }

  SyntheticConfig c{30, 4, 20, 0.0, 11};
  auto a = generate_synthetic_task(c);
  auto b = generate_synthetic_task(c);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].caption == b[i].caption);
    CHECK(a[i].grid.features.data().size() == b[i].grid.features.data().size());
    for (std::size_t j = 0; j < a[i].grid.features.size(); ++j)
      CHECK(a[i].grid.features.data()[j] == b[i].grid.features.data()[j]);
  }

  // Oracle decoder: read object and rank codes from the noisy features directly.
  SyntheticConfig noisy{200, 4, 20, 0.05, 12};
  std::size_t correct = 0, total = 0;
  for (const auto& ex : generate_synthetic_task(noisy)) {
    const Tensor& f = ex.grid.features;
    auto argmax = [&](std::size_t row, std::size_t from, std::size_t n) {
      std::size_t best = from;
      for (std::size_t j = from; j < from + n; ++j)
        if (f.at(row, j) > f.at(row, best)) best = j;
      return best - from;
    };
    std::vector<std::string> words(noisy.slots);
    for (std::size_t s = 0; s < noisy.slots; ++s)
      words[argmax(s, noisy.objects, noisy.slots)] = object_word(argmax(s, 0, noisy.objects));
    std::string decoded;
    for (std::size_t i = 0; i < words.size(); ++i)
      decoded += (i ? " and a " : "a ") + words[i];
    auto want = tokenize(ex.caption), got = tokenize(decoded);
    REQUIRE(want.size() == got.size());
    for (std::size_t i = 0; i < want.size(); ++i) correct += want[i] == got[i];
    total += want.size();
    for (auto [pos, slot] : ex.alignment) CHECK(want[pos] == object_word(ex.objects[slot]));
  }
  CHECK(correct == total);

  fs::path dir = scratch("synthetic");
  auto small = generate_synthetic_task({6, 3, 8, 0.05, 13});
  write_synthetic_task(dir, small);
  auto entries = read_manifest(dir / "manifest.jsonl");
  REQUIRE(entries.size() == 6);
  auto align = read_alignment(dir / "alignment.jsonl");
  REQUIRE(align.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    FeatureGrid g = load_feature_grid(entries[i].features);
    for (std::size_t j = 0; j < g.features.size(); ++j)
      CHECK(g.features.data()[j] == small[i].grid.features.data()[j]);
    CHECK(align[i].words == small[i].alignment);
  }

  CHECK_THROWS_AS(generate_synthetic_task({1, 5, 4, 0.05, 1}), ConfigError);
}
