// caption_forge: vocabulary building, training, captioning, evaluation and
// attention dumps over precomputed image features.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "forge/data.hpp"
#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/run_config.hpp"
#include "forge/search.hpp"
#include "forge/tokens.hpp"
#include "forge/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace forge;

namespace {

enum Exit { kOk = 0, kIo = 2, kValidation = 3, kNumeric = 4 };

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string format_logprob(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// CAPTION_FORGE_THREADS: unset -> hardware threads, 0 -> deterministic single thread.
std::size_t worker_count() {
  const char* env = std::getenv("CAPTION_FORGE_THREADS");
  if (!env) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*env == '\0' || *end != '\0' || n < 0)
    throw ConfigError(std::string("CAPTION_FORGE_THREADS must be a non-negative integer, got '") +
                      env + "'");
  return n == 0 ? 1 : static_cast<std::size_t>(n);
}

template <typename F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_lock);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- build-vocab -------------------------------------------------------

struct VocabArgs {
  std::string manifest, out;
  std::size_t min_frequency = 5;
};

void cmd_build_vocab(const VocabArgs& a) {
  auto entries = read_manifest(a.manifest);
  Vocabulary v = build_vocab(entries, a.min_frequency);
  v.save(a.out);
  std::cerr << "vocabulary: " << v.size() << " entries (" << v.size() - kFirstWordId
            << " words with count >= " << a.min_frequency << ")\n";
}

// ---- train -------------------------------------------------------------

struct TrainArgs {
  std::string manifest, vocab, val_manifest, config_file, out_dir = "run";
  std::vector<std::string> sets;
  KeyValues flags;
};

void cmd_train(const TrainArgs& a) {
  KeyValues file;
  if (!a.config_file.empty()) file = read_config_file(a.config_file);
  KeyValues cli = a.flags;
  for (const auto& s : a.sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cli.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  resolve_settings(file, cli);  // reject unknown keys before touching the data

  Vocabulary vocab = Vocabulary::load(a.vocab);
  Dataset train_data = load_dataset(read_manifest(a.manifest), vocab);
  if (train_data.examples.empty()) throw DataError("training manifest is empty");
  Dataset val_data;
  if (!a.val_manifest.empty()) val_data = load_dataset(read_manifest(a.val_manifest), vocab);

  // feature width comes from the data unless set explicitly
  const std::size_t width = train_data.grids.front().width();
  bool width_given = false;
  for (const auto* src : {&file, &cli})
    for (const auto& [k, v] : *src) width_given |= (k == "feature_dim" || k == "feature-dim");
  if (!width_given) file.insert(file.begin(), {"feature_dim", std::to_string(width)});
  RunSettings settings = resolve_settings(file, cli);
  settings.decoder.validate();
  settings.train.validate();
  for (const auto* set : {&train_data, &val_data})
    for (const auto& g : set->grids)
      if (g.width() != settings.decoder.feature_dim)
        throw DataError("image '" + g.image_id + "' has feature width " +
                        std::to_string(g.width()) + ", expected " +
                        std::to_string(settings.decoder.feature_dim));

  const std::string echo = format_settings(effective_settings(settings));
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create " + a.out_dir + ": " + ec.message());
  write_text(fs::path(a.out_dir) / "config.txt", echo);
  std::cerr << echo;

  Rng init(settings.train.seed);
  ModelParameters params = init_parameters(settings.decoder, vocab.size(), init);
  std::cerr << "parameters: " << params.scalar_count() << "\n";

  std::ofstream log(fs::path(a.out_dir) / "train_log.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot write " + (fs::path(a.out_dir) / "train_log.jsonl").string());
  TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_dir = a.out_dir;
  hooks.on_checkpoint = [](std::size_t step, const ModelParameters&) {
    std::cerr << "checkpoint at step " << step << "\n";
    return true;
  };
  TrainResult r = train(settings.decoder, params, vocab, train_data,
                        val_data.examples.empty() ? nullptr : &val_data, settings.train, hooks);
  if (!log) throw IoError("failed writing the training log");
  std::cout << r.checkpoints.back().string() << "\n";
}

// ---- caption / attention-dump ---------------------------------------------

struct CaptionArgs {
  std::string checkpoint, features, out;
  std::size_t beam = 3, max_len = 25;
  double length_exponent = 0.0;
};

void cmd_caption(const CaptionArgs& a) {
  Captioner captioner(load_checkpoint(a.checkpoint));
  auto hyps = captioner.caption(load_feature_grid(a.features), {a.beam, a.max_len, a.length_exponent});
  const Hypothesis& best = hyps.front();
  std::cout << captioner.vocabulary().detokenize(best.tokens) << "\t" << format_logprob(best.logprob)
            << (best.truncated ? "\ttruncated" : "") << "\n";
}

void cmd_attention_dump(const CaptionArgs& a) {
  Captioner captioner(load_checkpoint(a.checkpoint));
  FeatureGrid grid = load_feature_grid(a.features);
  EncoderMemory memory = captioner.encode(grid);
  auto hyps = beam_search(captioner.decoder(), memory, {a.beam, a.max_len, a.length_exponent});
  const auto& tokens = hyps.front().tokens;
  auto rows = attention_trace(captioner.decoder(), memory, tokens);
  nlohmann::ordered_json j;
  auto words = nlohmann::json::array();
  for (std::size_t i = 1; i < tokens.size(); ++i) words.push_back(captioner.vocabulary().token(tokens[i]));
  j["tokens"] = words;
  j["weights"] = rows;
  const std::string text = j.dump() + "\n";
  if (a.out.empty() || a.out == "-")
    std::cout << text;
  else
    write_text(a.out, text);
}

// ---- evaluate ------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, manifest, corpus, out, captions_out, idf_manifest;
  std::size_t beam = 3, max_len = 25;
  bool plain_cider = false;
};

void cmd_evaluate(const EvalArgs& a) {
  EvalCorpus corpus;
  if (!a.corpus.empty()) {
    if (!a.checkpoint.empty() || !a.manifest.empty())
      throw ConfigError("--corpus cannot be combined with --checkpoint/--manifest");
    corpus = read_eval_corpus(a.corpus);
  } else {
    if (a.checkpoint.empty() || a.manifest.empty())
      throw ConfigError("evaluate needs --checkpoint and --manifest, or --corpus");
    auto entries = read_manifest(a.manifest);
    if (entries.empty()) throw DataError("manifest " + a.manifest + " is empty");
    Captioner captioner(load_checkpoint(a.checkpoint));
    corpus.resize(entries.size());
    parallel_for(entries.size(), [&](std::size_t i) {
      FeatureGrid grid = load_feature_grid(entries[i].features);
      auto hyps = captioner.caption(grid, {a.beam, a.max_len, 0.0});
      EvalItem& item = corpus[i];
      item.id = entries[i].id;
      item.candidate = tokenize(captioner.vocabulary().detokenize(hyps.front().tokens));
      for (const auto& c : entries[i].captions) item.references.push_back(tokenize(c));
      if (item.references.empty()) throw DataError("image '" + item.id + "' has no references");
    });
    if (!a.captions_out.empty()) write_eval_corpus(a.captions_out, corpus);
  }
  if (corpus.empty()) throw DataError("nothing to evaluate");

  CiderOptions options;
  if (a.plain_cider) options.variant = CiderVariant::plain;
  if (!a.idf_manifest.empty())
    for (const auto& e : read_manifest(a.idf_manifest)) {
      std::vector<Sentence> refs;
      for (const auto& c : e.captions) refs.push_back(tokenize(c));
      options.idf_documents.push_back(std::move(refs));
    }
  const std::string json = metrics_json(evaluate_corpus(corpus, options));
  if (a.out.empty() || a.out == "-")
    std::cout << json;
  else
    write_text(a.out, json);
}

// ---- synth ----------------------------------------------------------------

void cmd_synth(const std::string& out, const SyntheticConfig& c) {
  write_synthetic_task(out, generate_synthetic_task(c));
  std::cerr << "wrote " << c.examples << " examples to " << out << "\n";
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "caption_forge: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Caption models over precomputed image features"};
  app.require_subcommand(1);

  VocabArgs vocab_args;
  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a vocabulary file from a manifest");
  vocab_cmd->add_option("--manifest", vocab_args.manifest, "Manifest (JSON lines)")->required();
  vocab_cmd->add_option("--out", vocab_args.out, "Vocabulary file to write")->required();
  vocab_cmd->add_option("--min-frequency", vocab_args.min_frequency, "Minimum token count")
      ->capture_default_str();

  TrainArgs train_args;
  std::string decoder, attention, lr, batch_size, seed;
  bool weight_norm = false, concat_global = false;
  auto* train_cmd = app.add_subcommand("train", "Train a caption model");
  train_cmd->add_option("--manifest", train_args.manifest, "Training manifest")->required();
  train_cmd->add_option("--vocab", train_args.vocab, "Vocabulary file")->required();
  train_cmd->add_option("--val-manifest", train_args.val_manifest, "Validation manifest");
  train_cmd->add_option("--config", train_args.config_file, "key=value settings file");
  train_cmd->add_option("--out-dir", train_args.out_dir, "Checkpoints and logs")->capture_default_str();
  train_cmd->add_option("--decoder", decoder, "arnn | transformer | fcn");
  train_cmd->add_option("--attention", attention, "none | dot | mlp | multihead");
  train_cmd->add_option("--lr", lr, "Initial learning rate");
  train_cmd->add_option("--batch-size", batch_size, "Rows per batch");
  train_cmd->add_option("--seed", seed, "Initialisation, shuffling and dropout seed");
  train_cmd->add_flag("--weight-norm", weight_norm, "Weight-normalise dense layers");
  train_cmd->add_flag("--concat-global", concat_global, "Feed the global descriptor to the LSTM");
  train_cmd->add_option("--set", train_args.sets, "Any setting as key=value (repeatable)");

  CaptionArgs caption_args;
  auto* caption_cmd = app.add_subcommand("caption", "Caption one feature file");
  caption_cmd->add_option("--checkpoint", caption_args.checkpoint, "Checkpoint file")->required();
  caption_cmd->add_option("--features", caption_args.features, "Feature file")->required();
  caption_cmd->add_option("--beam", caption_args.beam, "Beam size")->capture_default_str();
  caption_cmd->add_option("--max-len", caption_args.max_len, "Maximum words")->capture_default_str();
  caption_cmd->add_option("--length-exponent", caption_args.length_exponent,
                          "Rank by logprob / length^x (0 = off)");

  CaptionArgs dump_args;
  dump_args.beam = 1;
  auto* dump_cmd = app.add_subcommand("attention-dump", "Write per-step attention weights as JSON");
  dump_cmd->add_option("--checkpoint", dump_args.checkpoint, "Checkpoint file")->required();
  dump_cmd->add_option("--features", dump_args.features, "Feature file")->required();
  dump_cmd->add_option("--out", dump_args.out, "Output file (default: standard output)");
  dump_cmd->add_option("--beam", dump_args.beam, "Beam size")->capture_default_str();
  dump_cmd->add_option("--max-len", dump_args.max_len, "Maximum words")->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Caption a manifest and score BLEU/CIDEr-D");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--manifest", eval_args.manifest, "Manifest with reference captions");
  eval_cmd->add_option("--corpus", eval_args.corpus, "Score an existing {id, candidate, references} file");
  eval_cmd->add_option("--out", eval_args.out, "Metrics JSON (default: standard output)");
  eval_cmd->add_option("--captions-out", eval_args.captions_out, "Also write the generated captions");
  eval_cmd->add_option("--idf-manifest", eval_args.idf_manifest, "Reference corpus for CIDEr IDF");
  eval_cmd->add_option("--beam", eval_args.beam, "Beam size")->capture_default_str();
  eval_cmd->add_option("--max-len", eval_args.max_len, "Maximum words")->capture_default_str();
  eval_cmd->add_flag("--plain-cider", eval_args.plain_cider, "CIDEr without clipping or length penalty");

  std::string synth_out;
  SyntheticConfig synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic alignment task");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--examples", synth.examples)->capture_default_str();
  synth_cmd->add_option("--slots", synth.slots)->capture_default_str();
  synth_cmd->add_option("--objects", synth.objects)->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*vocab_cmd) cmd_build_vocab(vocab_args);
    if (*train_cmd) {
      auto flag = [&](const char* key, const std::string& v) {
        if (!v.empty()) train_args.flags.emplace_back(key, v);
      };
      flag("decoder", decoder);
      flag("attention", attention);
      flag("lr", lr);
      flag("batch_size", batch_size);
      flag("seed", seed);
      if (weight_norm) flag("weight_norm", "true");
      if (concat_global) flag("concat_global", "true");
      cmd_train(train_args);
    }
    if (*caption_cmd) cmd_caption(caption_args);
    if (*dump_cmd) cmd_attention_dump(dump_args);
    if (*eval_cmd) cmd_evaluate(eval_args);
    if (*synth_cmd) cmd_synth(synth_out, synth);
  } catch (const IoError& e) {
    return report("i/o error", e, kIo);
  } catch (const NumericError& e) {
    return report("numeric failure", e, kNumeric);
  } catch (const Error& e) {
    return report("invalid input", e, kValidation);
  } catch (const std::exception& e) {
    return report("error", e, kValidation);
  }
  return kOk;
}
