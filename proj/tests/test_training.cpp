#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "forge/error.hpp"
#include "forge/metrics.hpp"
#include "forge/search.hpp"
#include "forge/tokens.hpp"
#include "forge/training.hpp"
#include "json.hpp"
#include "test_support.hpp"

using namespace forge;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  DecoderConfig config;
  Vocabulary vocab;
  Dataset data;
};

DecoderConfig tiny(DecoderFamily family, std::size_t feature_dim) {
  DecoderConfig c = DecoderConfig::defaults_for(family);
  c.feature_dim = feature_dim;
  c.projected_dim = 16;
  c.hidden = 16;
  c.embed_dim = 16;
  c.attention_hidden = 16;
  c.ffn_inner = 32;
  c.heads = family == DecoderFamily::fcn ? 1 : 2;
  c.layers = family == DecoderFamily::fcn ? 2 : 1;
  return c;
}

Fixture synthetic_fixture(DecoderFamily family, std::size_t n, std::uint64_t seed) {
  SyntheticConfig sc{n, 2, 5, 0.05, seed};
  Fixture f;
  std::vector<std::vector<std::string>> sentences;
  auto examples = generate_synthetic_task(sc);
  for (const auto& ex : examples) sentences.push_back(tokenize(ex.caption));
  f.vocab = Vocabulary::build(sentences, 1);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    f.data.grids.push_back(examples[i].grid);
    f.data.examples.push_back(
        {examples[i].grid.image_id, i, {f.vocab.encode_caption(sentences[i])}});
  }
  f.config = tiny(family, sc.objects + sc.slots);
  return f;
}

const DecoderFamily kFamilies[] = {DecoderFamily::arnn, DecoderFamily::transformer,
                                   DecoderFamily::fcn};

}  // namespace

TEST_CASE("gradient clipping") {
  ModelParameters p;
  Tensor& a = p.add("a", Tensor::vector({0, 0, 0, 0}), ParamKind::vector);
  auto g = a.mutable_grad();
  g[0] = 2.5;
  g[1] = -3.0;
  g[2] = 0.25;
  g[3] = -1.0;
  CHECK(clip_gradients(p, 1.0) == 1.0);
  CHECK(a.grad()[0] == 1.0);
  CHECK(a.grad()[1] == -1.0);
  CHECK(a.grad()[2] == 0.25);
  CHECK(a.grad()[3] == -1.0);

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParameters q;
    Tensor& b = q.add("b", Tensor(Shape{50}), ParamKind::vector);
    for (double& v : b.mutable_grad()) v = rng.uniform(-5, 5);
    const double clip = rng.uniform(0.1, 2.0);
    const double sup = clip_gradients(q, clip);
    CHECK(sup <= clip);
    for (double v : b.grad()) CHECK(std::abs(v) <= clip);
  }
}

TEST_CASE("adam") {
  const double lr = 0.001;
  for (double g : {0.7, -0.3, 1e-6, 2.0}) {
    ModelParameters p;
    Tensor& w = p.add("w", Tensor::vector({0.4}), ParamKind::vector);
    w.mutable_grad()[0] = g;
    Adam adam(p);
    adam.update(p, lr);
    const double want = 0.4 - lr * g / (std::abs(g) * (1.0 + 1e-8 / std::abs(g)));
    CHECK(w[0] == doctest::Approx(want).epsilon(1e-14));
    CHECK(adam.steps() == 1);
  }

  ModelParameters p;
  Tensor& w = p.add("w", Tensor::vector({0.1, -0.2}), ParamKind::vector);
  Adam adam(p);
  for (int i = 0; i < 3; ++i) {
    w.zero_grad();
    adam.update(p, 0.01);
  }
  CHECK(w[0] == 0.1);
  CHECK(w[1] == -0.2);

  // two steps by hand
  ModelParameters q;
  Tensor& x = q.add("x", Tensor::vector({1.0}), ParamKind::vector);
  Adam two(q);
  x.mutable_grad()[0] = 0.5;
  two.update(q, 0.1);
  x.mutable_grad()[0] = -0.25;
  two.update(q, 0.1);
  const double m = 0.9 * 0.1 * 0.5 + 0.1 * -0.25;
  const double v = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
  const double after_one = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
  const double want = after_one - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.998001)) + 1e-8);
  CHECK(x[0] == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("plateau schedule") {
  TrainConfig c;
  const double lr = 0.001;
  const std::vector<double> improving{100, 90, 80};
  CHECK(plateau_schedule(improving, lr, c) == lr);

  const std::vector<double> flat{50, 50, 50, 50};
  CHECK(plateau_schedule(std::span(flat).first(3), lr, c) == lr);
  CHECK(plateau_schedule(flat, lr, c) == doctest::Approx(0.9 * lr).epsilon(1e-15));

  const std::vector<double> two_runs{50, 50, 49, 49, 49, 49};
  PlateauSchedule s(lr, 0.9, 3, 1e-4);
  std::vector<double> seen;
  for (double p : two_runs) seen.push_back(s.observe(p));
  CHECK(seen == std::vector<double>{lr, lr, lr, lr, lr, 0.9 * lr});
  CHECK(s.reductions() == 1);

  // counter resets after a reduction
  PlateauSchedule r(1.0, 0.5, 2, 1e-4);
  for (double p : {10.0, 10.0, 10.0, 10.0, 10.0}) r.observe(p);
  CHECK(r.lr() == 0.25);

  // a gain below the relative threshold does not count
  PlateauSchedule t(1.0, 0.5, 2, 1e-4);
  for (double p : {10.0, 9.9995, 9.999}) t.observe(p);
  CHECK(t.lr() == 0.5);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.plateau_factor = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("validation perplexity") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    Fixture f = synthetic_fixture(family, 12, 3);
    Rng rng(4);
    ModelParameters params = init_parameters(f.config, f.vocab.size(), rng);
    auto batches = make_ordered_batches(f.data.examples, 5);
    const double ppl = validate(f.config, params, f.data.grids, batches);
    CHECK(ppl >= 1.0);

    // one batch over the whole set
    auto whole = make_ordered_batches(f.data.examples, 100);
    REQUIRE(whole.size() == 1);
    Tensor loss = batch_loss(f.config, effective_weights(params), f.data.grids, whole[0], false, rng);
    CHECK(std::abs(ppl - std::exp(loss.item())) <= 1e-9);

    for (const char* name : {"output.W", "output.b"})
      for (double& v : const_cast<Tensor&>(params.get(name)).mutable_data()) v = 0;
    CHECK(validate(f.config, params, f.data.grids, batches) ==
          doctest::Approx(double(f.vocab.size())).epsilon(1e-12));
    CHECK_THROWS_AS(validate(f.config, params, f.data.grids, {}), DataError);
  }
}

TEST_CASE("teacher-forced likelihood equals the stepwise product") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    Fixture f = synthetic_fixture(family, 4, 5);
    Rng rng(6);
    ModelParameters params = init_parameters(f.config, f.vocab.size(), rng);
    for (auto& e : params.entries())
      for (double& v : e.value.mutable_data()) v += rng.uniform(-0.3, 0.3);
    Weights w = effective_weights(params);
    auto dec = Decoder::create(f.config, w);
    for (const auto& ex : f.data.examples) {
      const FeatureGrid* g = &f.data.grids[ex.image];
      EncoderMemory memory = encode_batch(std::span(&g, 1), lookup(w, "encoder.W_f"),
                                          lookup(w, "encoder.W_g"));
      const auto& tokens = ex.references[0];
      double stepwise = 0;
      DecoderState s = dec->start(memory);
      for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        StepOutput o = dec->step(memory, s, tokens[t]);
        Tensor lp = log_softmax(reshape(o.logits, {1, o.logits.size()}));
        stepwise += lp.data()[static_cast<std::size_t>(tokens[t + 1])];
        s = o.state;
      }
      CHECK(std::abs(stepwise - score_sequence(*dec, memory, tokens)) <= 1e-9);
    }
  }
}

TEST_CASE("train_step") {
  Fixture f = synthetic_fixture(DecoderFamily::arnn, 6, 7);
  Rng rng(8);
  ModelParameters params = init_parameters(f.config, f.vocab.size(), rng);
  auto batches = make_ordered_batches(f.data.examples, 3);
  Adam adam(params);
  ModelParameters before = params.clone();
  StepResult r = train_step(f.config, params, adam, f.data.grids, batches[0], 0.01, 1.0, rng);
  CHECK(r.tokens == 3 * 6);  // "a X and a Y" + </s>
  CHECK(r.loss > 0);
  bool moved = false;
  for (std::size_t i = 0; i < params.entries().size(); ++i)
    for (std::size_t j = 0; j < params.entries()[i].value.size(); ++j)
      moved |= params.entries()[i].value.data()[j] != before.entries()[i].value.data()[j];
  CHECK(moved);

  const_cast<Tensor&>(params.get("output.b")).mutable_data()[2] = std::nan("");
  try {
    train_step(f.config, params, adam, f.data.grids, batches[0], 0.01, 1.0, rng);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("output.b") != std::string::npos);
  }
}

TEST_CASE("training loop: log, checkpoints, reproducibility") {
  Fixture f = synthetic_fixture(DecoderFamily::transformer, 20, 9);
  f.config.dropout = 0.1;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.lr = 0.003;
  tc.checkpoint_interval = 4;
  tc.max_epochs = 3;
  tc.seed = 10;
  fs::path dir = fs::temp_directory_path() / "forge_test_training";
  fs::remove_all(dir);

  auto run = [&](const fs::path& out, std::ostream* log) {
    Rng init(11);
    ModelParameters params = init_parameters(f.config, f.vocab.size(), init);
    TrainHooks hooks;
    hooks.log = log;
    hooks.checkpoint_dir = out;
    return train(f.config, params, f.vocab, f.data, &f.data, tc, hooks);
  };
  std::ostringstream log_a, log_b;
  TrainResult a = run(dir / "a", &log_a);
  TrainResult b = run(dir / "b", &log_b);
  CHECK(a.steps == 9);  // 3 batches per epoch
  CHECK(log_a.str() == log_b.str());
  REQUIRE(a.log.size() == 9);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].step == i + 1);
    CHECK(a.log[i].val_ppl.has_value() == (i + 1 == 4 || i + 1 == 8 || i + 1 == 9));
  }
  std::istringstream lines(log_a.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("step"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("lr"));
    ++n;
  }
  CHECK(n == 9);
  REQUIRE(a.checkpoints.size() == 3);
  CHECK(a.checkpoints[0].filename() == checkpoint_name(4));
  CHECK(read_file_bytes(a.checkpoints[2]) == read_file_bytes(b.checkpoints[2]));
  Checkpoint ck = load_checkpoint(a.checkpoints[2]);
  CHECK(ck.config == f.config);
  CHECK(ck.vocabulary == f.vocab.tokens());

  // early stop through the hook
  Rng init(11);
  ModelParameters params = init_parameters(f.config, f.vocab.size(), init);
  TrainHooks stop;
  stop.on_checkpoint = [](std::size_t, const ModelParameters&) { return false; };
  TrainResult s = train(f.config, params, f.vocab, f.data, nullptr, tc, stop);
  CHECK(s.steps == 4);
  CHECK(s.stopped_early);
}

TEST_CASE("every family halves its loss on a small synthetic set") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    Fixture f = synthetic_fixture(family, 50, 12);
    Rng init(13);
    ModelParameters params = init_parameters(f.config, f.vocab.size(), init);
    TrainConfig tc;
    tc.batch_size = 10;
    tc.lr = 0.003;
    tc.max_epochs = 1000;
    tc.max_steps = 200;
    tc.checkpoint_interval = 1000;
    TrainResult r = train(f.config, params, f.vocab, f.data, nullptr, tc);
    double best = r.log.front().loss;
    for (const auto& rec : r.log) best = std::min(best, rec.loss);
    CHECK(r.steps == 200);
    CHECK(best < 0.5 * r.log.front().loss);
  }
}
