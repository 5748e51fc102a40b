#include <bit>
#include <cmath>

#include "doctest.h"
#include "forge/decoder.hpp"
#include "forge/error.hpp"
#include "forge/ops.hpp"
#include "forge/tokens.hpp"
#include "test_support.hpp"

using namespace forge;
using forge::testing::gradient_check;
using forge::testing::random_tensor;

namespace {

constexpr std::size_t kVocab = 9;

DecoderConfig small_config(DecoderFamily family) {
  DecoderConfig c = DecoderConfig::defaults_for(family);
  c.feature_dim = 4;
  c.projected_dim = 5;
  c.hidden = 6;
  c.dropout = 0.0;
  switch (family) {
    case DecoderFamily::arnn:
      c.embed_dim = 5;
      c.attention_hidden = 4;
      break;
    case DecoderFamily::transformer:
      c.embed_dim = 6;
      c.heads = 2;
      c.ffn_inner = 8;
      break;
    case DecoderFamily::fcn:
      c.embed_dim = 6;
      c.layers = 2;
      break;
  }
  return c;
}

std::vector<FeatureGrid> random_grids(Rng& rng, std::vector<std::size_t> locations,
                                      std::size_t d) {
  std::vector<FeatureGrid> grids;
  for (std::size_t i = 0; i < locations.size(); ++i)
    grids.push_back({"img" + std::to_string(i), random_tensor({locations[i], d}, rng)});
  return grids;
}

EncoderMemory memory_for(const std::vector<FeatureGrid>& grids, const Weights& w) {
  std::vector<const FeatureGrid*> ptrs;
  for (const auto& g : grids) ptrs.push_back(&g);
  return encode_batch(ptrs, lookup(w, "encoder.W_f"), lookup(w, "encoder.W_g"));
}

// Randomises every parameter so the tests don't ride on the zero biases / unit gains.
void perturb(ModelParameters& params, Rng& rng, double spread = 0.5) {
  for (auto& e : params.entries())
    for (double& v : e.value.mutable_data()) v += rng.uniform(-spread, spread);
}

std::vector<double> step_logits(const Decoder& dec, const EncoderMemory& memory,
                                std::span<const TokenId> prefix) {
  std::vector<double> out;
  DecoderState s = dec.start(memory);
  for (TokenId y : prefix) {
    StepOutput o = dec.step(memory, s, y);
    out.insert(out.end(), o.logits.data().begin(), o.logits.data().end());
    s = o.state;
  }
  return out;
}

const DecoderFamily kFamilies[] = {DecoderFamily::arnn, DecoderFamily::transformer,
                                   DecoderFamily::fcn};

}  // namespace

TEST_CASE("zero network yields the output bias") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig c = small_config(family);
    Rng rng(1);
    ModelParameters params = init_parameters(c, kVocab, rng);
    for (auto& e : params.entries())
      for (double& v : e.value.mutable_data()) v = 0.0;
    Tensor& bias = const_cast<Tensor&>(params.get("output.b"));
    for (std::size_t i = 0; i < kVocab; ++i) bias.mutable_data()[i] = 0.1 * static_cast<double>(i);
    Weights w = effective_weights(params);
    auto grids = random_grids(rng, {3}, c.feature_dim);
    EncoderMemory memory = memory_for(grids, w);
    auto dec = Decoder::create(c, w);
    DecoderState s = dec->start(memory);
    // fixed sinusoids still feed the transformer/fcn, so only the arnn h-bar is exactly zero
    for (TokenId y : {kBos, TokenId{5}, TokenId{7}}) {
      StepOutput o = dec->step(memory, s, y);
      if (family == DecoderFamily::arnn)
        for (double v : o.state.feed.data()) CHECK(v == 0.0);
      for (std::size_t i = 0; i < kVocab; ++i) CHECK(o.logits[i] == bias[i]);
      s = o.state;
    }
  }
}

TEST_CASE("zero output layer gives a uniform distribution") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig c = small_config(family);
    Rng rng(2);
    ModelParameters params = init_parameters(c, kVocab, rng);
    perturb(params, rng);
    for (const char* name : {"output.W", "output.b"})
      for (double& v : const_cast<Tensor&>(params.get(name)).mutable_data()) v = 0.0;
    Weights w = effective_weights(params);
    auto grids = random_grids(rng, {3, 2}, c.feature_dim);
    EncoderMemory memory = memory_for(grids, w);
    auto dec = Decoder::create(c, w);
    const std::vector<TokenId> inputs{kBos, 4, 5, kBos, 6, 7};
    const std::vector<TokenId> targets{4, 5, kEos, 6, 7, kEos};
    Tensor logits = dec->forward(memory, inputs, 3, false, rng);
    CHECK(cross_entropy(logits, targets, kPad).item() ==
          doctest::Approx(std::log(double(kVocab))).epsilon(1e-14));
  }
}

TEST_CASE("arnn stepwise equals recomputation bitwise") {
  for (AttentionKind kind : {AttentionKind::none, AttentionKind::dot, AttentionKind::mlp,
                             AttentionKind::multihead}) {
    for (bool global : {false, true}) {
      CAPTURE(to_string(kind));
      DecoderConfig c = small_config(DecoderFamily::arnn);
      c.attention = kind;
      c.concat_global = global;
      c.layers = 2;
      if (kind == AttentionKind::multihead) c.heads = 5;
      Rng rng(3);
      ModelParameters params = init_parameters(c, kVocab, rng);
      perturb(params, rng);
      Weights w = effective_weights(params);
      auto grids = random_grids(rng, {4}, c.feature_dim);
      EncoderMemory memory = memory_for(grids, w);
      auto dec = Decoder::create(c, w);
      const std::vector<TokenId> prefix{kBos, 6};
      std::vector<double> stepped = step_logits(*dec, memory, prefix);
      std::vector<double> again = step_logits(*dec, memory, prefix);
      Tensor batch = dec->forward(memory, prefix, prefix.size(), false, rng);
      REQUIRE(stepped.size() == batch.size());
      for (std::size_t i = 0; i < stepped.size(); ++i) {
        CHECK(std::bit_cast<std::uint64_t>(stepped[i]) == std::bit_cast<std::uint64_t>(again[i]));
        CHECK(std::bit_cast<std::uint64_t>(stepped[i]) ==
              std::bit_cast<std::uint64_t>(batch.data()[i]));
      }
      StepOutput via_free = arnn_step(c, w, memory, dec->start(memory), kBos);
      for (std::size_t i = 0; i < kVocab; ++i) CHECK(via_free.logits[i] == stepped[i]);
    }
  }
}

TEST_CASE("transformer and fcn: full sequence equals stepwise decoding") {
  for (DecoderFamily family : {DecoderFamily::transformer, DecoderFamily::fcn}) {
    for (PositionalKind pos : {PositionalKind::fixed, PositionalKind::learned}) {
      CAPTURE(to_string(family));
      DecoderConfig c = small_config(family);
      c.positional = pos;
      c.max_positions = 10;
      c.layers = 2;
      Rng rng(4);
      ModelParameters params = init_parameters(c, kVocab, rng);
      perturb(params, rng);
      Weights w = effective_weights(params);
      auto grids = random_grids(rng, {3}, c.feature_dim);
      EncoderMemory memory = memory_for(grids, w);
      auto dec = Decoder::create(c, w);
      const std::vector<TokenId> prefix{kBos, 4, 8, 5, 5, 7};
      std::vector<double> stepped = step_logits(*dec, memory, prefix);
      Tensor full = family == DecoderFamily::transformer
                        ? transformer_forward(c, w, prefix, memory, false, rng)
                        : fcn_forward(c, w, prefix, memory, false, rng);
      REQUIRE(full.shape() == Shape{prefix.size(), kVocab});
      double worst = 0;
      for (std::size_t i = 0; i < stepped.size(); ++i)
        worst = std::max(worst, std::abs(stepped[i] - full.data()[i]));
      CHECK(worst <= 1e-9);
    }
  }
}

TEST_CASE("causality: future tokens never change earlier logits") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig c = small_config(family);
    Rng rng(5);
    ModelParameters params = init_parameters(c, kVocab, rng);
    perturb(params, rng);
    Weights w = effective_weights(params);
    auto grids = random_grids(rng, {3}, c.feature_dim);
    EncoderMemory memory = memory_for(grids, w);
    auto dec = Decoder::create(c, w);
    std::vector<TokenId> prefix{kBos, 4, 5, 6, 7, 8};
    Tensor base = dec->forward(memory, prefix, prefix.size(), false, rng);
    for (std::size_t t = 1; t < prefix.size(); ++t) {
      for (int trial = 0; trial < 5; ++trial) {
        std::vector<TokenId> changed = prefix;
        for (std::size_t u = t + 1; u < changed.size(); ++u)
          changed[u] = static_cast<TokenId>(rng.below(kVocab));
        Tensor other = dec->forward(memory, changed, changed.size(), false, rng);
        for (std::size_t i = 0; i < (t + 1) * kVocab; ++i)
          CHECK(other.data()[i] == base.data()[i]);
      }
    }
  }
}

TEST_CASE("transformer: a one-token prefix attends to itself with weight one") {
  DecoderConfig c = small_config(DecoderFamily::transformer);
  Rng rng(6);
  ModelParameters params = init_parameters(c, kVocab, rng);
  Weights w = effective_weights(params);
  MultiHeadParams self{lookup(w, "tf.0.self.W_Q"), lookup(w, "tf.0.self.W_K"),
                       lookup(w, "tf.0.self.W_L"), lookup(w, "tf.0.self.W_O"), c.heads};
  Tensor x = random_tensor({1, 1, c.hidden}, rng);
  AttentionMask causal;
  causal.causal = true;
  MultiHeadOutput out = multihead_attention(x, x, x, self, causal);
  for (double v : out.weights.data()) CHECK(v == 1.0);
}

TEST_CASE("fcn: width-one kernel keeps positions independent before attention") {
  DecoderConfig c = small_config(DecoderFamily::fcn);
  c.kernel_width = 1;
  c.layers = 1;
  Rng rng(7);
  ModelParameters params = init_parameters(c, kVocab, rng);
  perturb(params, rng);
  Weights w = effective_weights(params);
  // with a single image the attention context of a position depends only on its query, so
  // logits at t change only when token t changes
  auto grids = random_grids(rng, {3}, c.feature_dim);
  EncoderMemory memory = memory_for(grids, w);
  auto dec = Decoder::create(c, w);
  std::vector<TokenId> a{kBos, 4, 5, 6}, b{kBos, 8, 5, 7};
  Tensor la = dec->forward(memory, a, a.size(), false, rng);
  Tensor lb = dec->forward(memory, b, b.size(), false, rng);
  for (std::size_t t = 0; t < a.size(); ++t) {
    bool same = true;
    for (std::size_t v = 0; v < kVocab; ++v) same &= la.at(t, v) == lb.at(t, v);
    CHECK(same == (a[t] == b[t]));
  }
}

TEST_CASE("advancing a state leaves the origin untouched") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig c = small_config(family);
    Rng rng(8);
    ModelParameters params = init_parameters(c, kVocab, rng);
    perturb(params, rng);
    Weights w = effective_weights(params);
    auto grids = random_grids(rng, {2}, c.feature_dim);
    EncoderMemory memory = memory_for(grids, w);
    auto dec = Decoder::create(c, w);
    DecoderState origin = dec->step(memory, dec->start(memory), kBos).state;
    StepOutput first = dec->step(memory, origin, 4);
    dec->step(memory, origin, 7);
    dec->step(memory, first.state, 5);
    StepOutput second = dec->step(memory, origin, 4);
    for (std::size_t i = 0; i < kVocab; ++i) CHECK(first.logits[i] == second.logits[i]);
    CHECK(origin.position == 1);
  }
}

TEST_CASE("decoder errors") {
  DecoderConfig c = small_config(DecoderFamily::arnn);
  Rng rng(9);
  Weights w = effective_weights(init_parameters(c, kVocab, rng));
  auto grids = random_grids(rng, {2}, c.feature_dim);
  EncoderMemory memory = memory_for(grids, w);
  auto dec = Decoder::create(c, w);
  CHECK_THROWS_AS(dec->step(memory, dec->start(memory), static_cast<TokenId>(kVocab)),
                  VocabularyError);
  CHECK_THROWS_AS(dec->step(memory, dec->start(memory), -1), VocabularyError);

  DecoderConfig t = small_config(DecoderFamily::transformer);
  t.positional = PositionalKind::learned;
  t.max_positions = 3;
  Weights tw = effective_weights(init_parameters(t, kVocab, rng));
  EncoderMemory tm = memory_for(grids, tw);
  std::vector<TokenId> ok{kBos, 4, 5}, too_long{kBos, 4, 5, 6};
  CHECK_NOTHROW(transformer_forward(t, tw, ok, tm, false, rng));
  CHECK_THROWS_AS(transformer_forward(t, tw, too_long, tm, false, rng), LengthError);
  auto tdec = Decoder::create(t, tw);
  DecoderState s = tdec->start(tm);
  for (TokenId y : ok) s = tdec->step(tm, s, y).state;
  CHECK_THROWS_AS(tdec->step(tm, s, 6), LengthError);

  t.family = DecoderFamily::fcn;
  t.heads = 1;
  t.layers = 1;
  Weights fw = effective_weights(init_parameters(t, kVocab, rng));
  EncoderMemory fm = memory_for(grids, fw);
  CHECK_THROWS_AS(fcn_forward(t, fw, too_long, fm, false, rng), LengthError);
}

TEST_CASE("init_parameters: deterministic, bounded, centred") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig c = small_config(family);
    c.hidden = c.embed_dim = 32;
    c.heads = family == DecoderFamily::fcn ? 1 : 4;
    c.positional = PositionalKind::learned;
    Rng a(10), b(10);
    ModelParameters pa = init_parameters(c, 50, a);
    ModelParameters pb = init_parameters(c, 50, b);
    REQUIRE(pa.entries().size() == pb.entries().size());
    double z_sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pa.entries().size(); ++i) {
      const auto& ea = pa.entries()[i];
      const auto& eb = pb.entries()[i];
      CHECK(ea.name == eb.name);
      for (std::size_t j = 0; j < ea.value.size(); ++j)
        CHECK(std::bit_cast<std::uint64_t>(ea.value.data()[j]) ==
              std::bit_cast<std::uint64_t>(eb.value.data()[j]));
      double bound = 0;
      const Shape& s = ea.value.shape();
      switch (ea.kind) {
        case ParamKind::bias:
          for (double v : ea.value.data()) CHECK(v == 0.0);
          continue;
        case ParamKind::gain:
          for (double v : ea.value.data()) CHECK(v == 1.0);
          continue;
        case ParamKind::vector: bound = std::sqrt(6.0 / double(s[0] + 1)); break;
        case ParamKind::kernel: bound = std::sqrt(6.0 / double(s[0] * (s[1] + s[2]))); break;
        default: bound = std::sqrt(6.0 / double(s[0] + s[1])); break;
      }
      for (double v : ea.value.data()) {
        CHECK(std::abs(v) <= bound);
        z_sum += v / bound;
        ++n;
      }
    }
    // entries / bound ~ U(-1, 1): variance 1/3
    const double se = std::sqrt(1.0 / 3.0 / double(n));
    CHECK(std::abs(z_sum / double(n)) <= 3 * se);
  }
}

TEST_CASE("parameter counts match hand counts") {
  // V = 9, d = 4, d' = 5
  DecoderConfig arnn = small_config(DecoderFamily::arnn);
  // encoder 2*5*4 + embed 9*5 + lstm (24*11 + 24*6 + 24) + mlp (4*5 + 4*6 + 4) + W_c 6*11 + out 9*6+9
  CHECK(parameter_count(arnn, kVocab) == 40 + 45 + 432 + 48 + 66 + 63);
  arnn.attention = AttentionKind::dot;  // W_q is 5x6 because H != d'
  CHECK(parameter_count(arnn, kVocab) == 40 + 45 + 432 + 30 + 66 + 63);
  arnn.hidden = 5;  // H == d': no query projection
  // lstm 20*10 + 20*5 + 20, W_c 5*10, out 9*5+9
  CHECK(parameter_count(arnn, kVocab) == 40 + 45 + 320 + 50 + 54);

  DecoderConfig tf = small_config(DecoderFamily::transformer);
  // encoder 40, embed 54, self 4*36, enc 36+30+30+36, ffn 48+8+48+6, three norms 12 each, out 63
  CHECK(parameter_count(tf, kVocab) == 40 + 54 + 144 + 132 + 110 + 36 + 63);
  tf.positional = PositionalKind::learned;
  tf.max_positions = 10;
  CHECK(parameter_count(tf, kVocab) == 579 + 60);

  DecoderConfig fcn = small_config(DecoderFamily::fcn);
  // per layer: kernel 3*6*12 + bias 12 + attention 132
  CHECK(parameter_count(fcn, kVocab) == 40 + 54 + 2 * 360 + 63);

  for (DecoderFamily family : kFamilies) {
    Rng rng(11);
    DecoderConfig c = small_config(family);
    CHECK(init_parameters(c, kVocab, rng).scalar_count() == parameter_count(c, kVocab));
  }
}

TEST_CASE("end-to-end gradients match finite differences") {
  for (DecoderFamily family : kFamilies) {
    for (bool wn : {false, true}) {
      CAPTURE(to_string(family));
      CAPTURE(wn);
      DecoderConfig c = small_config(family);
      c.weight_norm = wn;
      if (family == DecoderFamily::arnn) c.concat_global = true;
      Rng rng(12);
      ModelParameters params = init_parameters(c, kVocab, rng);
      perturb(params, rng, 0.2);
      auto grids = random_grids(rng, {3, 2}, c.feature_dim);
      const std::vector<TokenId> inputs{kBos, 4, 5, kBos, 6, kPad};
      const std::vector<TokenId> targets{4, 5, kEos, 6, kEos, kPad};
      std::vector<Tensor> tensors;
      for (auto& e : params.entries()) tensors.push_back(e.value);
      auto loss = [&] {
        Weights w = effective_weights(params);
        EncoderMemory memory = memory_for(grids, w);
        Rng unused(0);
        return cross_entropy(Decoder::create(c, w)->forward(memory, inputs, 3, false, unused),
                             targets, kPad);
      };
      auto r = gradient_check(loss, tensors);
      CAPTURE(r.worst_where);
      CHECK(r.checked > 0);
      CHECK(r.worst_relative <= 1e-4);
      CHECK(r.worst_small_absolute <= 1e-7);
    }
  }
}

TEST_CASE("weight norm: same start, invariant to direction scale") {
  for (DecoderFamily family : kFamilies) {
    CAPTURE(to_string(family));
    DecoderConfig plain = small_config(family);
    DecoderConfig normed = plain;
    normed.weight_norm = true;
    Rng r1(13), r2(13);
    ModelParameters p = init_parameters(plain, kVocab, r1);
    ModelParameters q = init_parameters(normed, kVocab, r2);
    CHECK(q.contains("output.W.direction"));
    CHECK(q.contains("output.W.gain"));
    CHECK_FALSE(q.contains("output.W"));
    Rng rng(14);
    auto grids = random_grids(rng, {3}, plain.feature_dim);
    const std::vector<TokenId> prefix{kBos, 4, 5};
    auto logits = [&](const DecoderConfig& c, const ModelParameters& params) {
      Weights w = effective_weights(params);
      EncoderMemory memory = memory_for(grids, w);
      return Decoder::create(c, w)->forward(memory, prefix, prefix.size(), false, rng);
    };
    Tensor a = logits(plain, p);
    Tensor b = logits(normed, q);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-12);

    for (auto& e : q.entries())
      if (e.kind == ParamKind::wn_direction)
        for (double& v : e.value.mutable_data()) v *= 10.0;
    Tensor c = logits(normed, q);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(b.data()[i] - c.data()[i]) <= 1e-12);
  }
}

TEST_CASE("checkpoint round trip is bitwise stable") {
  for (DecoderFamily family : kFamilies) {
    for (bool wn : {false, true}) {
      DecoderConfig c = small_config(family);
      c.weight_norm = wn;
      c.positional = PositionalKind::learned;
      Rng rng(15);
      Checkpoint ck{c, {"a", "dog", "on", "grass", "x"}, init_parameters(c, kVocab, rng)};
      auto bytes = encode_checkpoint(ck);
      Checkpoint back = decode_checkpoint(bytes);
      CHECK(back.config == c);
      CHECK(back.vocabulary == ck.vocabulary);
      REQUIRE(back.parameters.entries().size() == ck.parameters.entries().size());
      for (std::size_t i = 0; i < back.parameters.entries().size(); ++i) {
        const auto& x = ck.parameters.entries()[i];
        const auto& y = back.parameters.entries()[i];
        CHECK(x.name == y.name);
        CHECK(x.kind == y.kind);
        CHECK(x.value.shape() == y.value.shape());
        for (std::size_t j = 0; j < x.value.size(); ++j)
          CHECK(static_cast<double>(static_cast<float>(x.value.data()[j])) == y.value.data()[j]);
      }
      CHECK(encode_checkpoint(back) == bytes);
    }
  }
}
