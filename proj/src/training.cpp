#include "forge/training.hpp"

#include <cmath>
#include <cstdio>

#include "forge/error.hpp"
#include "forge/ops.hpp"
#include "forge/tokens.hpp"
#include "json.hpp"

namespace forge {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(clip_abs > 0)) throw ConfigError("clip_abs must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1))
    throw ConfigError("plateau_factor must lie strictly between 0 and 1");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be positive");
  if (plateau_threshold < 0) throw ConfigError("plateau_threshold must be non-negative");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
}

// ---- optimiser ---------------------------------------------------------

Adam::Adam(const ModelParameters& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.value.size(), 0.0);
    v_.emplace_back(e.value.size(), 0.0);
  }
}

void Adam::update(ModelParameters& params, double lr) {
  auto& entries = params.entries();
  if (entries.size() != m_.size()) throw DimensionError("optimiser state does not match parameters");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].value;
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    auto g = has ? p.grad() : std::span<const double>();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * gj;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj;
      const double mhat = m_[i][j] / c1, vhat = v_[i][j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double clip_gradients(ModelParameters& params, double clip) {
  double sup = 0;
  for (auto& e : params.entries()) {
    if (!e.value.has_grad()) continue;
    for (double& g : e.value.mutable_grad()) {
      g = std::clamp(g, -clip, clip);
      sup = std::max(sup, std::abs(g));
    }
  }
  return sup;
}

// ---- loss --------------------------------------------------------------

Tensor batch_loss(const DecoderConfig& config, const Weights& weights,
                  std::span<const FeatureGrid> grids, const Batch& batch, bool training,
                  Rng& rng) {
  std::vector<const FeatureGrid*> rows;
  rows.reserve(batch.rows());
  for (std::size_t i : batch.images) {
    if (i >= grids.size()) throw DataError("batch refers to image " + std::to_string(i));
    rows.push_back(&grids[i]);
  }
  EncoderMemory memory =
      encode_batch(rows, lookup(weights, "encoder.W_f"), lookup(weights, "encoder.W_g"));
  auto decoder = Decoder::create(config, weights);
  Tensor logits = decoder->forward(memory, batch.inputs, batch.steps, training, rng);
  return cross_entropy(logits, batch.targets, kPad);
}

namespace {

std::size_t count_tokens(const Batch& batch) {
  std::size_t n = 0;
  for (TokenId t : batch.targets) n += t != kPad;
  return n;
}

void require_finite(const ModelParameters& params, bool gradients, const std::string& when) {
  for (const auto& e : params.entries()) {
    if (gradients && !e.value.has_grad()) continue;
    auto values = gradients ? e.value.grad() : e.value.data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (!std::isfinite(values[j])) {
        throw NumericError(when + ": non-finite " + (gradients ? "gradient" : "value") +
                           " in parameter '" + e.name + "' at entry " + std::to_string(j));
      }
    }
  }
}

}  // namespace

StepResult train_step(const DecoderConfig& config, ModelParameters& params, Adam& adam,
                      std::span<const FeatureGrid> grids, const Batch& batch, double lr,
                      double clip_abs, Rng& rng) {
  StepResult result;
  result.tokens = count_tokens(batch);
  require_finite(params, false, "before step");
  params.zero_grad();
  try {
    Tape tape;
    Weights weights = effective_weights(params);
    Tensor loss = batch_loss(config, weights, grids, batch, true, rng);
    result.loss = loss.item();
    tape.backward(loss);
  } catch (const NumericError& e) {
    throw NumericError(std::string("forward/backward: ") + e.what());
  }
  require_finite(params, true, "after backward");
  clip_gradients(params, clip_abs);
  adam.update(params, lr);
  require_finite(params, false, "after update");
  return result;
}

double EvalTotals::perplexity() const { return std::exp(nll / static_cast<double>(tokens)); }
double EvalTotals::accuracy() const {
  return static_cast<double>(correct) / static_cast<double>(tokens);
}

EvalTotals evaluate_batches(const DecoderConfig& config, const ModelParameters& params,
                            std::span<const FeatureGrid> grids, std::span<const Batch> batches) {
  NoGradGuard no_grad;
  Weights weights = effective_weights(params);
  Rng unused(0);
  EvalTotals totals;
  for (const Batch& batch : batches) {
    std::vector<const FeatureGrid*> rows;
    for (std::size_t i : batch.images) rows.push_back(&grids[i]);
    EncoderMemory memory =
        encode_batch(rows, lookup(weights, "encoder.W_f"), lookup(weights, "encoder.W_g"));
    Tensor logits = Decoder::create(config, weights)->forward(memory, batch.inputs, batch.steps,
                                                              false, unused);
    Tensor logp = log_softmax(logits);
    const std::size_t v = logits.dim(1);
    for (std::size_t r = 0; r < batch.targets.size(); ++r) {
      const TokenId t = batch.targets[r];
      if (t == kPad) continue;
      auto row = logp.data().subspan(r * v, v);
      totals.nll -= row[static_cast<std::size_t>(t)];
      ++totals.tokens;
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      totals.correct += best == static_cast<std::size_t>(t);
    }
  }
  if (totals.tokens == 0) throw DataError("validation set holds no target tokens");
  return totals;
}

double validate(const DecoderConfig& config, const ModelParameters& params,
                std::span<const FeatureGrid> grids, std::span<const Batch> batches) {
  return evaluate_batches(config, params, grids, batches).perplexity();
}

// ---- schedule ----------------------------------------------------------

PlateauSchedule::PlateauSchedule(double lr, double factor, std::size_t patience, double threshold)
    : lr_(lr), factor_(factor), threshold_(threshold), patience_(patience) {}

double PlateauSchedule::observe(double perplexity) {
  if (!best_ || perplexity < *best_ * (1.0 - threshold_)) {
    best_ = perplexity;
    stale_ = 0;
    return lr_;
  }
  if (++stale_ >= patience_) {
    lr_ *= factor_;
    stale_ = 0;
    ++reductions_;
  }
  return lr_;
}

double plateau_schedule(std::span<const double> history, double lr, const TrainConfig& config) {
  PlateauSchedule s(lr, config.plateau_factor, config.plateau_patience, config.plateau_threshold);
  for (double p : history) s.observe(p);
  return s.lr();
}

// ---- loop --------------------------------------------------------------

std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%07zu.ckpt", step);
  return buf;
}

TrainResult train(const DecoderConfig& config, ModelParameters& params, const Vocabulary& vocab,
                  const Dataset& train_data, const Dataset* validation_data,
                  const TrainConfig& train_config, const TrainHooks& hooks) {
  config.validate();
  train_config.validate();
  if (train_data.examples.empty()) throw DataError("training set is empty");
  if (!hooks.checkpoint_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(hooks.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create " + hooks.checkpoint_dir.string() + ": " + ec.message());
  }

  std::vector<Batch> validation;
  if (validation_data)
    validation = make_ordered_batches(validation_data->examples, train_config.batch_size);

  Adam adam(params);
  PlateauSchedule schedule(train_config.lr, train_config.plateau_factor,
                           train_config.plateau_patience, train_config.plateau_threshold);
  Rng order(train_config.seed);
  Rng dropout_rng(train_config.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;

  auto write_log = [&](const TrainLogRecord& r) {
    result.log.push_back(r);
    if (!hooks.log) return;
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    if (r.val_ppl) j["val_ppl"] = *r.val_ppl;
    *hooks.log << j.dump() << '\n';
    hooks.log->flush();
  };

  // returns false to stop
  auto checkpoint = [&](TrainLogRecord& record) {
    if (!validation.empty()) {
      record.val_ppl = validate(config, params, validation_data->grids, validation);
      schedule.observe(*record.val_ppl);
    }
    if (!hooks.checkpoint_dir.empty()) {
      auto path = hooks.checkpoint_dir / checkpoint_name(record.step);
      save_checkpoint(path, Checkpoint{config, vocab.tokens(), params.clone()});
      result.checkpoints.push_back(path);
    }
    write_log(record);
    return !hooks.on_checkpoint || hooks.on_checkpoint(record.step, params);
  };

  std::size_t step = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < train_config.max_epochs && !done; ++epoch) {
    auto batches = make_batches(train_data.examples, train_config.batch_size, order.next_u64());
    for (std::size_t b = 0; b < batches.size() && !done; ++b) {
      const double lr = schedule.lr();
      StepResult r;
      try {
        r = train_step(config, params, adam, train_data.grids, batches[b], lr,
                       train_config.clip_abs, dropout_rng);
      } catch (const NumericError& e) {
        throw NumericError("training aborted at step " + std::to_string(step + 1) + ": " +
                           e.what());
      }
      ++step;
      const bool last = (train_config.max_steps && step >= train_config.max_steps) ||
                        (epoch + 1 == train_config.max_epochs && b + 1 == batches.size());
      TrainLogRecord record{step, r.loss, lr, std::nullopt};
      if (step % train_config.checkpoint_interval == 0 || last) {
        if (!checkpoint(record)) result.stopped_early = !last;
        done = last || result.stopped_early;
      } else {
        write_log(record);
      }
    }
  }
  result.steps = step;
  result.lr = schedule.lr();
  return result;
}

}  // namespace forge
