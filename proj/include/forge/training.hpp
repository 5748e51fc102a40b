#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "forge/data.hpp"
#include "forge/decoder.hpp"
#include "forge/params.hpp"

namespace forge {

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 0.0003;
  double clip_abs = 1.0;
  double plateau_factor = 0.9;
  std::size_t plateau_patience = 3;    // checkpoints
  double plateau_threshold = 1e-4;     // relative improvement that counts
  std::size_t checkpoint_interval = 500;
  std::size_t max_epochs = 10;
  std::size_t max_steps = 0;           // 0: stop after max_epochs only
  std::uint64_t seed = 1;

  void validate() const;
};

// Adam with bias correction.
class Adam {
 public:
  explicit Adam(const ModelParameters& params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  // Parameters without a gradient are treated as having a zero gradient.
  void update(ModelParameters& params, double lr);
  std::size_t steps() const { return steps_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Clamps every gradient entry to [-clip, clip]; returns the largest |entry| afterwards.
double clip_gradients(ModelParameters& params, double clip);

// Mean cross-entropy of the batch over non-pad targets, recorded on the active tape.
Tensor batch_loss(const DecoderConfig& config, const Weights& weights,
                  std::span<const FeatureGrid> grids, const Batch& batch, bool training, Rng& rng);

struct StepResult {
  double loss = 0;
  std::size_t tokens = 0;
};

// Teacher-forced forward, backward, per-entry clip, Adam update.
// NumericError names the offending op or parameter.
StepResult train_step(const DecoderConfig& config, ModelParameters& params, Adam& adam,
                      std::span<const FeatureGrid> grids, const Batch& batch, double lr,
                      double clip_abs, Rng& rng);

struct EvalTotals {
  double nll = 0;             // summed over tokens
  std::size_t tokens = 0;
  std::size_t correct = 0;    // teacher-forced argmax hits
  double perplexity() const;
  double accuracy() const;
};

// Dropout off. DataError when the batches hold no target tokens.
EvalTotals evaluate_batches(const DecoderConfig& config, const ModelParameters& params,
                            std::span<const FeatureGrid> grids, std::span<const Batch> batches);
double validate(const DecoderConfig& config, const ModelParameters& params,
                std::span<const FeatureGrid> grids, std::span<const Batch> batches);

// Multiplies the rate by `factor` once `patience` consecutive checkpoints pass
// without improving the best perplexity by more than `threshold` (relative).
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, std::size_t patience, double threshold);
  double observe(double perplexity);
  double lr() const { return lr_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double lr_, factor_, threshold_;
  std::size_t patience_, stale_ = 0, reductions_ = 0;
  std::optional<double> best_;
};

double plateau_schedule(std::span<const double> history, double lr, const TrainConfig& config);

struct TrainLogRecord {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  std::optional<double> val_ppl;
};

struct TrainHooks {
  std::ostream* log = nullptr;          // JSON lines
  std::filesystem::path checkpoint_dir; // empty: keep nothing on disk
  // Called after each checkpoint; return false to stop early.
  std::function<bool(std::size_t step, const ModelParameters&)> on_checkpoint;
};

struct TrainResult {
  std::size_t steps = 0;
  double lr = 0;
  std::vector<TrainLogRecord> log;
  std::vector<std::filesystem::path> checkpoints;
  bool stopped_early = false;
};

std::string checkpoint_name(std::size_t step);

// Runs epochs of shuffled batches. A checkpoint happens every
// checkpoint_interval steps and at the end: validation perplexity (when
// validation data is given), plateau update, optional save.
TrainResult train(const DecoderConfig& config, ModelParameters& params,
                  const Vocabulary& vocab, const Dataset& train_data,
                  const Dataset* validation_data, const TrainConfig& train_config,
                  const TrainHooks& hooks = {});

}  // namespace forge
