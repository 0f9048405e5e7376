#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "shapegan/image.hpp"
#include "shapegan/model.hpp"
#include "shapegan/objective.hpp"

namespace shapegan {

struct TrainConfig {
  int64_t epochs_total = 250;
  int64_t phase1_epochs = 100;
  double lr_phase1 = 1e-4;
  double lr_phase2 = 1e-5;
  int64_t batch_size = 64;
  LossConfig loss;
  std::uint64_t seed = 0;
  bool conditional = false;
  int64_t checkpoint_every = 50;
  double beta1 = 0.0;
  double beta2 = 0.99;
  // Test hook: scales the adversarial term of the E/G objective. 0 isolates
  // the reconstruction objective; default 1 is the plain combined loss.
  double adversarial_weight = 1.0;
  // Reserved: averaged generator weights are not implemented.
  bool ema_weights = false;
  // Empty: keep checkpoints and the log in memory only.
  std::string out_dir;

  void validate() const;
  std::string to_json() const;  // out_dir excluded: it is a runtime path
  static TrainConfig from_json(const std::string& text);
};

double lr_at(const TrainConfig& cfg, int64_t epoch);

struct StepMetrics {
  double d_loss = std::numeric_limits<double>::quiet_NaN();
  double g_adv = std::numeric_limits<double>::quiet_NaN();
  double recon = std::numeric_limits<double>::quiet_NaN();
  double r1 = std::numeric_limits<double>::quiet_NaN();
};

struct StepRecord {
  int64_t epoch = 0;
  int64_t step = 0;
  std::string stage;  // "d" or "eg"
  StepMetrics metrics;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> records;
  std::vector<std::string> diagnostics;

  void save_csv(const fs::path& file, bool append) const;
  static TrainLog load_csv(const fs::path& file);
};

// Equality of the metric sequences (stage, losses, lr), ignoring wall time.
bool logs_match(const TrainLog& a, const TrainLog& b, double rtol);

// One discriminator step: fakes are built from the shape batch without
// touching E/G gradients, then D descends d_adv_loss + r1_penalty on the
// texture (real) batch. E and G stay bitwise identical.
StepMetrics train_step_d(ModelParams& p, const Batch& shape_batch, const Batch& texture_batch,
                         const torch::Tensor& z, const torch::Tensor& c_fake_one_hot,
                         const TrainConfig& cfg);

// One encoder+generator step on adv + lambda * feature reconstruction;
// D stays bitwise identical (it runs in eval mode, so even its spectral
// norm power-iteration state is frozen).
StepMetrics train_step_eg(ModelParams& p, const Batch& shape_batch, const torch::Tensor& z,
                          const torch::Tensor& c_one_hot, const TrainConfig& cfg);

struct TrainHooks {
  // Called after each finished epoch with the live parameters (read only).
  std::function<void(const ModelParams&, int64_t epoch)> on_epoch_end;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
  std::vector<fs::path> checkpoints;
};

// Full alternating loop. params.epoch > 0 resumes at that epoch, which is
// exactly what loading a mid-run checkpoint produces. Every stochastic choice
// is derived from (cfg.seed, epoch, step, purpose), so a resumed run replays
// the uninterrupted one bit for bit.
TrainResult train(ModelParams params, const ImageDataset& shape_set,
                  const ImageDataset& texture_set, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

}  // namespace shapegan
