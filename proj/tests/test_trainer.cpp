#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "shapegan/common.hpp"
#include "shapegan/synth.hpp"
#include "shapegan/trainer.hpp"

using namespace shapegan;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(int64_t size, int64_t k, uint64_t seed) {
  ModelConfig mc;
  mc.image_size = size;
  mc.num_categories = k;
  mc.latent_dim = 8;
  mc.feature_channels = 8;
  mc.base_channels = 8;
  mc.channel_cap = 16;
  mc.seed = seed;
  return mc;
}

TrainConfig tiny_train(int64_t epochs, int64_t batch, uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs_total = epochs;
  cfg.phase1_epochs = epochs;
  cfg.batch_size = batch;
  cfg.seed = seed;
  cfg.checkpoint_every = 1000;
  return cfg;
}

SynthResult tiny_data(int64_t num_images, int64_t size, uint64_t seed, int64_t k = 2) {
  SynthSpec spec;
  spec.num_images = num_images;
  spec.num_categories = k;
  spec.image_size = size;
  spec.seed = seed;
  return synthesize_dataset(spec);
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.clone());
  for (const auto& b : m.buffers()) out.push_back(b.clone());
  return out;
}

bool same_tensors(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!a[i].equal(b[i])) return false;
  return true;
}

bool params_identical(const ModelParams& a, const ModelParams& b) {
  return same_tensors(snapshot(*a.encoder), snapshot(*b.encoder)) &&
         same_tensors(snapshot(*a.generator), snapshot(*b.generator)) &&
         same_tensors(snapshot(*a.discriminator), snapshot(*b.discriminator));
}

Batch batch_of(const ImageDataset& ds, int64_t count) {
  std::vector<int64_t> idx(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = i % ds.size();
  return take_batch(ds, idx);
}

// d objective re-evaluated with frozen spectral-norm state
double d_objective_eval(ModelParams& p, const Batch& shape_b, const Batch& tex_b,
                        const torch::Tensor& z, const TrainConfig& cfg) {
  p.discriminator->eval();
  p.encoder->eval();
  p.generator->eval();
  torch::Tensor fake;
  {
    torch::NoGradGuard g;
    fake = generate_batch(p, encode_batch(p, shape_b.images), z, {});
  }
  auto adv = d_adv_loss(discriminate_batch(p, tex_b.images, {}), discriminate_batch(p, fake, {}));
  auto r1 = r1_penalty(p, tex_b.images, {}, cfg.loss.gamma_r1);
  return (adv + r1).item<double>();
}

double recon_eval(ModelParams& p, const Batch& shape_b, const torch::Tensor& z) {
  torch::NoGradGuard g;
  p.encoder->eval();
  p.generator->eval();
  auto f = encode_batch(p, shape_b.images);
  auto y = generate_batch(p, f, z, {});
  return recon_loss(f, encode_batch(p, y)).item<double>();
}

fs::path temp_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("shapegan-trainer-") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("default config mirrors the published schedule") {
  TrainConfig cfg;
  CHECK(cfg.epochs_total == 250);
  CHECK(cfg.phase1_epochs == 100);
  CHECK(cfg.lr_phase1 == doctest::Approx(1e-4));
  CHECK(cfg.lr_phase2 == doctest::Approx(1e-5));
  CHECK(cfg.batch_size == 64);
  CHECK(cfg.loss.lambda_recon == doctest::Approx(50.0));
  CHECK(cfg.beta1 == doctest::Approx(0.0));
  CHECK(cfg.beta2 == doctest::Approx(0.99));
  CHECK_FALSE(cfg.conditional);
  CHECK_FALSE(cfg.ema_weights);

  auto echoed = TrainConfig::from_json(cfg.to_json());
  CHECK(echoed.epochs_total == 250);
  CHECK(echoed.loss.lambda_recon == doctest::Approx(50.0));
  CHECK(echoed.batch_size == 64);
  CHECK(echoed.loss.variant == AdvVariant::kNonSaturating);
}

TEST_CASE("config validation lists every failure at once") {
  TrainConfig cfg;
  cfg.epochs_total = 0;
  cfg.lr_phase1 = 0.0;
  cfg.batch_size = -3;
  cfg.beta1 = 1.5;
  cfg.ema_weights = true;
  cfg.loss.lambda_recon = -2.0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    for (const char* part : {"epochs_total", "lr_phase1", "batch_size", "beta1", "ema_weights",
                             "lambda_recon"})
      CHECK(msg.find(part) != std::string::npos);
  }
}

TEST_CASE("lr schedule steps at the phase boundary") {
  TrainConfig cfg;  // 100 + 150 epochs
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-4));
  CHECK(lr_at(cfg, 99) == doctest::Approx(1e-4));
  CHECK(lr_at(cfg, 100) == doctest::Approx(1e-5));
  CHECK(lr_at(cfg, 249) == doctest::Approx(1e-5));
  CHECK_THROWS_AS(lr_at(cfg, -1), ConfigError);
  CHECK_THROWS_AS(lr_at(cfg, 250), ConfigError);
}

TEST_CASE("d step: zero lr leaves everything bitwise, normal lr moves only D") {
  auto data = tiny_data(16, 32, 301);
  auto p = init_params(tiny_model(32, 0, 5));
  auto cfg = tiny_train(1, 4, 9);
  p.ensure_optimizers(cfg.lr_phase1, cfg.beta1, cfg.beta2);

  auto shape_b = batch_of(data.shape_set, 4);
  auto tex_b = batch_of(data.texture_set, 4);
  auto z = seeded_normal({4, 8}, 11);

  p.set_lr(0.0);
  auto e0 = snapshot(*p.encoder);
  auto g0 = snapshot(*p.generator);
  auto d0 = snapshot(*p.discriminator);
  auto m = train_step_d(p, shape_b, tex_b, z, {}, cfg);
  CHECK(std::isfinite(m.d_loss));
  CHECK(std::isfinite(m.r1));
  CHECK(std::isnan(m.g_adv));
  CHECK(same_tensors(e0, snapshot(*p.encoder)));
  CHECK(same_tensors(g0, snapshot(*p.generator)));
  // parameters frozen at lr 0; only the power-iteration buffer may move
  for (size_t i = 0; i < d0.size(); ++i)
    if (d0[i].requires_grad()) CHECK(d0[i].equal(snapshot(*p.discriminator)[i]));

  p.set_lr(1e-4);
  e0 = snapshot(*p.encoder);
  g0 = snapshot(*p.generator);
  d0 = snapshot(*p.discriminator);
  train_step_d(p, shape_b, tex_b, z, {}, cfg);
  CHECK(same_tensors(e0, snapshot(*p.encoder)));
  CHECK(same_tensors(g0, snapshot(*p.generator)));
  CHECK_FALSE(same_tensors(d0, snapshot(*p.discriminator)));
}

TEST_CASE("d step descends its own objective at small lr") {
  auto data = tiny_data(16, 32, 303);
  auto p = init_params(tiny_model(32, 0, 7));
  auto cfg = tiny_train(1, 4, 13);
  p.ensure_optimizers(1e-5, cfg.beta1, cfg.beta2);

  auto shape_b = batch_of(data.shape_set, 4);
  auto tex_b = batch_of(data.texture_set, 4);
  auto z = seeded_normal({4, 8}, 17);

  // settle the power iteration so sigma barely moves across the step
  {
    torch::NoGradGuard g;
    p.discriminator->train();
    for (int i = 0; i < 25; ++i) discriminate_batch(p, tex_b.images, {});
  }
  double before = d_objective_eval(p, shape_b, tex_b, z, cfg);
  train_step_d(p, shape_b, tex_b, z, {}, cfg);
  double after = d_objective_eval(p, shape_b, tex_b, z, cfg);
  CHECK(after < before);
}

TEST_CASE("eg step: zero lr freezes E and G; recon descends when isolated") {
  auto data = tiny_data(16, 32, 305);
  auto p = init_params(tiny_model(32, 0, 15));
  auto cfg = tiny_train(1, 4, 19);
  cfg.adversarial_weight = 0.0;  // leave only the reconstruction objective
  p.ensure_optimizers(1e-4, cfg.beta1, cfg.beta2);

  auto shape_b = batch_of(data.shape_set, 4);
  auto z = seeded_normal({4, 8}, 23);

  p.set_lr(0.0);
  auto e0 = snapshot(*p.encoder);
  auto g0 = snapshot(*p.generator);
  auto m = train_step_eg(p, shape_b, z, {}, cfg);
  CHECK(std::isfinite(m.g_adv));
  CHECK(std::isfinite(m.recon));
  CHECK(std::isnan(m.d_loss));
  CHECK(same_tensors(e0, snapshot(*p.encoder)));
  CHECK(same_tensors(g0, snapshot(*p.generator)));

  p.set_lr(1e-4);
  double before = recon_eval(p, shape_b, z);
  auto d0 = snapshot(*p.discriminator);
  train_step_eg(p, shape_b, z, {}, cfg);
  CHECK(same_tensors(d0, snapshot(*p.discriminator)));  // includes SN buffers
  double after = recon_eval(p, shape_b, z);
  CHECK(after < before);
}

TEST_CASE("train preflight rejects inconsistent setups before any step") {
  auto data = tiny_data(8, 32, 307);
  auto cfg = tiny_train(1, 4, 29);

  // conditional config on an unlabeled dataset
  auto unlabeled = data.shape_set;
  unlabeled.labels.clear();
  unlabeled.num_categories = 0;
  unlabeled.category_names.clear();
  auto cond_cfg = cfg;
  cond_cfg.conditional = true;
  CHECK_THROWS_AS(train(init_params(tiny_model(32, 2, 1)), unlabeled, unlabeled, cond_cfg),
                  ConfigError);

  // conditional flag vs unconditional model
  CHECK_THROWS_AS(train(init_params(tiny_model(32, 0, 1)), data.shape_set, data.texture_set,
                        cond_cfg),
                  ConfigError);

  // image size mismatch
  CHECK_THROWS_AS(train(init_params(tiny_model(64, 0, 1)), data.shape_set, data.texture_set, cfg),
                  ConfigError);

  // empty dataset
  ImageDataset empty;
  CHECK_THROWS_AS(train(init_params(tiny_model(32, 0, 1)), empty, data.texture_set, cfg),
                  DataError);

  // resume epoch beyond the schedule
  auto p = init_params(tiny_model(32, 0, 1));
  p.epoch = 5;
  CHECK_THROWS_AS(train(std::move(p), data.shape_set, data.texture_set, cfg), ConfigError);
}

TEST_CASE("two-epoch smoke run: record count, ordering, schedule") {
  auto data = tiny_data(128, 32, 309);  // 64 shape + 64 texture images
  REQUIRE(data.shape_set.size() == 64);

  for (int64_t batch : {64, 48}) {
    auto cfg = tiny_train(2, batch, 31);
    cfg.phase1_epochs = 1;  // exercise the lr step inside the smoke run
    auto result = train(init_params(tiny_model(32, 0, 3)), data.shape_set, data.texture_set, cfg);

    int64_t batches = (64 + batch - 1) / batch;
    CHECK(static_cast<int64_t>(result.log.records.size()) == 2 * batches * 2);
    CHECK(result.params.epoch == 2);
    CHECK(result.log.diagnostics.empty());

    for (size_t i = 0; i < result.log.records.size(); ++i) {
      const auto& r = result.log.records[i];
      CHECK(r.lr == doctest::Approx(lr_at(cfg, r.epoch)).epsilon(1e-15));
      CHECK((r.stage == "d" || r.stage == "eg"));
      bool d_slot = i % 2 == 0;
      CHECK(r.stage == (d_slot ? "d" : "eg"));  // strict d then eg per step
      int64_t flat = static_cast<int64_t>(i) / 2;
      CHECK(r.epoch == flat / batches);
      CHECK(r.step == flat % batches);
      if (r.stage == "d") {
        CHECK(std::isfinite(r.metrics.d_loss));
        CHECK(std::isfinite(r.metrics.r1));
      } else {
        CHECK(std::isfinite(r.metrics.g_adv));
        CHECK(std::isfinite(r.metrics.recon));
      }
    }
  }
}

TEST_CASE("identical seeds give identical logs, different seeds diverge") {
  auto data = tiny_data(16, 32, 311);
  auto cfg = tiny_train(2, 8, 37);

  auto a = train(init_params(tiny_model(32, 0, 3)), data.shape_set, data.texture_set, cfg);
  auto b = train(init_params(tiny_model(32, 0, 3)), data.shape_set, data.texture_set, cfg);
  CHECK(logs_match(a.log, b.log, 0.0));  // bitwise under single-thread kernels
  CHECK(params_identical(a.params, b.params));

  auto cfg2 = cfg;
  cfg2.seed = 38;
  auto c = train(init_params(tiny_model(32, 0, 3)), data.shape_set, data.texture_set, cfg2);
  CHECK_FALSE(logs_match(a.log, c.log, 1e-9));
}

TEST_CASE("conditional smoke run trains and logs cleanly") {
  auto data = tiny_data(16, 32, 313, 3);
  auto cfg = tiny_train(1, 8, 41);
  cfg.conditional = true;
  auto result = train(init_params(tiny_model(32, 3, 9)), data.shape_set, data.texture_set, cfg);
  CHECK(result.log.records.size() == 2);
  for (const auto& r : result.log.records)
    CHECK(std::isfinite(r.stage == "d" ? r.metrics.d_loss : r.metrics.g_adv));
}

TEST_CASE("checkpoint resume replays the uninterrupted run bit for bit") {
  auto data = tiny_data(32, 32, 315);  // 16 shape images: two steps per epoch
  auto dir = temp_dir("resume");

  auto cfg = tiny_train(4, 8, 43);
  cfg.out_dir = (dir / "full").string();
  auto full = train(init_params(tiny_model(32, 0, 21)), data.shape_set, data.texture_set, cfg);
  REQUIRE(full.log.records.size() == 4 * 2 * 2);

  // same run stopped after epoch 2, then resumed from its checkpoint
  auto head_cfg = cfg;
  head_cfg.epochs_total = 2;
  head_cfg.phase1_epochs = 2;
  head_cfg.out_dir = (dir / "head").string();
  auto head = train(init_params(tiny_model(32, 0, 21)), data.shape_set, data.texture_set,
                    head_cfg);
  REQUIRE_FALSE(head.checkpoints.empty());

  auto resumed_params = load_checkpoint(head.checkpoints.back());
  CHECK(resumed_params.epoch == 2);
  auto tail_cfg = cfg;
  tail_cfg.out_dir = (dir / "tail").string();
  auto tail = train(std::move(resumed_params), data.shape_set, data.texture_set, tail_cfg);

  TrainLog stitched;
  stitched.records = head.log.records;
  stitched.records.insert(stitched.records.end(), tail.log.records.begin(),
                          tail.log.records.end());
  CHECK(logs_match(full.log, stitched, 0.0));
  CHECK(params_identical(full.params, tail.params));
}

TEST_CASE("checkpoint cadence writes epoch files plus final") {
  auto data = tiny_data(8, 32, 317);
  auto dir = temp_dir("cadence");
  auto cfg = tiny_train(4, 8, 47);
  cfg.checkpoint_every = 2;
  cfg.out_dir = dir.string();
  auto result = train(init_params(tiny_model(32, 0, 23)), data.shape_set, data.texture_set, cfg);

  REQUIRE(result.checkpoints.size() == 2);  // e0002 + final (e0004 == final is skipped)
  CHECK(result.checkpoints[0].filename() == "checkpoint-e0002.pt");
  CHECK(result.checkpoints[1].filename() == "checkpoint-final.pt");
  CHECK(fs::exists(dir / "train-config.json"));
  CHECK(fs::exists(dir / "model-config.json"));
  CHECK(fs::exists(dir / "train-log.csv"));

  auto final_params = load_checkpoint(dir / "checkpoint-final.pt");
  CHECK(final_params.epoch == 4);
  CHECK(params_identical(final_params, result.params));

  auto from_disk = TrainLog::load_csv(dir / "train-log.csv");
  CHECK(logs_match(from_disk, result.log, 0.0));  // %.17g cells round trip doubles
}

TEST_CASE("csv save and load round trip, including append and diagnostics") {
  auto dir = temp_dir("csv");
  TrainLog log;
  StepRecord r;
  r.epoch = 0;
  r.step = 0;
  r.stage = "d";
  r.metrics.d_loss = 1.25;
  r.metrics.r1 = 0.125;  // g_adv/recon stay NaN -> empty cells
  r.lr = 1e-4;
  r.wall_ms = 10.0;
  log.records.push_back(r);
  log.diagnostics.push_back("epoch 0 step 1 stage eg aborted: synthetic note");
  log.save_csv(dir / "log.csv", false);

  TrainLog more;
  r.stage = "eg";
  r.metrics = {};
  r.metrics.g_adv = 0.5;
  r.metrics.recon = 0.75;
  more.records.push_back(r);
  more.save_csv(dir / "log.csv", true);

  auto loaded = TrainLog::load_csv(dir / "log.csv");
  REQUIRE(loaded.records.size() == 2);
  CHECK(loaded.records[0].stage == "d");
  CHECK(loaded.records[0].metrics.d_loss == doctest::Approx(1.25));
  CHECK(std::isnan(loaded.records[0].metrics.g_adv));
  CHECK(loaded.records[1].stage == "eg");
  CHECK(loaded.records[1].metrics.recon == doctest::Approx(0.75));
  CHECK(std::isnan(loaded.records[1].metrics.d_loss));
  REQUIRE(loaded.diagnostics.size() == 1);
  CHECK(loaded.diagnostics[0].find("synthetic note") != std::string::npos);

  CHECK_THROWS_AS(TrainLog::load_csv(dir / "absent.csv"), DataError);
}

TEST_CASE("non-finite objectives abort the step and stop after three strikes") {
  auto data = tiny_data(16, 32, 319);  // 8 shape images: two steps per epoch

  // only the E/G objective overflows: aborted steps are logged, training survives
  auto cfg = tiny_train(1, 4, 53);
  cfg.loss.lambda_recon = 1e308;
  auto partial = train(init_params(tiny_model(32, 0, 25)), data.shape_set, data.texture_set, cfg);
  CHECK(partial.log.records.size() == 2);  // two d records, eg steps all aborted
  for (const auto& r : partial.log.records) CHECK(r.stage == "d");
  CHECK(partial.log.diagnostics.size() == 2);
  CHECK(partial.log.diagnostics[0].find("aborted") != std::string::npos);

  // both stages overflow: consecutive strikes hit the limit and raise
  auto doomed = tiny_train(1, 4, 53);
  doomed.loss.lambda_recon = 1e308;
  doomed.loss.gamma_r1 = 1e308;
  CHECK_THROWS_AS(
      train(init_params(tiny_model(32, 0, 25)), data.shape_set, data.texture_set, doomed),
      NumericError);
}

TEST_CASE("epoch hook sees the live parameters each epoch") {
  auto data = tiny_data(8, 32, 321);
  auto cfg = tiny_train(3, 8, 59);
  std::vector<int64_t> seen;
  TrainHooks hooks;
  hooks.on_epoch_end = [&](const ModelParams& p, int64_t epoch) {
    seen.push_back(epoch);
    CHECK(p.epoch == epoch + 1);
  };
  train(init_params(tiny_model(32, 0, 27)), data.shape_set, data.texture_set, cfg, hooks);
  CHECK(seen == std::vector<int64_t>{0, 1, 2});
}

}  // TEST_SUITE
