#include "shapegan/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "shapegan/common.hpp"

namespace shapegan {

using json = nlohmann::ordered_json;

// every failure is listed, not just the first
void TrainConfig::validate() const {
  std::vector<std::string> errs;
  if (epochs_total < 1) errs.push_back("epochs_total must be >= 1");
  if (phase1_epochs < 1) errs.push_back("phase1_epochs must be >= 1");
  if (epochs_total < phase1_epochs) errs.push_back("epochs_total must be >= phase1_epochs");
  if (!(lr_phase1 > 0.0) || !std::isfinite(lr_phase1)) errs.push_back("lr_phase1 must be positive");
  if (!(lr_phase2 > 0.0) || !std::isfinite(lr_phase2)) errs.push_back("lr_phase2 must be positive");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (checkpoint_every < 1) errs.push_back("checkpoint_every must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) errs.push_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) errs.push_back("beta2 must be in [0, 1)");
  if (!(adversarial_weight >= 0.0) || !std::isfinite(adversarial_weight))
    errs.push_back("adversarial_weight must be finite and >= 0");
  if (ema_weights) errs.push_back("ema_weights is reserved and must stay false");
  try {
    loss.validate();
  } catch (const ConfigError& e) {
    errs.push_back(e.what());
  }
  if (!errs.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs_total"] = epochs_total;
  j["phase1_epochs"] = phase1_epochs;
  j["lr_phase1"] = lr_phase1;
  j["lr_phase2"] = lr_phase2;
  j["batch_size"] = batch_size;
  j["lambda_recon"] = loss.lambda_recon;
  j["gamma_r1"] = loss.gamma_r1;
  j["generator_loss_variant"] = adv_variant_to_string(loss.variant);
  j["seed"] = seed;
  j["conditional"] = conditional;
  j["checkpoint_every"] = checkpoint_every;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adversarial_weight"] = adversarial_weight;
  j["ema_weights"] = ema_weights;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig cfg;
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    auto num = [&](const char* key, double fallback) {
      if (!j.contains(key)) return fallback;
      if (!j[key].is_number()) throw ConfigError(std::string("train config field '") + key + "' must be a number");
      return j[key].get<double>();
    };
    auto count = [&](const char* key, int64_t fallback) {
      if (!j.contains(key)) return fallback;
      if (!j[key].is_number_integer()) throw ConfigError(std::string("train config field '") + key + "' must be an integer");
      return j[key].get<int64_t>();
    };
    cfg.epochs_total = count("epochs_total", cfg.epochs_total);
    cfg.phase1_epochs = count("phase1_epochs", cfg.phase1_epochs);
    cfg.lr_phase1 = num("lr_phase1", cfg.lr_phase1);
    cfg.lr_phase2 = num("lr_phase2", cfg.lr_phase2);
    cfg.batch_size = count("batch_size", cfg.batch_size);
    cfg.loss.lambda_recon = num("lambda_recon", cfg.loss.lambda_recon);
    cfg.loss.gamma_r1 = num("gamma_r1", cfg.loss.gamma_r1);
    if (j.contains("generator_loss_variant"))
      cfg.loss.variant = adv_variant_from_string(j["generator_loss_variant"].get<std::string>());
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("conditional")) {
      if (!j["conditional"].is_boolean()) throw ConfigError("train config field 'conditional' must be a boolean");
      cfg.conditional = j["conditional"].get<bool>();
    }
    cfg.checkpoint_every = count("checkpoint_every", cfg.checkpoint_every);
    cfg.beta1 = num("beta1", cfg.beta1);
    cfg.beta2 = num("beta2", cfg.beta2);
    cfg.adversarial_weight = num("adversarial_weight", cfg.adversarial_weight);
    if (j.contains("ema_weights")) cfg.ema_weights = j["ema_weights"].get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double lr_at(const TrainConfig& cfg, int64_t epoch) {
  if (epoch < 0 || epoch >= cfg.epochs_total)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(cfg.epochs_total) + ")");
  return epoch < cfg.phase1_epochs ? cfg.lr_phase1 : cfg.lr_phase2;
}

namespace {

void check_aligned(int64_t a, int64_t b, const char* what) {
  if (a != b) throw ConfigError(std::string("batch sizes misaligned: ") + what);
}

torch::Tensor real_one_hot(const Batch& batch, const ModelParams& p, bool conditional) {
  if (!conditional) return {};
  return one_hot_batch(batch.labels, p.config.num_categories);
}

std::vector<int64_t> sample_with_replacement(int64_t n, int64_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int64_t> out(static_cast<size_t>(count));
  for (auto& v : out) v = rng.uniform_int(n);
  return out;
}

torch::Tensor sample_uniform_labels(int64_t count, int64_t k, std::uint64_t seed) {
  Rng rng(seed);
  auto t = torch::empty({count}, torch::kInt64);
  auto* ptr = t.data_ptr<int64_t>();
  for (int64_t i = 0; i < count; ++i) ptr[i] = rng.uniform_int(k);
  return t;
}

std::string csv_cell(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_line(const StepRecord& r) {
  std::ostringstream os;
  os << r.epoch << ',' << r.step << ',' << r.stage << ',' << csv_cell(r.metrics.d_loss) << ','
     << csv_cell(r.metrics.g_adv) << ',' << csv_cell(r.metrics.recon) << ','
     << csv_cell(r.metrics.r1) << ',' << csv_cell(r.lr) << ',' << csv_cell(r.wall_ms);
  return os.str();
}

constexpr const char* kCsvHeader = "epoch,step,stage,d_loss,g_adv,recon,r1,lr,wall_ms";

double parse_cell(const std::string& s) {
  return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
}

}  // namespace

void TrainLog::save_csv(const fs::path& file, bool append) const {
  bool fresh = !append || !fs::exists(file);
  std::ofstream os(file, fresh ? std::ios::trunc : std::ios::app);
  if (!os) throw DataError("cannot write train log " + file.string());
  if (fresh) os << kCsvHeader << '\n';
  for (const auto& r : records) os << csv_line(r) << '\n';
  for (const auto& d : diagnostics) os << "# " << d << '\n';
}

TrainLog TrainLog::load_csv(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot read train log " + file.string());
  TrainLog log;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      log.diagnostics.push_back(line.size() > 2 ? line.substr(2) : "");
      continue;
    }
    if (first) {
      first = false;
      if (line == kCsvHeader) continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 9) cells.emplace_back();
    StepRecord r;
    r.epoch = std::stoll(cells[0]);
    r.step = std::stoll(cells[1]);
    r.stage = cells[2];
    r.metrics.d_loss = parse_cell(cells[3]);
    r.metrics.g_adv = parse_cell(cells[4]);
    r.metrics.recon = parse_cell(cells[5]);
    r.metrics.r1 = parse_cell(cells[6]);
    r.lr = parse_cell(cells[7]);
    r.wall_ms = parse_cell(cells[8]);
    log.records.push_back(std::move(r));
  }
  return log;
}

namespace {

bool close_or_both_nan(double a, double b, double rtol) {
  if (std::isnan(a) && std::isnan(b)) return true;
  if (std::isnan(a) || std::isnan(b)) return false;
  return std::abs(a - b) <= rtol * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

bool logs_match(const TrainLog& a, const TrainLog& b, double rtol) {
  if (a.records.size() != b.records.size()) return false;
  for (size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    if (x.epoch != y.epoch || x.step != y.step || x.stage != y.stage) return false;
    if (!close_or_both_nan(x.metrics.d_loss, y.metrics.d_loss, rtol)) return false;
    if (!close_or_both_nan(x.metrics.g_adv, y.metrics.g_adv, rtol)) return false;
    if (!close_or_both_nan(x.metrics.recon, y.metrics.recon, rtol)) return false;
    if (!close_or_both_nan(x.metrics.r1, y.metrics.r1, rtol)) return false;
    if (!close_or_both_nan(x.lr, y.lr, rtol)) return false;
  }
  return true;
}

StepMetrics train_step_d(ModelParams& p, const Batch& shape_batch, const Batch& texture_batch,
                         const torch::Tensor& z, const torch::Tensor& c_fake_one_hot,
                         const TrainConfig& cfg) {
  if (!p.opt_d) throw ConfigError("train_step_d: optimizers not attached");
  int64_t n = shape_batch.images.size(0);
  check_aligned(n, texture_batch.images.size(0), "shape vs texture");
  check_aligned(n, z.size(0), "shape vs z");
  if (cfg.conditional) check_aligned(n, c_fake_one_hot.size(0), "shape vs c");

  p.discriminator->train();
  p.encoder->eval();
  p.generator->eval();

  torch::Tensor fake;
  {
    torch::NoGradGuard g;
    fake = generate_batch(p, encode_batch(p, shape_batch.images), z, c_fake_one_hot);
  }
  auto real_c = real_one_hot(texture_batch, p, cfg.conditional);
  auto real_logits = discriminate_batch(p, texture_batch.images, real_c);
  auto fake_logits = discriminate_batch(p, fake, c_fake_one_hot);
  auto adv = d_adv_loss(real_logits, fake_logits);
  auto r1 = r1_penalty(p, texture_batch.images, real_c, cfg.loss.gamma_r1);
  auto total = adv + r1;
  if (!torch::isfinite(total).item<bool>()) throw NumericError("d objective is not finite");

  p.opt_d->zero_grad();
  total.backward();
  p.opt_d->step();

  StepMetrics m;
  m.d_loss = adv.item<double>();
  m.r1 = r1.item<double>();
  return m;
}

StepMetrics train_step_eg(ModelParams& p, const Batch& shape_batch, const torch::Tensor& z,
                          const torch::Tensor& c_one_hot, const TrainConfig& cfg) {
  if (!p.opt_eg) throw ConfigError("train_step_eg: optimizers not attached");
  int64_t n = shape_batch.images.size(0);
  check_aligned(n, z.size(0), "shape vs z");
  if (cfg.conditional) check_aligned(n, c_one_hot.size(0), "shape vs c");

  p.discriminator->eval();  // freezes spectral norm state: D stays bitwise intact
  p.encoder->train();
  p.generator->train();

  auto f = encode_batch(p, shape_batch.images);
  auto y = generate_batch(p, f, z, c_one_hot);
  auto fake_logits = discriminate_batch(p, y, c_one_hot);
  auto adv = g_adv_loss(fake_logits, cfg.loss.variant);
  auto f_cycle = encode_batch(p, y);
  auto rec = recon_loss(f, f_cycle);
  auto total = eg_total(cfg.adversarial_weight * adv, rec, cfg.loss);

  p.opt_eg->zero_grad();
  total.backward();
  p.opt_eg->step();

  StepMetrics m;
  m.g_adv = adv.item<double>();
  m.recon = rec.item<double>();
  return m;
}

TrainResult train(ModelParams params, const ImageDataset& shape_set,
                  const ImageDataset& texture_set, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  params.config.validate();
  shape_set.validate();
  texture_set.validate();
  if (shape_set.size() == 0 || texture_set.size() == 0)
    throw ConfigError("train: both datasets must be nonempty");
  if (shape_set.images.size(2) != params.config.image_size ||
      texture_set.images.size(2) != params.config.image_size)
    throw ConfigError("train: dataset image size does not match the model");
  if (cfg.conditional != params.config.conditional())
    throw ConfigError("train: conditional flag does not match the model configuration");
  if (cfg.conditional) {
    if (shape_set.num_categories != params.config.num_categories ||
        texture_set.num_categories != params.config.num_categories)
      throw ConfigError("train: conditional run needs datasets labeled with " +
                        std::to_string(params.config.num_categories) + " categories");
  }
  if (params.epoch < 0 || params.epoch > cfg.epochs_total)
    throw ConfigError("train: checkpoint epoch " + std::to_string(params.epoch) +
                      " outside [0, " + std::to_string(cfg.epochs_total) + "]");

  params.ensure_optimizers(cfg.lr_phase1, cfg.beta1, cfg.beta2);

  TrainResult result;
  std::ofstream csv;
  fs::path out_dir(cfg.out_dir);
  if (!cfg.out_dir.empty()) {
    fs::create_directories(out_dir);
    fs::path log_path = out_dir / "train-log.csv";
    bool fresh = params.epoch == 0 || !fs::exists(log_path);
    csv.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw DataError("cannot write train log " + log_path.string());
    if (fresh) csv << kCsvHeader << '\n';
    std::ofstream cfg_out(out_dir / "train-config.json");
    cfg_out << cfg.to_json() << '\n';
    std::ofstream model_out(out_dir / "model-config.json");
    model_out << params.config.to_json() << '\n';
  }

  auto emit = [&](StepRecord r) {
    if (csv.is_open()) csv << csv_line(r) << '\n';
    result.log.records.push_back(std::move(r));
  };
  auto diagnose = [&](const std::string& msg) {
    if (csv.is_open()) csv << "# " << msg << '\n';
    result.log.diagnostics.push_back(msg);
  };
  auto save_ckpt = [&](const char* kind, int64_t epoch_done) {
    if (cfg.out_dir.empty()) return;
    char name[64];
    if (std::string(kind) == "final")
      std::snprintf(name, sizeof(name), "checkpoint-final.pt");
    else
      std::snprintf(name, sizeof(name), "checkpoint-e%04lld.pt",
                    static_cast<long long>(epoch_done));
    fs::path file = out_dir / name;
    save_checkpoint(params, file);
    result.checkpoints.push_back(file);
  };

  int strikes = 0;
  auto guarded = [&](int64_t epoch, int64_t step, const char* stage, auto&& fn) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    try {
      StepMetrics m = fn();
      strikes = 0;
      StepRecord r;
      r.epoch = epoch;
      r.step = step;
      r.stage = stage;
      r.metrics = m;
      r.lr = lr_at(cfg, epoch);
      r.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      emit(std::move(r));
    } catch (const NumericError& e) {
      ++strikes;
      diagnose("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + " stage " +
               stage + " aborted: " + e.what());
      if (strikes >= 3)
        throw NumericError(std::string("training stopped after 3 consecutive non-finite steps; last: ") +
                           e.what());
    }
  };

  for (int64_t epoch = params.epoch; epoch < cfg.epochs_total; ++epoch) {
    params.set_lr(lr_at(cfg, epoch));
    auto batches = epoch_batches(shape_set.size(), cfg.batch_size, cfg.seed, epoch);
    for (int64_t step = 0; step < static_cast<int64_t>(batches.size()); ++step) {
      Batch shape_b = take_batch(shape_set, batches[static_cast<size_t>(step)]);
      int64_t b = shape_b.images.size(0);
      auto tex_idx = sample_with_replacement(
          texture_set.size(), b,
          mix_seed(cfg.seed, {tag64("texture-batch"), static_cast<std::uint64_t>(epoch),
                              static_cast<std::uint64_t>(step)}));
      Batch tex_b = take_batch(texture_set, tex_idx);

      auto stage_seed = [&](const char* tag) {
        return mix_seed(cfg.seed, {tag64(tag), static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(step)});
      };
      auto z_d = seeded_normal({b, params.config.latent_dim}, stage_seed("z-d"));
      torch::Tensor c_d, c_g;
      if (cfg.conditional) {
        c_d = one_hot_batch(
            sample_uniform_labels(b, params.config.num_categories, stage_seed("c-d")),
            params.config.num_categories);
        c_g = one_hot_batch(
            sample_uniform_labels(b, params.config.num_categories, stage_seed("c-eg")),
            params.config.num_categories);
      }
      guarded(epoch, step, "d", [&] { return train_step_d(params, shape_b, tex_b, z_d, c_d, cfg); });
      auto z_g = seeded_normal({b, params.config.latent_dim}, stage_seed("z-eg"));
      guarded(epoch, step, "eg", [&] { return train_step_eg(params, shape_b, z_g, c_g, cfg); });
    }
    params.epoch = epoch + 1;
    if (csv.is_open()) csv.flush();
    if ((epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs_total)
      save_ckpt("cadence", epoch + 1);
    if (hooks.on_epoch_end) hooks.on_epoch_end(params, epoch);
  }
  params.epoch = cfg.epochs_total;
  save_ckpt("final", cfg.epochs_total);
  result.params = std::move(params);
  return result;
}

}  // namespace shapegan
