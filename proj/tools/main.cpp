// Command suite: synth | train | generate | eval.
// Exit codes: 0 ok, 1 unexpected, 2 config error, 3 data error, 4 numeric.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "shapegan/common.hpp"
#include "shapegan/dataset_io.hpp"
#include "shapegan/manifest.hpp"
#include "shapegan/metrics.hpp"
#include "shapegan/model.hpp"
#include "shapegan/synth.hpp"
#include "shapegan/trainer.hpp"

namespace sg = shapegan;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr float kSegTol = 0.4f;  // background-distance threshold, [-1,1] units

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::uint64_t draw_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

fs::path output_root() {
  const char* env = std::getenv("SHAPEGAN_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string read_text(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw sg::DataError("cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string sanitized(const std::string& id) {
  std::string out = id;
  for (auto& c : out)
    if (c == '/' || c == '\\') c = '_';
  return out;
}

// dataset dir with a manifest -> load_dataset; plain image dir -> ingest at
// fallback_size (which must then be positive)
sg::ImageDataset load_input_set(const fs::path& path, int64_t fallback_size) {
  if (!fs::is_directory(path)) throw sg::DataError("not a directory: " + path.string());
  if (fs::exists(path / "manifest.json")) return sg::load_dataset(path);
  if (fallback_size <= 0)
    throw sg::ConfigError("directory " + path.string() +
                          " has no manifest.json; an image size hint is required");
  return sg::ingest_directory(path, fallback_size);
}

std::array<float, 3> background_from_manifest(const fs::path& dir) {
  std::array<float, 3> bg = {0.70f, 0.70f, 0.70f};
  fs::path mf = dir / "manifest.json";
  if (fs::exists(mf)) {
    try {
      json m = json::parse(std::ifstream(mf));
      if (m.contains("background_color")) {
        auto v = m["background_color"].get<std::vector<float>>();
        if (v.size() == 3) bg = {v[0], v[1], v[2]};
      }
    } catch (const json::exception&) {
    }
  }
  return bg;
}

// ---------------------------------------------------------------- synth ----

struct SynthArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  Timer timer;
  sg::SynthSpec spec;
  bool seed_in_config = false;
  if (!a.config.empty()) {
    std::string text = read_text(a.config);
    spec = sg::SynthSpec::from_json(text);
    try {
      seed_in_config = json::parse(text).contains("seed");
    } catch (const json::exception&) {
    }
  }
  if (a.seed)
    spec.seed = *a.seed;
  else if (!seed_in_config)
    spec.seed = draw_seed();

  fs::path out = a.out.empty() ? output_root() / "synth" : fs::path(a.out);
  auto result = sg::synthesize_dataset(spec);

  json extra;
  extra["background_color"] = spec.background_color;
  extra["spec_seed"] = spec.seed;
  extra["role"] = "shape";
  sg::save_dataset(result.shape_set, out / "shape", extra.dump());
  extra["role"] = "texture";
  sg::save_dataset(result.texture_set, out / "texture", extra.dump());

  sg::RunManifest m;
  m.command = "synth";
  m.config = json::parse(spec.to_json());
  m.seeds["synth"] = spec.seed;
  m.outputs["shape"] = (out / "shape").string();
  m.outputs["texture"] = (out / "texture").string();
  m.wall_seconds = timer.seconds();
  m.write_atomic(out / "manifest.json");

  std::cout << "synth: " << result.shape_set.size() << " shape + " << result.texture_set.size()
            << " texture images (" << spec.image_size << "x" << spec.image_size << ", "
            << spec.num_categories << " categories) -> " << out.string() << "\n";
  return sg::kExitOk;
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int64_t> epochs;
  std::optional<int64_t> batch_size;
  std::optional<double> lambda;
  std::string out;
};

int run_train(const TrainArgs& a) {
  Timer timer;
  if (a.config.empty()) throw sg::ConfigError("train needs --config <file>");
  json j;
  try {
    j = json::parse(read_text(a.config));
  } catch (const json::exception& e) {
    throw sg::ConfigError(std::string("bad train config JSON: ") + e.what());
  }

  std::vector<std::string> missing;
  if (!j.contains("shape_data")) missing.push_back("shape_data");
  if (!j.contains("texture_data")) missing.push_back("texture_data");
  if (!missing.empty()) {
    std::string msg = "train config missing required field(s):";
    for (const auto& f : missing) msg += " " + f;
    throw sg::ConfigError(msg);
  }

  sg::TrainConfig cfg = j.contains("train") ? sg::TrainConfig::from_json(j["train"].dump())
                                            : sg::TrainConfig{};
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) {
    cfg.epochs_total = *a.epochs;
    cfg.phase1_epochs = std::min(cfg.phase1_epochs, cfg.epochs_total);
  }
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lambda) cfg.loss.lambda_recon = *a.lambda;
  cfg.validate();

  auto shape_set = sg::load_dataset(j["shape_data"].get<std::string>());
  auto texture_set = sg::load_dataset(j["texture_data"].get<std::string>());

  sg::ModelConfig mc;
  bool model_given = j.contains("model");
  if (model_given) mc = sg::ModelConfig::from_json(j["model"].dump());
  if (!model_given || !j["model"].contains("image_size")) mc.image_size = shape_set.height();
  if (!model_given || !j["model"].contains("seed")) mc.seed = cfg.seed;
  if (cfg.conditional && mc.num_categories == 0) mc.num_categories = shape_set.num_categories;
  if (!cfg.conditional) mc.num_categories = 0;
  mc.validate();

  sg::ModelParams params;
  if (j.contains("resume")) {
    params = sg::load_checkpoint(j["resume"].get<std::string>());
    if (model_given && params.config.hash() != mc.hash())
      throw sg::ConfigError("resume checkpoint model configuration differs from the config file");
  } else {
    params = sg::init_params(mc);
  }

  fs::path out = a.out.empty() ? output_root() / "train" : fs::path(a.out);
  cfg.out_dir = out.string();
  auto result = sg::train(std::move(params), shape_set, texture_set, cfg);

  sg::RunManifest m;
  m.command = "train";
  m.config["train"] = json::parse(cfg.to_json());
  m.config["model"] = json::parse(result.params.config.to_json());
  m.config["shape_data"] = j["shape_data"];
  m.config["texture_data"] = j["texture_data"];
  if (j.contains("resume")) m.config["resume"] = j["resume"];
  m.seeds["train"] = cfg.seed;
  m.seeds["model"] = result.params.config.seed;
  m.inputs["shape_data"] = j["shape_data"];
  m.inputs["texture_data"] = j["texture_data"];
  m.outputs["train_log"] = (out / "train-log.csv").string();
  if (!result.checkpoints.empty())
    m.outputs["final_checkpoint"] = result.checkpoints.back().string();
  m.wall_seconds = timer.seconds();
  m.write_atomic(out / "manifest.json");

  std::cout << "train: " << result.params.epoch << " epochs, " << result.log.records.size()
            << " stage records -> " << out.string() << "\n";
  return sg::kExitOk;
}

// ------------------------------------------------------------- generate ----

struct GenerateArgs {
  std::string checkpoint;
  std::string inputs;
  int64_t styles = 8;
  std::string category;  // "", integer, or "all"
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  Timer timer;
  if (a.checkpoint.empty()) throw sg::ConfigError("generate needs --checkpoint <file>");
  if (a.inputs.empty()) throw sg::ConfigError("generate needs --inputs <dir>");
  if (a.styles < 1) throw sg::ConfigError("--styles-per-input must be >= 1");

  auto params = sg::load_checkpoint(a.checkpoint);
  auto inputs = load_input_set(a.inputs, params.config.image_size);
  if (inputs.height() != params.config.image_size)
    throw sg::ConfigError("input image size " + std::to_string(inputs.height()) +
                          " does not match the checkpoint's " +
                          std::to_string(params.config.image_size));

  const bool conditional = params.config.conditional();
  bool sweep = a.category == "all";
  std::optional<int64_t> fixed_cat;
  if (!a.category.empty() && !sweep) {
    try {
      fixed_cat = std::stoll(a.category);
    } catch (const std::exception&) {
      throw sg::ConfigError("--category must be an integer or 'all'");
    }
  }
  if ((sweep || fixed_cat) && !conditional)
    throw sg::ConfigError("--category given, but the checkpoint is unconditional");
  if (conditional && !sweep && !fixed_cat)
    throw sg::ConfigError("conditional checkpoint: pass --category <index> or --category all");

  std::uint64_t seed = a.seed ? *a.seed : draw_seed();
  fs::path out = a.out.empty() ? output_root() / "generate" : fs::path(a.out);
  fs::create_directories(out / "images");

  std::vector<sg::LatentVector> styles;
  for (int64_t jdx = 0; jdx < a.styles; ++jdx)
    styles.push_back(sg::LatentVector::standard_normal(
        params.config.latent_dim, sg::mix_seed(seed, {sg::tag64("style"), static_cast<std::uint64_t>(jdx)})));

  std::vector<std::vector<torch::Tensor>> grid;
  int64_t files = 0;
  for (int64_t i = 0; i < inputs.size(); ++i) {
    sg::Image x = inputs.image(i);
    sg::FeatureMap f = sg::encode(params, x);
    std::vector<torch::Tensor> row;
    std::string id = sanitized(inputs.ids[static_cast<size_t>(i)]);
    if (sweep) {
      for (int64_t k = 0; k < params.config.num_categories; ++k) {
        sg::Image y = sg::generate(params, f, styles[0],
                                   sg::CategoryLabel::of(k, params.config.num_categories));
        char name[128];
        std::snprintf(name, sizeof(name), "%s-c%02lld.png", id.c_str(), static_cast<long long>(k));
        sg::save_image_png(y, out / "images" / name);
        row.push_back(y.chw);
        ++files;
      }
    } else {
      sg::CategoryLabel c = fixed_cat
                                ? sg::CategoryLabel::of(*fixed_cat, params.config.num_categories)
                                : sg::CategoryLabel::absent();
      for (int64_t jdx = 0; jdx < a.styles; ++jdx) {
        sg::Image y = sg::generate(params, f, styles[static_cast<size_t>(jdx)], c);
        char name[128];
        std::snprintf(name, sizeof(name), "%s-s%02lld.png", id.c_str(), static_cast<long long>(jdx));
        sg::save_image_png(y, out / "images" / name);
        row.push_back(y.chw);
        ++files;
      }
    }
    grid.push_back(std::move(row));
  }
  sg::Image grid_img = sg::render_grid(grid);
  sg::save_image_png(grid_img, out / "grid.png");

  sg::RunManifest m;
  m.command = "generate";
  m.config["checkpoint"] = a.checkpoint;
  m.config["inputs"] = a.inputs;
  m.config["styles_per_input"] = a.styles;
  m.config["category"] = a.category;
  m.config["model"] = json::parse(params.config.to_json());
  m.seeds["generate"] = seed;
  m.inputs["checkpoint"] = a.checkpoint;
  m.inputs["shape_images"] = a.inputs;
  m.outputs["images"] = (out / "images").string();
  m.outputs["grid"] = (out / "grid.png").string();
  m.wall_seconds = timer.seconds();
  m.write_atomic(out / "manifest.json");

  std::cout << "generate: " << files << " images + grid.png -> " << out.string() << "\n";
  return sg::kExitOk;
}

// ----------------------------------------------------------------- eval ----

struct EvalArgs {
  std::string generated;
  std::string reference;
  std::string mode = "fid";
  std::string extractor = "desk-train";
  std::string category;
  int64_t styles = 8;
  std::optional<std::uint64_t> seed;
  std::string out;
};

bool is_checkpoint(const fs::path& p) {
  return fs::is_regular_file(p) && p.extension() == ".pt";
}

// one generated output per reference input, z seeded per input; conditional
// checkpoints reuse the reference labels as c
sg::ImageDataset generate_from_checkpoint(const sg::ModelParams& params,
                                          const sg::ImageDataset& ref, std::uint64_t seed) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(static_cast<size_t>(ref.size()));
  sg::ImageDataset out;
  for (int64_t i = 0; i < ref.size(); ++i) {
    sg::FeatureMap f = sg::encode(params, ref.image(i));
    sg::LatentVector z = sg::LatentVector::standard_normal(
        params.config.latent_dim, sg::mix_seed(seed, {sg::tag64("eval-z"), static_cast<std::uint64_t>(i)}));
    sg::CategoryLabel c = params.config.conditional()
                              ? sg::CategoryLabel::of(ref.labels[static_cast<size_t>(i)],
                                                      params.config.num_categories)
                              : sg::CategoryLabel::absent();
    imgs.push_back(sg::generate(params, f, z, c).chw);
    out.ids.push_back("gen-" + std::to_string(i));
  }
  out.images = torch::stack(imgs);
  if (ref.has_labels()) {  // each output inherits its source input's category
    out.labels = ref.labels;
    out.num_categories = ref.num_categories;
    out.category_names = ref.category_names;
  }
  out.validate();
  return out;
}

int run_eval(const EvalArgs& a) {
  Timer timer;
  if (a.generated.empty() || a.reference.empty())
    throw sg::ConfigError("eval needs --generated and --reference");
  if (a.mode != "fid" && a.mode != "per-category-fid" && a.mode != "iou")
    throw sg::ConfigError("--mode must be fid, per-category-fid, or iou");

  std::uint64_t seed = a.seed ? *a.seed : draw_seed();
  fs::path out = a.out.empty() ? output_root() / "eval" : fs::path(a.out);
  fs::create_directories(out);

  sg::RunManifest m;
  m.command = "eval";
  m.config["mode"] = a.mode;
  m.config["generated"] = a.generated;
  m.config["reference"] = a.reference;
  m.config["extractor"] = a.extractor;
  m.config["styles_per_input"] = a.styles;
  m.seeds["eval"] = seed;
  m.inputs["generated"] = a.generated;
  m.inputs["reference"] = a.reference;

  std::string summary;
  fs::path report_path = out / (a.mode + "-report.csv");

  if (a.mode == "iou") {
    if (!is_checkpoint(a.generated))
      throw sg::ConfigError("iou mode needs --generated <checkpoint.pt>");
    auto params = sg::load_checkpoint(a.generated);
    auto ref = load_input_set(a.reference, params.config.image_size);
    if (!ref.has_masks()) throw sg::DataError("iou mode needs a reference set with masks");
    sg::CategoryLabel c = sg::CategoryLabel::absent();
    if (!a.category.empty())
      c = sg::CategoryLabel::of(std::stoll(a.category), params.config.num_categories);
    else if (params.config.conditional())
      throw sg::ConfigError("conditional checkpoint: iou mode needs --category <index>");
    std::vector<sg::ShapeInput> inputs;
    for (int64_t i = 0; i < ref.size(); ++i)
      inputs.push_back({ref.image(i), ref.mask(i), ref.ids[static_cast<size_t>(i)]});
    // dataset manifests record the background in the model's own [-1,1] scale
    auto bg = background_from_manifest(a.reference);
    auto report = sg::shape_preservation_report(inputs, params, a.styles, seed, bg, kSegTol, c);
    std::ofstream os(report_path);
    os << report.to_csv();
    m.config["background_color"] = std::vector<float>{bg[0], bg[1], bg[2]};
    m.config["segment_tol"] = kSegTol;
    std::ostringstream ss;
    ss << "iou mean=" << report.mean_iou << " min=" << report.min_iou << " over "
       << report.rows.size() << " generations";
    summary = ss.str();
  } else if (a.extractor == "import") {
    auto fa = sg::load_feature_file(a.generated);
    auto fb = sg::load_feature_file(a.reference);
    if (fa.extractor != fb.extractor)
      throw sg::ConfigError("feature files disagree on the extractor: " + fa.extractor + " vs " +
                            fb.extractor);
    if (a.mode != "fid") throw sg::ConfigError("imported features support fid mode only");
    double v = sg::fid_from_feature_rows(fa.rows, fb.rows);
    std::ofstream os(report_path);
    os << "metric,value\nfid," << v << "\nextractor," << fa.extractor << "\n";
    std::ostringstream ss;
    ss << "fid=" << v << " (extractor " << fa.extractor << ")";
    summary = ss.str();
  } else {
    auto ref = load_input_set(a.reference, 0);
    sg::ImageDataset gen;
    if (is_checkpoint(a.generated)) {
      auto params = sg::load_checkpoint(a.generated);
      if (ref.height() != params.config.image_size)
        throw sg::ConfigError("reference image size does not match the checkpoint");
      gen = generate_from_checkpoint(params, ref, seed);
    } else {
      gen = load_input_set(a.generated, ref.height());
    }

    std::unique_ptr<sg::FeatureExtractor> extractor;
    if (a.extractor == "desk-train") {
      if (!ref.has_labels())
        throw sg::ConfigError("desk-train extractor needs a labeled reference set");
      sg::DeskClassifierConfig dcfg;
      dcfg.image_size = ref.height();
      dcfg.num_categories = ref.num_categories;
      dcfg.seed = seed;
      extractor = std::make_unique<sg::DeskExtractor>(sg::train_desk_classifier(ref, dcfg));
    } else if (a.extractor.rfind("desk:", 0) == 0) {
      extractor = std::make_unique<sg::DeskExtractor>(
          sg::load_desk_classifier(a.extractor.substr(5)));
    } else {
      throw sg::ConfigError("--extractor must be desk-train, desk:<file>, or import");
    }

    if (a.mode == "fid") {
      auto fg = sg::extract_features(*extractor, gen);
      auto fr = sg::extract_features(*extractor, ref);
      double v = sg::fid_from_feature_rows(fg, fr);
      // features are reusable later via --extractor import
      sg::save_feature_file({extractor->name(), fg}, out / "generated-features.txt");
      sg::save_feature_file({extractor->name(), fr}, out / "reference-features.txt");
      m.outputs["generated_features"] = (out / "generated-features.txt").string();
      m.outputs["reference_features"] = (out / "reference-features.txt").string();
      std::ofstream os(report_path);
      os << "metric,value\nfid," << v << "\nextractor," << extractor->name() << "\n";
      std::ostringstream ss;
      ss << "fid=" << v << " (extractor " << extractor->name() << ")";
      summary = ss.str();
    } else {
      auto table = sg::per_category_fid(gen, ref, *extractor);
      std::ofstream os(report_path);
      os << table.to_csv();
      std::ostringstream ss;
      ss << "pooled fid=" << table.pooled << " over " << table.rows.size() << " categories";
      summary = ss.str();
    }
  }

  m.outputs["report"] = report_path.string();
  m.wall_seconds = timer.seconds();
  m.write_atomic(out / "manifest.json");
  std::cout << "eval: " << summary << " -> " << report_path.string() << "\n";
  return sg::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);

  CLI::App app{"shape-preserving conditional GAN toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "materialize a procedural dataset pair");
  synth->add_option("--config", sa.config, "synthesis spec JSON file");
  synth->add_option("--seed", sa.seed, "override the spec seed");
  synth->add_option("--output-dir", sa.out, "output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run the two-stage training loop");
  train->add_option("--config", ta.config, "run config JSON file")->required();
  train->add_option("--seed", ta.seed, "override the training seed");
  train->add_option("--epochs", ta.epochs, "override epochs_total (phase 1 clamps to fit)");
  train->add_option("--batch-size", ta.batch_size, "override the batch size");
  train->add_option("--lambda", ta.lambda, "override the reconstruction weight");
  train->add_option("--output-dir", ta.out, "output directory");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "generate styled images from shape inputs");
  gen->add_option("--checkpoint", ga.checkpoint, "trained checkpoint (.pt)")->required();
  gen->add_option("--inputs", ga.inputs, "shape input directory")->required();
  gen->add_option("--styles-per-input", ga.styles, "outputs per input (distinct z)");
  gen->add_option("--category", ga.category, "category index, or 'all' to sweep");
  gen->add_option("--seed", ga.seed, "style seed");
  gen->add_option("--output-dir", ga.out, "output directory");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "compute FID / per-category FID / IoU reports");
  ev->add_option("--generated", ea.generated, "checkpoint.pt, image dir, or feature file")
      ->required();
  ev->add_option("--reference", ea.reference, "reference dataset dir or feature file")->required();
  ev->add_option("--mode", ea.mode, "fid | per-category-fid | iou");
  ev->add_option("--extractor", ea.extractor, "desk-train | desk:<file> | import");
  ev->add_option("--category", ea.category, "fixed category for conditional checkpoints");
  ev->add_option("--styles-per-input", ea.styles, "styles per input (iou mode)");
  ev->add_option("--seed", ea.seed, "evaluation seed");
  ev->add_option("--output-dir", ea.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? sg::kExitOk : sg::kExitConfig;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*train) return run_train(ta);
    if (*gen) return run_generate(ga);
    if (*ev) return run_eval(ea);
    std::cerr << "no subcommand given\n";
    return sg::kExitConfig;
  } catch (const sg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sg::kExitConfig;
  } catch (const sg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return sg::kExitData;
  } catch (const sg::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return sg::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sg::kExitFailure;
  }
}
