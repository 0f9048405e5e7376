#include "shapegan/metrics.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "shapegan/common.hpp"

namespace shapegan {

using json = nlohmann::ordered_json;

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto td = t.to(torch::kFloat64).contiguous();
  Eigen::MatrixXd m(td.size(0), td.size(1));
  auto acc = td.accessor<double, 2>();
  for (int64_t i = 0; i < td.size(0); ++i)
    for (int64_t j = 0; j < td.size(1); ++j) m(i, j) = acc[i][j];
  return m;
}

Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

// Eigenvalues more negative than -1e-6 * max(lambda_max, 1e-6) reject the
// matrix as non-PSD; anything milder clamps to zero.
Eigen::VectorXd psd_eigenvalues(const Eigen::VectorXd& raw, const char* what) {
  double lamax = std::max(raw.maxCoeff(), 0.0);
  double floor = -1e-6 * std::max(lamax, 1e-6);
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    if (!std::isfinite(raw[i])) throw NumericError(std::string(what) + ": non-finite eigenvalue");
    if (raw[i] < floor)
      throw NumericError(std::string(what) + ": eigenvalue " + std::to_string(raw[i]) +
                         " below the PSD tolerance (lambda_max " + std::to_string(lamax) + ")");
  }
  return raw.cwiseMax(0.0);
}

}  // namespace

GaussianStats gaussian_stats(const torch::Tensor& features, bool population) {
  if (!features.defined() || features.dim() != 2)
    throw ConfigError("gaussian_stats: features must be an {n,d} matrix");
  int64_t n = features.size(0);
  if (n < 2) throw ConfigError("gaussian_stats: need at least 2 rows, got " + std::to_string(n));
  if (!torch::isfinite(features).all().item<bool>())
    throw NumericError("gaussian_stats: non-finite features");
  Eigen::MatrixXd x = to_eigen(features);
  GaussianStats s;
  s.mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  double divisor = population ? static_cast<double>(n) : static_cast<double>(n - 1);
  s.cov = symmetrized(centered.transpose() * centered / divisor);
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows() ||
      a.cov.cols() != b.cov.cols() || a.cov.rows() != a.mean.size())
    throw ConfigError("frechet_distance: dimension mismatch");
  if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite())
    throw NumericError("frechet_distance: non-finite statistics");

  Eigen::MatrixXd ca = symmetrized(a.cov), cb = symmetrized(b.cov);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(ca);
  if (ea.info() != Eigen::Success)
    throw NumericError("frechet_distance: eigendecomposition of the first covariance failed");
  Eigen::VectorXd la = psd_eigenvalues(ea.eigenvalues(), "frechet_distance: first covariance");
  Eigen::MatrixXd root_a =
      ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();

  Eigen::MatrixXd prod = symmetrized(root_a * cb * root_a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(prod);
  if (ep.info() != Eigen::Success)
    throw NumericError(
        "frechet_distance: eigendecomposition of the symmetrized covariance product failed");
  Eigen::VectorXd lp = psd_eigenvalues(ep.eigenvalues(), "frechet_distance: covariance product");
  double trace_sqrt = lp.cwiseSqrt().sum();

  double fd = (a.mean - b.mean).squaredNorm() + ca.trace() + cb.trace() - 2.0 * trace_sqrt;
  if (!std::isfinite(fd)) throw NumericError("frechet_distance: non-finite result");
  return std::max(fd, 0.0);
}

void DeskClassifierConfig::validate() const {
  if (image_size < 8 || (image_size & (image_size - 1)) != 0)
    throw ConfigError("desk classifier image_size must be a power of two >= 8");
  if (num_categories < 2) throw ConfigError("desk classifier needs num_categories >= 2");
  if (hidden_dim < 1) throw ConfigError("desk classifier hidden_dim must be >= 1");
  if (epochs < 1) throw ConfigError("desk classifier epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("desk classifier lr must be positive");
  if (batch_size < 1) throw ConfigError("desk classifier batch_size must be >= 1");
}

DeskClassifierImpl::DeskClassifierImpl(const DeskClassifierConfig& cfg) {
  cfg.validate();
  int64_t in = 3, w = 0;
  for (int64_t s = cfg.image_size, i = 0; s > 4; s /= 2, ++i) {
    w = std::min<int64_t>(128, 16 << i);
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, w, 3).padding(1)));
    body_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::gcd<int64_t>(w, 8), w)));
    body_->push_back(torch::nn::ReLU());
    body_->push_back(torch::nn::AvgPool2d(2));
    in = w;
  }
  register_module("body", body_);
  fc_ = register_module("fc", torch::nn::Linear(w * 4 * 4, cfg.hidden_dim));
  head_ = register_module("head", torch::nn::Linear(cfg.hidden_dim, cfg.num_categories));
}

torch::Tensor DeskClassifierImpl::features(const torch::Tensor& images) {
  auto h = body_->forward(images).flatten(1);
  return torch::relu(fc_->forward(h));
}

torch::Tensor DeskClassifierImpl::logits(const torch::Tensor& images) {
  return head_->forward(features(images));
}

DeskModel train_desk_classifier(const ImageDataset& train_set, const DeskClassifierConfig& cfg) {
  cfg.validate();
  train_set.validate();
  if (train_set.num_categories != cfg.num_categories)
    throw ConfigError("desk classifier: dataset category count does not match the config");
  if (train_set.images.size(2) != cfg.image_size)
    throw ConfigError("desk classifier: dataset image size does not match the config");

  torch::manual_seed(static_cast<int64_t>(cfg.seed));
  DeskModel model{cfg, DeskClassifier(cfg)};
  model.net->train();
  torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(cfg.lr));
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batches = epoch_batches(train_set.size(), cfg.batch_size,
                                 mix_seed(cfg.seed, {tag64("desk-classifier")}), epoch);
    for (const auto& idx : batches) {
      Batch b = take_batch(train_set, idx);
      auto loss = torch::nn::functional::cross_entropy(model.net->logits(b.images), b.labels);
      if (!torch::isfinite(loss).item<bool>())
        throw NumericError("desk classifier training loss is not finite");
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  model.net->eval();
  return model;
}

torch::Tensor classify(const DeskModel& model, const torch::Tensor& images) {
  torch::NoGradGuard g;
  DeskClassifier net = model.net;  // shared handle
  net->eval();
  return net->logits(images).argmax(1);
}

double classifier_accuracy(const DeskModel& model, const ImageDataset& eval_set) {
  eval_set.validate();
  if (eval_set.size() == 0) throw ConfigError("classifier_accuracy: empty dataset");
  if (!eval_set.has_labels()) throw ConfigError("classifier_accuracy: dataset is unlabeled");
  torch::NoGradGuard g;
  auto truth = torch::tensor(eval_set.labels, torch::kInt64);
  int64_t hits = 0;
  const int64_t step = 64;
  for (int64_t at = 0; at < eval_set.size(); at += step) {
    int64_t n = std::min(step, eval_set.size() - at);
    auto pred = classify(model, eval_set.images.narrow(0, at, n));
    hits += (pred == truth.narrow(0, at, n)).sum().item<int64_t>();
  }
  return static_cast<double>(hits) / static_cast<double>(eval_set.size());
}

void save_desk_classifier(const DeskModel& model, const fs::path& file) {
  torch::serialize::OutputArchive root;
  json j;
  j["image_size"] = model.config.image_size;
  j["num_categories"] = model.config.num_categories;
  j["hidden_dim"] = model.config.hidden_dim;
  j["epochs"] = model.config.epochs;
  j["lr"] = model.config.lr;
  j["batch_size"] = model.config.batch_size;
  j["seed"] = model.config.seed;
  root.write("config", j.dump());
  torch::serialize::OutputArchive net;
  model.net->save(net);
  root.write("net", net);
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  root.save_to(file.string());
}

DeskModel load_desk_classifier(const fs::path& file) {
  if (!fs::exists(file)) throw DataError("classifier file not found: " + file.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(file.string());
  } catch (const std::exception& e) {
    throw DataError("unreadable classifier file " + file.string() + ": " + e.what());
  }
  c10::IValue iv;
  root.read("config", iv);
  DeskClassifierConfig cfg;
  try {
    json j = json::parse(iv.toStringRef());
    cfg.image_size = j.at("image_size").get<int64_t>();
    cfg.num_categories = j.at("num_categories").get<int64_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<int64_t>();
    cfg.epochs = j.at("epochs").get<int64_t>();
    cfg.lr = j.at("lr").get<double>();
    cfg.batch_size = j.at("batch_size").get<int64_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad classifier config in file: ") + e.what());
  }
  DeskModel model{cfg, DeskClassifier(cfg)};
  torch::serialize::InputArchive net;
  root.read("net", net);
  model.net->load(net);
  model.net->eval();
  return model;
}

torch::Tensor DeskExtractor::extract(const torch::Tensor& images) const {
  torch::NoGradGuard g;
  model_.net->eval();
  return model_.net->features(images);
}

torch::Tensor extract_features(const FeatureExtractor& extractor, const ImageDataset& set,
                               int64_t batch_size) {
  set.validate();
  if (set.size() == 0) throw ConfigError("extract_features: empty dataset");
  if (batch_size < 1) throw ConfigError("extract_features: batch_size must be >= 1");
  std::vector<torch::Tensor> parts;
  try {
    for (int64_t at = 0; at < set.size(); at += batch_size) {
      int64_t n = std::min(batch_size, set.size() - at);
      parts.push_back(extractor.extract(set.images.narrow(0, at, n)));
    }
  } catch (const c10::Error& e) {
    throw ConfigError(std::string("feature extraction failed (image size vs extractor?): ") +
                      e.what_without_backtrace());
  }
  auto out = torch::cat(parts, 0);
  if (out.size(1) != extractor.dim())
    throw ConfigError("extractor returned dim " + std::to_string(out.size(1)) +
                      ", declared " + std::to_string(extractor.dim()));
  return out;
}

double compute_fid(const ImageDataset& generated, const ImageDataset& reference,
                   const FeatureExtractor& extractor) {
  auto fa = extract_features(extractor, generated);
  auto fb = extract_features(extractor, reference);
  return frechet_distance(gaussian_stats(fa), gaussian_stats(fb));
}

double fid_from_feature_rows(const torch::Tensor& a, const torch::Tensor& b) {
  return frechet_distance(gaussian_stats(a), gaussian_stats(b));
}

void save_feature_file(const FeatureFile& f, const fs::path& file) {
  if (f.extractor.empty() || f.extractor.find_first_of(" \t\n") != std::string::npos)
    throw ConfigError("feature file extractor name must be a nonempty single token");
  if (!f.rows.defined() || f.rows.dim() != 2)
    throw ConfigError("feature file rows must be an {n,d} matrix");
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream os(file);
  if (!os) throw DataError("cannot write feature file " + file.string());
  auto rows = f.rows.to(torch::kFloat32).contiguous();
  os << f.extractor << ' ' << rows.size(1) << ' ' << rows.size(0) << '\n';
  auto acc = rows.accessor<float, 2>();
  os.precision(9);
  for (int64_t i = 0; i < rows.size(0); ++i) {
    for (int64_t j = 0; j < rows.size(1); ++j) {
      if (j) os << ' ';
      os << acc[i][j];
    }
    os << '\n';
  }
}

FeatureFile load_feature_file(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot read feature file " + file.string());
  FeatureFile f;
  int64_t d = 0, n = 0;
  if (!(is >> f.extractor >> d >> n) || d < 1 || n < 0)
    throw DataError("bad feature file header in " + file.string());
  auto rows = torch::empty({n, d}, torch::kFloat32);
  auto acc = rows.accessor<float, 2>();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double v;
      if (!(is >> v) || !std::isfinite(v))
        throw DataError("bad feature value at row " + std::to_string(i) + " in " + file.string());
      acc[i][j] = static_cast<float>(v);
    }
  f.rows = rows;
  return f;
}

std::string PerCategoryFid::to_csv() const {
  std::ostringstream os;
  os << "category,name,n_generated,n_reference,fid,note\n";
  for (const auto& r : rows) {
    os << r.category << ',' << r.name << ',' << r.n_generated << ',' << r.n_reference << ',';
    if (!r.skipped) os << r.fid;
    os << ',' << r.note << '\n';
  }
  os << "all,pooled,,," << pooled << ",\n";
  return os.str();
}

PerCategoryFid per_category_fid(const ImageDataset& generated, const ImageDataset& reference,
                                const FeatureExtractor& extractor) {
  generated.validate();
  reference.validate();
  if (generated.num_categories < 1 || generated.num_categories != reference.num_categories)
    throw ConfigError("per_category_fid: both datasets must share a positive category count");

  PerCategoryFid out;
  out.pooled = compute_fid(generated, reference, extractor);
  for (int64_t k = 0; k < generated.num_categories; ++k) {
    auto pick = [&](const ImageDataset& ds) {
      std::vector<int64_t> idx;
      for (int64_t i = 0; i < ds.size(); ++i)
        if (ds.labels[static_cast<size_t>(i)] == k) idx.push_back(i);
      return idx;
    };
    auto gi = pick(generated), ri = pick(reference);
    CategoryFidRow row;
    row.category = k;
    row.name = k < static_cast<int64_t>(generated.category_names.size())
                   ? generated.category_names[static_cast<size_t>(k)]
                   : "category-" + std::to_string(k);
    row.n_generated = static_cast<int64_t>(gi.size());
    row.n_reference = static_cast<int64_t>(ri.size());
    if (gi.size() < 2 || ri.size() < 2) {
      row.skipped = true;
      row.fid = std::numeric_limits<double>::quiet_NaN();
      row.note = "skipped: fewer than 2 images on one side";
    } else {
      row.fid = compute_fid(generated.subset(gi), reference.subset(ri), extractor);
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

SegMask segment_generated(const Image& image, const std::array<float, 3>& background, float tol) {
  const auto& t = image.chw;
  if (!t.defined() || t.dim() != 3 || t.size(0) != 3)
    throw ConfigError("segment_generated: image must be {3,H,W}");
  int64_t h = t.size(1), w = t.size(2);
  auto img = t.contiguous();
  auto acc = img.accessor<float, 3>();

  std::vector<uint8_t> over(static_cast<size_t>(h * w), 0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      float d = 0.f;
      for (int c = 0; c < 3; ++c)
        d = std::max(d, std::abs(acc[c][y][x] - background[static_cast<size_t>(c)]));
      over[static_cast<size_t>(y * w + x)] = d > tol ? 1 : 0;
    }

  auto mask = torch::zeros({h, w}, torch::kUInt8);
  auto macc = mask.accessor<uint8_t, 2>();

  // largest 4-connected component of the thresholded pixels
  std::vector<int32_t> comp(static_cast<size_t>(h * w), -1);
  int32_t best = -1;
  int64_t best_size = 0;
  std::deque<int64_t> queue;
  int32_t next_label = 0;
  for (int64_t start = 0; start < h * w; ++start) {
    if (!over[static_cast<size_t>(start)] || comp[static_cast<size_t>(start)] >= 0) continue;
    int64_t size = 0;
    comp[static_cast<size_t>(start)] = next_label;
    queue.push_back(start);
    while (!queue.empty()) {
      int64_t at = queue.front();
      queue.pop_front();
      ++size;
      int64_t y = at / w, x = at % w;
      const int64_t ny[4] = {y - 1, y + 1, y, y};
      const int64_t nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
        int64_t to = ny[k] * w + nx[k];
        if (over[static_cast<size_t>(to)] && comp[static_cast<size_t>(to)] < 0) {
          comp[static_cast<size_t>(to)] = next_label;
          queue.push_back(to);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = next_label;
    }
    ++next_label;
  }
  if (best < 0) return {mask};  // nothing above threshold: empty mask

  // hole fill: flood the non-component region from the border; anything the
  // flood cannot reach is enclosed by the component and gets filled
  std::vector<uint8_t> outside(static_cast<size_t>(h * w), 0);
  auto push_if_open = [&](int64_t y, int64_t x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    int64_t at = y * w + x;
    if (outside[static_cast<size_t>(at)]) return;
    if (comp[static_cast<size_t>(at)] == best) return;
    outside[static_cast<size_t>(at)] = 1;
    queue.push_back(at);
  };
  for (int64_t x = 0; x < w; ++x) {
    push_if_open(0, x);
    push_if_open(h - 1, x);
  }
  for (int64_t y = 0; y < h; ++y) {
    push_if_open(y, 0);
    push_if_open(y, w - 1);
  }
  while (!queue.empty()) {
    int64_t at = queue.front();
    queue.pop_front();
    int64_t y = at / w, x = at % w;
    push_if_open(y - 1, x);
    push_if_open(y + 1, x);
    push_if_open(y, x - 1);
    push_if_open(y, x + 1);
  }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      size_t at = static_cast<size_t>(y * w + x);
      macc[y][x] = (comp[at] == best || !outside[at]) ? 1 : 0;
    }
  return {mask};
}

double iou(const SegMask& a, const SegMask& b) {
  if (!a.hw.defined() || !b.hw.defined() || a.hw.sizes() != b.hw.sizes())
    throw ConfigError("iou: masks must share dimensions");
  auto am = a.hw > 0, bm = b.hw > 0;
  int64_t inter = (am & bm).sum().item<int64_t>();
  int64_t uni = (am | bm).sum().item<int64_t>();
  if (uni == 0) return 1.0;  // two empty shapes are identical
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string IoUReport::to_csv() const {
  std::ostringstream os;
  os << "input_id,style,iou\n";
  os.precision(10);
  for (const auto& r : rows) os << r.input_id << ',' << r.style << ',' << r.value << '\n';
  os << "# mean=" << mean_iou << '\n';
  os << "# min=" << min_iou << '\n';
  return os.str();
}

IoUReport shape_preservation_report(const std::vector<ShapeInput>& inputs,
                                    const ModelParams& params, int64_t styles_per_input,
                                    std::uint64_t seed, const std::array<float, 3>& background,
                                    float tol, const CategoryLabel& c) {
  if (inputs.empty()) throw ConfigError("shape_preservation_report: no inputs");
  if (styles_per_input < 1) throw ConfigError("shape_preservation_report: styles_per_input >= 1");

  std::vector<LatentVector> styles;
  styles.reserve(static_cast<size_t>(styles_per_input));
  for (int64_t j = 0; j < styles_per_input; ++j)
    styles.push_back(LatentVector::standard_normal(
        params.config.latent_dim, mix_seed(seed, {tag64("style"), static_cast<std::uint64_t>(j)})));

  IoUReport report;
  double sum = 0.0;
  double lo = 1.0;
  for (const auto& input : inputs) {
    FeatureMap f = encode(params, input.image);
    for (int64_t j = 0; j < styles_per_input; ++j) {
      Image y = generate(params, f, styles[static_cast<size_t>(j)], c);
      SegMask m = segment_generated(y, background, tol);
      double v = iou(m, input.mask);
      sum += v;
      lo = std::min(lo, v);
      report.rows.push_back({input.id, j, v});
    }
  }
  report.mean_iou = sum / static_cast<double>(report.rows.size());
  report.min_iou = report.rows.empty() ? 0.0 : lo;
  return report;
}

}  // namespace shapegan
