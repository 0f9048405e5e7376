#include "shapegan/model.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "shapegan/common.hpp"

namespace shapegan {

using json = nlohmann::ordered_json;

int64_t ModelConfig::halvings() const {
  int64_t n = 0;
  int64_t s = image_size;
  while (s > kFeatureSize) {
    s /= 2;
    ++n;
  }
  return n;
}

void ModelConfig::validate() const {
  int64_t q = image_size / kFeatureSize;
  if (image_size < 32 || image_size % kFeatureSize != 0 || (q & (q - 1)) != 0)
    throw ConfigError("image_size must be 16*2^k with k >= 1, got " + std::to_string(image_size));
  if (num_categories < 0) throw ConfigError("num_categories must be >= 0");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (feature_channels < 1) throw ConfigError("feature_channels must be >= 1");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (channel_cap < base_channels) throw ConfigError("channel_cap must be >= base_channels");
}

std::string ModelConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["num_categories"] = num_categories;
  j["latent_dim"] = latent_dim;
  j["feature_channels"] = feature_channels;
  j["base_channels"] = base_channels;
  j["channel_cap"] = channel_cap;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig cfg;
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    auto geti = [&](const char* key, int64_t fallback) {
      if (!j.contains(key)) return fallback;
      if (!j[key].is_number_integer()) throw ConfigError(std::string("model config field '") + key + "' must be an integer");
      return j[key].get<int64_t>();
    };
    cfg.image_size = geti("image_size", cfg.image_size);
    cfg.num_categories = geti("num_categories", cfg.num_categories);
    cfg.latent_dim = geti("latent_dim", cfg.latent_dim);
    cfg.feature_channels = geti("feature_channels", cfg.feature_channels);
    cfg.base_channels = geti("base_channels", cfg.base_channels);
    cfg.channel_cap = geti("channel_cap", cfg.channel_cap);
    if (j.contains("seed")) {
      if (!j["seed"].is_number()) throw ConfigError("model config field 'seed' must be a number");
      cfg.seed = j["seed"].get<std::uint64_t>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::uint64_t ModelConfig::hash() const { return tag64(to_json().c_str()); }

LatentVector LatentVector::standard_normal(int64_t dim, std::uint64_t seed) {
  return {seeded_normal({dim}, seed)};
}

CategoryLabel CategoryLabel::of(int64_t idx, int64_t k) {
  if (k < 1) throw ConfigError("category label needs num_categories >= 1");
  if (idx < 0 || idx >= k)
    throw ConfigError("category index " + std::to_string(idx) + " out of range [0, " + std::to_string(k) + ")");
  CategoryLabel c;
  c.index = idx;
  c.num_categories = k;
  return c;
}

torch::Tensor CategoryLabel::one_hot() const {
  if (!present()) throw ConfigError("one_hot() on an absent category label");
  auto t = torch::zeros({num_categories}, torch::kFloat32);
  t[*index] = 1.0f;
  return t;
}

torch::Tensor one_hot_batch(const torch::Tensor& labels, int64_t k) {
  if (labels.dim() != 1 || labels.scalar_type() != torch::kInt64)
    throw ConfigError("one_hot_batch expects int64 labels of shape {N}");
  if (k < 1) throw ConfigError("one_hot_batch needs k >= 1");
  if (labels.numel() > 0) {
    auto lo = labels.min().item<int64_t>();
    auto hi = labels.max().item<int64_t>();
    if (lo < 0 || hi >= k) throw ConfigError("label out of range for one_hot_batch");
  }
  return torch::one_hot(labels, k).to(torch::kFloat32);
}

torch::Tensor seeded_normal(const std::vector<int64_t>& shape, std::uint64_t seed) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  auto out = torch::empty({n}, torch::kFloat32);
  float* ptr = out.data_ptr<float>();
  Rng rng(seed);
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (int64_t i = 0; i < n; i += 2) {
    double u1 = 1.0 - rng.uniform();  // (0, 1]
    double u2 = rng.uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    ptr[i] = static_cast<float>(r * std::cos(kTwoPi * u2));
    if (i + 1 < n) ptr[i + 1] = static_cast<float>(r * std::sin(kTwoPi * u2));
  }
  return out.view(shape);
}

namespace {

int64_t gn_groups(int64_t ch) { return std::gcd<int64_t>(ch, 8); }

torch::Tensor normalize_vec(const torch::Tensor& v) {
  return v / (v.norm() + 1e-12);
}

// sigma = u^T W v after one power-iteration step (training) or from the
// stored estimate (eval); u, v are constants for autograd, W keeps its graph.
torch::Tensor sn_sigma(const torch::Tensor& weight, torch::Tensor& u_buf, bool training) {
  auto w = weight.view({weight.size(0), -1});
  torch::Tensor u = u_buf, v;
  {
    torch::NoGradGuard g;
    v = normalize_vec(w.t().matmul(u_buf));
    if (training) {
      u_buf.copy_(normalize_vec(w.matmul(v)));
    }
    u = u_buf.clone();
  }
  return torch::dot(u, w.mv(v));
}

}  // namespace

SNConv2dImpl::SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding)
    : stride_(stride), padding_(padding) {
  weight = register_parameter("weight", torch::randn({out, in, kernel, kernel}) * 0.05);
  bias = register_parameter("bias", torch::zeros({out}));
  u_ = register_buffer("u", normalize_vec(torch::randn({out})));
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  auto sigma = sn_sigma(weight, u_, is_training());
  return torch::conv2d(x, weight / sigma, bias, stride_, padding_);
}

SNLinearImpl::SNLinearImpl(int64_t in, int64_t out, bool with_bias) {
  weight = register_parameter("weight", torch::randn({out, in}) * 0.05);
  if (with_bias) bias = register_parameter("bias", torch::zeros({out}));
  u_ = register_buffer("u", normalize_vec(torch::randn({out})));
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  auto sigma = sn_sigma(weight, u_, is_training());
  return torch::linear(x, weight / sigma, bias);
}

EncoderImpl::EncoderImpl(const ModelConfig& cfg) {
  cfg.validate();
  int64_t n = cfg.halvings();
  int64_t nb = std::min<int64_t>(3, n);
  for (int64_t i = 0; i < n - nb; ++i) body_->push_back(torch::nn::AvgPool2d(2));
  int64_t in = 3;
  for (int64_t i = 0; i < nb; ++i) {
    int64_t out = (i == nb - 1) ? cfg.feature_channels
                                : std::min(cfg.channel_cap, cfg.base_channels << i);
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    body_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(gn_groups(out), out)));
    body_->push_back(torch::nn::ReLU());
    body_->push_back(torch::nn::AvgPool2d(2));
    in = out;
  }
  register_module("body", body_);
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
  return body_->forward(images);
}

GeneratorImpl::GeneratorImpl(const ModelConfig& cfg) {
  cfg.validate();
  conditional_ = cfg.conditional();
  int64_t n = cfg.halvings();
  constexpr int64_t kSideCh = 8;  // channels carried by each projected side input
  z_proj_ = register_module(
      "z_proj", torch::nn::Linear(cfg.latent_dim, kSideCh * kFeatureSize * kFeatureSize));
  int64_t in = cfg.feature_channels + kSideCh;
  if (conditional_) {
    c_proj_ = register_module(
        "c_proj", torch::nn::Linear(torch::nn::LinearOptions(
                                        cfg.num_categories, kSideCh * kFeatureSize * kFeatureSize)
                                        .bias(false)));
    in += kSideCh;
  }
  auto block = [&](int64_t from, int64_t to) {
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(from, to, 3).padding(1)));
    body_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(gn_groups(to), to)));
    body_->push_back(torch::nn::ReLU());
  };
  int64_t w = std::min(cfg.channel_cap, cfg.base_channels << n);
  block(in, w);
  for (int64_t i = 0; i < n; ++i) {
    body_->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    int64_t next = std::min(cfg.channel_cap, cfg.base_channels << (n - 1 - i));
    block(w, next);
    w = next;
  }
  body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 3, 3).padding(1)));
  body_->push_back(torch::nn::Tanh());
  register_module("body", body_);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& f, const torch::Tensor& z,
                                     const torch::Tensor& c_one_hot) {
  int64_t n = f.size(0);
  auto zm = z_proj_->forward(z).view({n, -1, kFeatureSize, kFeatureSize});
  std::vector<torch::Tensor> parts{f, zm};
  if (conditional_) {
    auto cm = c_proj_->forward(c_one_hot).view({n, -1, kFeatureSize, kFeatureSize});
    parts.push_back(cm);
  }
  return body_->forward(torch::cat(parts, 1));
}

DiscriminatorImpl::DiscriminatorImpl(const ModelConfig& cfg) {
  cfg.validate();
  conditional_ = cfg.conditional();
  int64_t in = 3, w = 0;
  for (int64_t s = cfg.image_size, i = 0; s > 4; s /= 2, ++i) {
    w = std::min(cfg.channel_cap, cfg.base_channels << i);
    blocks_->push_back(SNConv2d(in, w, 4, 2, 1));
    blocks_->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    in = w;
  }
  register_module("blocks", blocks_);
  head_ = register_module("head", SNLinear(w, 1, true));
  if (conditional_) embed_ = register_module("embed", SNLinear(cfg.num_categories, w, false));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images,
                                         const torch::Tensor& c_one_hot) {
  auto h = blocks_->forward(images);
  auto phi = h.sum({2, 3});  // global sum pooling
  auto out = head_->forward(phi).squeeze(1);
  if (c_one_hot.defined()) {
    if (!conditional_) throw ConfigError("category given to an unconditional discriminator");
    out = out + (embed_->forward(c_one_hot) * phi).sum(1);
  }
  return out;
}

namespace {

void init_weights(torch::nn::Module& m) {
  torch::NoGradGuard g;
  for (auto& p : m.named_parameters()) {
    auto t = p.value();
    if (t.dim() >= 2 && p.key().ends_with("weight")) {
      double fan_in = static_cast<double>(t.numel()) / static_cast<double>(t.size(0));
      t.normal_(0.0, 1.0 / std::sqrt(fan_in));
    } else if (p.key().ends_with("bias")) {
      // small nonzero biases keep activations off the ReLU kink at init
      t.normal_(0.0, 0.02);
    }
  }
}

void check_images(const torch::Tensor& t, int64_t size, const char* who) {
  if (t.dim() != 4 || t.size(1) != 3 || t.size(2) != size || t.size(3) != size)
    throw ConfigError(std::string(who) + ": expected images of shape {N,3," + std::to_string(size) +
                      "," + std::to_string(size) + "}");
  if (t.scalar_type() != torch::kFloat32)
    throw ConfigError(std::string(who) + ": expected float32 images");
}

}  // namespace

void ModelParams::ensure_optimizers(double lr, double beta1, double beta2) {
  if (opt_d && opt_eg) return;
  auto opts = [&](double l) {
    return torch::optim::AdamOptions(l).betas(std::make_tuple(beta1, beta2));
  };
  opt_d = std::make_shared<torch::optim::Adam>(discriminator->parameters(), opts(lr));
  opt_eg = std::make_shared<torch::optim::Adam>(eg_parameters(), opts(lr));
}

std::vector<torch::Tensor> ModelParams::eg_parameters() const {
  auto ps = encoder->parameters();
  auto gs = generator->parameters();
  ps.insert(ps.end(), gs.begin(), gs.end());
  return ps;
}

void ModelParams::set_lr(double lr) {
  for (auto* opt : {opt_d.get(), opt_eg.get()}) {
    if (!opt) continue;
    for (auto& group : opt->param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  torch::manual_seed(static_cast<int64_t>(cfg.seed));
  ModelParams p;
  p.config = cfg;
  p.encoder = Encoder(cfg);
  p.generator = Generator(cfg);
  p.discriminator = Discriminator(cfg);
  init_weights(*p.encoder);
  init_weights(*p.generator);
  init_weights(*p.discriminator);
  return p;
}

torch::Tensor encode_batch(const ModelParams& p, const torch::Tensor& images) {
  check_images(images, p.config.image_size, "encode");
  Encoder enc = p.encoder;  // shared handle; modules have pointer semantics
  return enc->forward(images);
}

torch::Tensor generate_batch(const ModelParams& p, const torch::Tensor& f, const torch::Tensor& z,
                             const torch::Tensor& c_one_hot) {
  if (f.dim() != 4 || f.size(1) != p.config.feature_channels || f.size(2) != kFeatureSize ||
      f.size(3) != kFeatureSize)
    throw ConfigError("generate: feature map must be {N," + std::to_string(p.config.feature_channels) +
                      ",16,16}");
  if (z.dim() != 2 || z.size(1) != p.config.latent_dim || z.size(0) != f.size(0))
    throw ConfigError("generate: latent batch must be {N," + std::to_string(p.config.latent_dim) + "}");
  if (p.config.conditional()) {
    if (!c_one_hot.defined() || c_one_hot.dim() != 2 || c_one_hot.size(0) != f.size(0) ||
        c_one_hot.size(1) != p.config.num_categories)
      throw ConfigError("generate: conditional model needs one-hot labels of shape {N,K}");
  } else if (c_one_hot.defined()) {
    throw ConfigError("generate: unconditional model got category labels");
  }
  Generator gen = p.generator;
  return gen->forward(f, z, c_one_hot);
}

torch::Tensor discriminate_batch(const ModelParams& p, const torch::Tensor& images,
                                 const torch::Tensor& c_one_hot) {
  check_images(images, p.config.image_size, "discriminate");
  if (c_one_hot.defined()) {
    if (!p.config.conditional())
      throw ConfigError("discriminate: unconditional model got category labels");
    if (c_one_hot.dim() != 2 || c_one_hot.size(0) != images.size(0) ||
        c_one_hot.size(1) != p.config.num_categories)
      throw ConfigError("discriminate: one-hot labels must be {N,K}");
  }
  Discriminator disc = p.discriminator;
  return disc->forward(images, c_one_hot);
}

namespace {

// Run a single-sample forward in eval mode without grad, restoring the
// previous training flag so callers in the middle of training are unaffected.
template <typename M, typename F>
auto eval_scope(M module, F&& fn) {  // holder taken by value: shared handle
  bool was = module->is_training();
  module->eval();
  torch::NoGradGuard g;
  auto out = fn();
  module->train(was);
  return out;
}

}  // namespace

FeatureMap encode(const ModelParams& p, const Image& image) {
  auto f = eval_scope(p.encoder, [&] { return encode_batch(p, image.chw.unsqueeze(0)); });
  return {f.squeeze(0)};
}

Image generate(const ModelParams& p, const FeatureMap& f, const LatentVector& z,
               const CategoryLabel& c) {
  torch::Tensor onehot;
  if (c.present()) {
    if (c.num_categories != p.config.num_categories)
      throw ConfigError("generate: label category count does not match the model");
    onehot = c.one_hot().unsqueeze(0);
  }
  auto y = eval_scope(p.generator, [&] {
    return generate_batch(p, f.chw.unsqueeze(0), z.values.unsqueeze(0), onehot);
  });
  return {y.squeeze(0)};
}

double discriminate(const ModelParams& p, const Image& image, const CategoryLabel& c) {
  torch::Tensor onehot;
  if (c.present()) {
    if (c.num_categories != p.config.num_categories)
      throw ConfigError("discriminate: label category count does not match the model");
    onehot = c.one_hot().unsqueeze(0);
  }
  auto s = eval_scope(p.discriminator,
                      [&] { return discriminate_batch(p, image.chw.unsqueeze(0), onehot); });
  return s.item<double>();
}

void save_checkpoint(const ModelParams& p, const fs::path& file) {
  torch::serialize::OutputArchive root;
  root.write("format", std::string("shapegan-checkpoint-1"));
  std::string cfg_json = p.config.to_json();
  root.write("config", cfg_json);
  root.write("config_hash", static_cast<int64_t>(tag64(cfg_json.c_str())));
  root.write("epoch", p.epoch);
  auto put = [&](const char* key, const std::shared_ptr<torch::nn::Module>& m) {
    torch::serialize::OutputArchive sub;
    m->save(sub);
    root.write(key, sub);
  };
  put("encoder", p.encoder.ptr());
  put("generator", p.generator.ptr());
  put("discriminator", p.discriminator.ptr());
  root.write("has_optim", static_cast<int64_t>(p.opt_d && p.opt_eg ? 1 : 0));
  if (p.opt_d && p.opt_eg) {
    torch::serialize::OutputArchive od, oeg;
    p.opt_d->save(od);
    p.opt_eg->save(oeg);
    root.write("opt_d", od);
    root.write("opt_eg", oeg);
  }
  fs::create_directories(file.parent_path().empty() ? fs::path(".") : file.parent_path());
  root.save_to(file.string());
}

ModelParams load_checkpoint(const fs::path& file) {
  if (!fs::exists(file)) throw DataError("checkpoint not found: " + file.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(file.string());
  } catch (const std::exception& e) {
    throw DataError("unreadable checkpoint " + file.string() + ": " + e.what());
  }
  c10::IValue iv;
  root.read("format", iv);
  if (iv.toStringRef() != "shapegan-checkpoint-1")
    throw DataError("unknown checkpoint format in " + file.string());
  root.read("config", iv);
  std::string cfg_json = iv.toStringRef();
  root.read("config_hash", iv);
  if (iv.toInt() != static_cast<int64_t>(tag64(cfg_json.c_str())))
    throw DataError("checkpoint config hash mismatch (corrupt file?): " + file.string());
  ModelConfig cfg = ModelConfig::from_json(cfg_json);

  ModelParams p;
  p.config = cfg;
  p.encoder = Encoder(cfg);
  p.generator = Generator(cfg);
  p.discriminator = Discriminator(cfg);
  root.read("epoch", iv);
  p.epoch = iv.toInt();
  auto get = [&](const char* key, const std::shared_ptr<torch::nn::Module>& m) {
    torch::serialize::InputArchive sub;
    root.read(key, sub);
    m->load(sub);
  };
  get("encoder", p.encoder.ptr());
  get("generator", p.generator.ptr());
  get("discriminator", p.discriminator.ptr());
  root.read("has_optim", iv);
  if (iv.toInt() == 1) {
    p.ensure_optimizers(1e-4, 0.0, 0.99);  // placeholder options, overwritten by load
    torch::serialize::InputArchive od, oeg;
    root.read("opt_d", od);
    root.read("opt_eg", oeg);
    p.opt_d->load(od);
    p.opt_eg->load(oeg);
  }
  return p;
}

}  // namespace shapegan
