#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>

#include "shapegan/image.hpp"

namespace shapegan {

namespace fs = std::filesystem;

// Shape features are always 16x16 spatially; the number of halvings and
// doublings in the networks adapts to the configured image size.
inline constexpr int64_t kFeatureSize = 16;

struct ModelConfig {
  int64_t image_size = 256;
  int64_t num_categories = 0;  // 0 = unconditional
  int64_t latent_dim = 128;
  int64_t feature_channels = 128;  // C'
  int64_t base_channels = 64;
  int64_t channel_cap = 512;
  std::uint64_t seed = 0;

  bool conditional() const { return num_categories > 0; }
  int64_t halvings() const;  // log2(image_size / 16)
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  std::uint64_t hash() const;
  bool operator==(const ModelConfig&) const = default;
};

struct FeatureMap {
  torch::Tensor chw;  // {C', 16, 16} float32
};

struct LatentVector {
  torch::Tensor values;  // {D_z} float32

  static LatentVector standard_normal(int64_t dim, std::uint64_t seed);
};

struct CategoryLabel {
  std::optional<int64_t> index;
  int64_t num_categories = 0;

  static CategoryLabel absent() { return {}; }
  static CategoryLabel of(int64_t idx, int64_t k);
  bool present() const { return index.has_value(); }
  torch::Tensor one_hot() const;  // {K} float32, sums to exactly 1
};

torch::Tensor one_hot_batch(const torch::Tensor& labels, int64_t k);  // {N,K} float32

// Deterministic N(0,1) tensor, Box-Muller over the pinned uniform generator.
// Same (shape, seed) gives the same bits on every platform.
torch::Tensor seeded_normal(const std::vector<int64_t>& shape, std::uint64_t seed);

// Conv/linear with spectral normalization via one power-iteration step per
// training-mode forward; eval reuses the stored estimate.
class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;

 private:
  torch::Tensor u_;
  int64_t stride_, padding_;
};
TORCH_MODULE(SNConv2d);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(int64_t in, int64_t out, bool with_bias);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;

 private:
  torch::Tensor u_;
};
TORCH_MODULE(SNLinear);

// Plain downsampling first, then conv+norm+ReLU+downsample blocks, ending at
// 16x16xC' for any supported input size.
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);  // {N,3,S,S} -> {N,C',16,16}

 private:
  torch::nn::Sequential body_;
};
TORCH_MODULE(Encoder);

// Mirror of the encoder: z (and c when conditional) are projected to 16x16
// maps, concatenated with f, then upsampled back to image resolution.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const ModelConfig& cfg);
  // c_one_hot: {N,K} or undefined for unconditional models
  torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& z,
                        const torch::Tensor& c_one_hot);

 private:
  torch::nn::Linear z_proj_{nullptr};
  torch::nn::Linear c_proj_{nullptr};
  torch::nn::Sequential body_;
  bool conditional_ = false;
};
TORCH_MODULE(Generator);

// Strided spectral-norm conv stack to 4x4, global sum pooling, then a linear
// realism head plus a projection term from the class embedding.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& c_one_hot);  // {N}

 private:
  torch::nn::Sequential blocks_;
  SNLinear head_{nullptr};
  SNLinear embed_{nullptr};
  bool conditional_ = false;
};
TORCH_MODULE(Discriminator);

struct ModelParams {
  ModelConfig config;
  Encoder encoder{nullptr};
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::shared_ptr<torch::optim::Adam> opt_d, opt_eg;
  int64_t epoch = 0;

  void ensure_optimizers(double lr, double beta1, double beta2);
  std::vector<torch::Tensor> eg_parameters() const;
  void set_lr(double lr);
};

ModelParams init_params(const ModelConfig& cfg);

torch::Tensor encode_batch(const ModelParams& p, const torch::Tensor& images);
torch::Tensor generate_batch(const ModelParams& p, const torch::Tensor& f, const torch::Tensor& z,
                             const torch::Tensor& c_one_hot);
torch::Tensor discriminate_batch(const ModelParams& p, const torch::Tensor& images,
                                 const torch::Tensor& c_one_hot);

FeatureMap encode(const ModelParams& p, const Image& image);
Image generate(const ModelParams& p, const FeatureMap& f, const LatentVector& z,
               const CategoryLabel& c);
double discriminate(const ModelParams& p, const Image& image, const CategoryLabel& c);

// Checkpoint container: config echo + hash, epoch, all parameter tensors and
// buffers, and optimizer state when attached. Bit-exact round trip.
void save_checkpoint(const ModelParams& p, const fs::path& file);
ModelParams load_checkpoint(const fs::path& file);

}  // namespace shapegan
