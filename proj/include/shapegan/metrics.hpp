#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "shapegan/image.hpp"
#include "shapegan/model.hpp"

namespace shapegan {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Sample mean and covariance of feature rows {n,d}. Unbiased (1/(n-1)) by
// default; population=true divides by n (used by the set-duplication check).
GaussianStats gaussian_stats(const torch::Tensor& features, bool population = false);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), the square root taken by
// eigendecomposition of the symmetrized product Sa^{1/2} Sb Sa^{1/2}.
// Eigenvalues below -1e-6 * lambda_max raise NumericError; smaller negatives
// clamp to zero, and the result clamps to >= 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int64_t dim() const = 0;
  virtual torch::Tensor extract(const torch::Tensor& images) const = 0;  // {N,3,S,S} -> {N,d}
};

// Small conv classifier over the synthetic categories; its penultimate
// activations are the desk-scale feature space for FID.
struct DeskClassifierConfig {
  int64_t image_size = 64;
  int64_t num_categories = 4;
  int64_t hidden_dim = 64;
  int64_t epochs = 8;
  double lr = 2e-3;
  int64_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

class DeskClassifierImpl : public torch::nn::Module {
 public:
  explicit DeskClassifierImpl(const DeskClassifierConfig& cfg);
  torch::Tensor features(const torch::Tensor& images);  // {N,3,S,S} -> {N,hidden}
  torch::Tensor logits(const torch::Tensor& images);    // {N,K}

 private:
  torch::nn::Sequential body_;
  torch::nn::Linear fc_{nullptr}, head_{nullptr};
};
TORCH_MODULE(DeskClassifier);

struct DeskModel {
  DeskClassifierConfig config;
  DeskClassifier net{nullptr};
};

DeskModel train_desk_classifier(const ImageDataset& train_set, const DeskClassifierConfig& cfg);
double classifier_accuracy(const DeskModel& model, const ImageDataset& eval_set);
torch::Tensor classify(const DeskModel& model, const torch::Tensor& images);  // {N} int64
void save_desk_classifier(const DeskModel& model, const fs::path& file);
DeskModel load_desk_classifier(const fs::path& file);

class DeskExtractor final : public FeatureExtractor {
 public:
  explicit DeskExtractor(DeskModel model) : model_(std::move(model)) {}
  std::string name() const override { return "desk-classifier-v1"; }
  int64_t dim() const override { return model_.config.hidden_dim; }
  torch::Tensor extract(const torch::Tensor& images) const override;

 private:
  mutable DeskModel model_;
};

torch::Tensor extract_features(const FeatureExtractor& extractor, const ImageDataset& set,
                               int64_t batch_size = 64);

double compute_fid(const ImageDataset& generated, const ImageDataset& reference,
                   const FeatureExtractor& extractor);
double fid_from_feature_rows(const torch::Tensor& a, const torch::Tensor& b);

// Precomputed features: text file, header line "<extractor-name> <dim> <rows>"
// then one whitespace-separated row of dim reals per line.
struct FeatureFile {
  std::string extractor;
  torch::Tensor rows;  // {n,d} float32
};
void save_feature_file(const FeatureFile& f, const fs::path& file);
FeatureFile load_feature_file(const fs::path& file);

struct CategoryFidRow {
  int64_t category = 0;
  std::string name;
  double fid = 0.0;
  int64_t n_generated = 0;
  int64_t n_reference = 0;
  bool skipped = false;
  std::string note;
};

struct PerCategoryFid {
  std::vector<CategoryFidRow> rows;
  double pooled = 0.0;
  std::string to_csv() const;
};

// One FID per category plus the pooled all-category value. A category with
// fewer than two images on either side becomes a warning row, not an error.
PerCategoryFid per_category_fid(const ImageDataset& generated, const ImageDataset& reference,
                                const FeatureExtractor& extractor);

// Background-distance threshold, then largest 4-connected component, then
// hole filling. background is in the image's own [-1,1] scale.
SegMask segment_generated(const Image& image, const std::array<float, 3>& background, float tol);

double iou(const SegMask& a, const SegMask& b);  // empty vs empty := 1.0

struct IoURow {
  std::string input_id;
  int64_t style = 0;
  double value = 0.0;
};

struct IoUReport {
  std::vector<IoURow> rows;
  double mean_iou = 0.0;
  double min_iou = 0.0;
  std::string to_csv() const;
};

struct ShapeInput {
  Image image;
  SegMask mask;
  std::string id;
};

// For each input: styles_per_input generations with distinct seeded z (style
// j shares its z across inputs), segmentation, IoU against the stored mask.
// c is Absent for unconditional models or one fixed label.
IoUReport shape_preservation_report(const std::vector<ShapeInput>& inputs,
                                    const ModelParams& params, int64_t styles_per_input,
                                    std::uint64_t seed, const std::array<float, 3>& background,
                                    float tol, const CategoryLabel& c = CategoryLabel::absent());

}  // namespace shapegan
