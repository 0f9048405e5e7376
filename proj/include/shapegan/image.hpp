#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

#include "shapegan/common.hpp"

namespace shapegan {

// All rasters live in [-1, 1] as float32 CHW tensors. One conversion site
// (dataset_io) maps files to this range.
void validate_image_tensor(const torch::Tensor& chw);
void validate_mask_tensor(const torch::Tensor& hw);

struct Image {
  torch::Tensor chw;  // {3, H, W} float32 in [-1, 1]

  int64_t height() const { return chw.size(1); }
  int64_t width() const { return chw.size(2); }

  static Image from_tensor(torch::Tensor t) {
    validate_image_tensor(t);
    return Image{std::move(t)};
  }
};

struct SegMask {
  torch::Tensor hw;  // {H, W} uint8, values exactly 0 or 1

  int64_t height() const { return hw.size(0); }
  int64_t width() const { return hw.size(1); }
  int64_t area() const { return hw.sum().item<int64_t>(); }

  static SegMask from_tensor(torch::Tensor t) {
    validate_mask_tensor(t);
    return SegMask{std::move(t)};
  }
};

// An immutable in-memory dataset. Images share one {N,3,H,W} tensor; masks
// and labels are optional and apply to every item when present.
struct ImageDataset {
  torch::Tensor images;                     // {N, 3, H, W} float32
  torch::Tensor masks;                      // {N, H, W} uint8, or undefined
  std::vector<int64_t> labels;              // empty when unlabeled
  int64_t num_categories = 0;               // 0 == unlabeled
  std::vector<std::string> ids;             // per-item identifiers
  std::vector<std::string> category_names;  // size K when labeled

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t height() const { return images.size(2); }
  int64_t width() const { return images.size(3); }
  bool has_masks() const { return masks.defined(); }
  bool has_labels() const { return !labels.empty(); }

  Image image(int64_t i) const { return Image{images[i]}; }
  SegMask mask(int64_t i) const { return SegMask{masks[i]}; }

  void validate() const;
  ImageDataset subset(const std::vector<int64_t>& indices) const;
};

struct Batch {
  torch::Tensor images;          // {B, 3, H, W}
  torch::Tensor masks;           // {B, H, W} or undefined
  torch::Tensor labels;          // {B} int64 or undefined
  std::vector<int64_t> indices;  // dataset indices in batch order

  int64_t size() const { return images.size(0); }
};

// Seeded permutation batching. The index order for an epoch is a pure
// function of (n, batch_size, seed, epoch); the final short batch is kept.
std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                std::uint64_t seed, int64_t epoch);

Batch take_batch(const ImageDataset& ds, const std::vector<int64_t>& indices);

class BatchStream {
 public:
  BatchStream(const ImageDataset& ds, int64_t batch_size, std::uint64_t seed);

  void begin_epoch(int64_t epoch);
  std::optional<Batch> next();

  int64_t batches_per_epoch() const;
  // true when batch_size exceeded the dataset size and was clamped
  bool clamped() const { return clamped_; }

 private:
  const ImageDataset& ds_;
  int64_t batch_size_;
  std::uint64_t seed_;
  bool clamped_ = false;
  std::vector<std::vector<int64_t>> current_;
  std::size_t cursor_ = 0;
};

}  // namespace shapegan
