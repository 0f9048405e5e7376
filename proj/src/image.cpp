#include "shapegan/image.hpp"

#include <algorithm>
#include <numeric>

namespace shapegan {

void validate_image_tensor(const torch::Tensor& chw) {
  if (!chw.defined() || chw.dim() != 3 || chw.size(0) != 3)
    throw DataError("image tensor must be {3,H,W}");
  if (chw.scalar_type() != torch::kFloat32)
    throw DataError("image tensor must be float32");
  const int64_t h = chw.size(1), w = chw.size(2);
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw DataError("image dims must be positive multiples of 32, got " +
                    std::to_string(h) + "x" + std::to_string(w));
  if (!torch::isfinite(chw).all().item<bool>())
    throw DataError("image contains non-finite values");
  const float lo = chw.min().item<float>(), hi = chw.max().item<float>();
  if (lo < -1.0f || hi > 1.0f)
    throw DataError("image values outside [-1,1]: [" + std::to_string(lo) + "," +
                    std::to_string(hi) + "]");
}

void validate_mask_tensor(const torch::Tensor& hw) {
  if (!hw.defined() || hw.dim() != 2) throw DataError("mask tensor must be {H,W}");
  if (hw.scalar_type() != torch::kUInt8) throw DataError("mask tensor must be uint8");
  if ((hw > 1).any().item<bool>()) throw DataError("mask values must be exactly 0 or 1");
}

void ImageDataset::validate() const {
  if (size() == 0) throw DataError("dataset is empty");
  if (images.dim() != 4 || images.size(1) != 3) throw DataError("dataset images must be {N,3,H,W}");
  if (has_masks()) {
    if (masks.size(0) != size() || masks.size(1) != height() || masks.size(2) != width())
      throw DataError("mask dims do not match images");
  }
  if (has_labels()) {
    if (static_cast<int64_t>(labels.size()) != size())
      throw DataError("label count does not match images");
    if (num_categories <= 0) throw DataError("labeled dataset needs num_categories > 0");
    for (auto l : labels)
      if (l < 0 || l >= num_categories) throw DataError("label out of range [0,K)");
  }
  if (static_cast<int64_t>(ids.size()) != size()) throw DataError("id count does not match images");
}

ImageDataset ImageDataset::subset(const std::vector<int64_t>& indices) const {
  ImageDataset out;
  auto idx = torch::tensor(indices, torch::kInt64);
  out.images = images.index_select(0, idx);
  if (has_masks()) out.masks = masks.index_select(0, idx);
  out.num_categories = num_categories;
  out.category_names = category_names;
  for (auto i : indices) {
    if (has_labels()) out.labels.push_back(labels[i]);
    out.ids.push_back(ids[i]);
  }
  return out;
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                std::uint64_t seed, int64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n < 1) throw DataError("cannot batch an empty dataset");
  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix_seed(seed, {tag64("shuffle"), static_cast<std::uint64_t>(epoch)}));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rng.uniform_int(i + 1);
    std::swap(perm[i], perm[j]);
  }
  const int64_t bs = std::min(batch_size, n);
  std::vector<std::vector<int64_t>> out;
  for (int64_t start = 0; start < n; start += bs)
    out.emplace_back(perm.begin() + start, perm.begin() + std::min(start + bs, n));
  return out;
}

Batch take_batch(const ImageDataset& ds, const std::vector<int64_t>& indices) {
  Batch b;
  auto idx = torch::tensor(indices, torch::kInt64);
  b.images = ds.images.index_select(0, idx);
  if (ds.has_masks()) b.masks = ds.masks.index_select(0, idx);
  if (ds.has_labels()) {
    std::vector<int64_t> l;
    l.reserve(indices.size());
    for (auto i : indices) l.push_back(ds.labels[i]);
    b.labels = torch::tensor(l, torch::kInt64);
  }
  b.indices = indices;
  return b;
}

BatchStream::BatchStream(const ImageDataset& ds, int64_t batch_size, std::uint64_t seed)
    : ds_(ds), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (ds.size() == 0) throw DataError("cannot iterate an empty dataset");
  clamped_ = batch_size > ds.size();
}

void BatchStream::begin_epoch(int64_t epoch) {
  current_ = epoch_batches(ds_.size(), batch_size_, seed_, epoch);
  cursor_ = 0;
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= current_.size()) return std::nullopt;
  return take_batch(ds_, current_[cursor_++]);
}

int64_t BatchStream::batches_per_epoch() const {
  const int64_t bs = std::min(batch_size_, ds_.size());
  return (ds_.size() + bs - 1) / bs;
}

}  // namespace shapegan
