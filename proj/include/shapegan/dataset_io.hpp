#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "shapegan/image.hpp"

namespace shapegan {

namespace fs = std::filesystem;

struct FileRecord {
  std::string path;
  std::string message;
};

struct IngestReport {
  std::vector<FileRecord> errors;
  std::vector<FileRecord> warnings;
  int64_t loaded = 0;
};

// Directory layout: one subdirectory per category (sorted lexicographically
// unless a manifest.json with a "categories" array overrides the order), or
// images directly under `path` for an unlabeled set. Masks, when present,
// live under `mask_subdir` mirroring the image tree with equal filenames.
ImageDataset ingest_directory(const fs::path& path, int64_t target_size,
                              const std::optional<std::string>& mask_subdir = std::nullopt,
                              IngestReport* report = nullptr);

// UEC-FoodPIX style preprocessing: one output per nonzero label in
// `label_mask` ({H,W}, 0 = background, value = item label). Each item is
// cropped to the tight bounding box of its mask, pixels outside the mask are
// filled with `background`, and the crop is resized to target_size.
std::vector<std::pair<Image, SegMask>> extract_masked_items(
    const Image& image, const torch::Tensor& label_mask, int64_t target_size,
    const std::array<float, 3>& background, std::vector<std::string>* warnings = nullptr);

// Persist a dataset in the ingestable layout plus a dataset manifest.
void save_dataset(const ImageDataset& ds, const fs::path& dir,
                  const std::string& manifest_extra_json = "{}");

// Reload a directory written by save_dataset, using its manifest for the
// image size, mask presence, and labeled/unlabeled round trip.
ImageDataset load_dataset(const fs::path& dir, IngestReport* report = nullptr);

Image load_image_file(const fs::path& file, int64_t target_size);  // 0 = native size
void save_image_png(const Image& img, const fs::path& file);
torch::Tensor load_mask_file(const fs::path& file);  // {H,W} int64 label mask, native size
void save_mask_png(const torch::Tensor& hw_labels, const fs::path& file);

torch::Tensor resize_bilinear_chw(const torch::Tensor& chw, int64_t target_size);
torch::Tensor resize_nearest_mask(const torch::Tensor& hw, int64_t target_size);

// Mosaic of images: grid[row][col], each {3,H,W}; 2px separators.
Image render_grid(const std::vector<std::vector<torch::Tensor>>& grid);

}  // namespace shapegan
