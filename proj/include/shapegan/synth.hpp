#pragma once

#include <array>
#include <string>
#include <vector>

#include "shapegan/image.hpp"

namespace shapegan {

// Recipe for a fully ground-truthed procedural dataset: images of textured
// food-like blobs inside a rimmed container on a flat background. Identical
// specs (seed included) produce bit-identical datasets.
struct SynthSpec {
  int64_t num_images = 2000;
  int64_t num_categories = 4;
  int64_t image_size = 64;
  std::uint64_t seed = 0;
  std::array<float, 3> background_color = {0.70f, 0.70f, 0.70f};
  std::vector<std::string> container_shapes = {"circle", "ellipse", "rounded-rectangle"};
  std::vector<std::string> texture_families;  // one per category; empty = default cycle
  std::vector<std::string> category_names;    // empty = cat_00, cat_01, ...

  void validate() const;
  std::string to_json() const;
  static SynthSpec from_json(const std::string& text);

  std::vector<std::string> resolved_families() const;
  std::vector<std::string> resolved_category_names() const;
};

struct SynthSample {
  torch::Tensor image;               // {3,S,S} float32
  torch::Tensor mask;                // {S,S} uint8, union of blob interiors
  torch::Tensor container_interior;  // {S,S} uint8, pixels strictly inside the rim
  int64_t label = 0;
  std::string id;
};

// Pure function of (spec, index); index ranges over the generated pool.
SynthSample synthesize_sample(const SynthSpec& spec, int64_t index);

struct SynthResult {
  ImageDataset shape_set;    // first ceil(n/2) samples
  ImageDataset texture_set;  // remaining floor(n/2) samples
};

SynthResult synthesize_dataset(const SynthSpec& spec);

}  // namespace shapegan
