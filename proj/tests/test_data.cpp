#include <torch/torch.h>

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "doctest.h"
#include "shapegan/dataset_io.hpp"
#include "shapegan/image.hpp"
#include "shapegan/synth.hpp"

using namespace shapegan;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("shapegan-data-" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<int64_t> flatten(const std::vector<std::vector<int64_t>>& batches) {
  std::vector<int64_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
  return all;
}

torch::Tensor random_image(int64_t size, uint64_t seed) {
  torch::manual_seed(seed);
  return torch::rand({3, size, size}) * 2.0f - 1.0f;
}

// raw fixture writer; unlike save_image_png it accepts arbitrary dims
void write_png(const fs::path& file, int rows, int cols, uint64_t seed) {
  torch::manual_seed(seed);
  auto hwc = (torch::rand({rows, cols, 3}) * 255).to(torch::kUInt8).contiguous();
  cv::Mat m(rows, cols, CV_8UC3, hwc.data_ptr<uint8_t>());
  fs::create_directories(file.parent_path());
  REQUIRE(cv::imwrite(file.string(), m));
}

SynthSpec tiny_spec(int64_t n, int64_t k, uint64_t seed) {
  SynthSpec spec;
  spec.num_images = n;
  spec.num_categories = k;
  spec.image_size = 32;
  spec.seed = seed;
  return spec;
}

bool datasets_bitwise_equal(const ImageDataset& a, const ImageDataset& b) {
  return torch::equal(a.images, b.images) && torch::equal(a.masks, b.masks) &&
         a.labels == b.labels && a.ids == b.ids && a.category_names == b.category_names;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("epoch batching covers each index exactly once") {
  auto batches = epoch_batches(1000, 64, 5, 0);
  REQUIRE(batches.size() == 16);
  for (std::size_t i = 0; i < 15; ++i) CHECK(batches[i].size() == 64);
  CHECK(batches.back().size() == 40);

  auto all = flatten(batches);
  std::sort(all.begin(), all.end());
  std::vector<int64_t> expect(1000);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
}

TEST_CASE("epoch batching is seeded and epoch-dependent") {
  auto a = flatten(epoch_batches(1000, 64, 1, 0));
  auto b = flatten(epoch_batches(1000, 64, 1, 0));
  CHECK(a == b);

  auto other_seed = flatten(epoch_batches(1000, 64, 2, 0));
  CHECK(a != other_seed);
  auto other_epoch = flatten(epoch_batches(1000, 64, 1, 1));
  CHECK(a != other_epoch);

  // the shuffle is a permutation in every case
  std::sort(other_seed.begin(), other_seed.end());
  std::sort(other_epoch.begin(), other_epoch.end());
  std::sort(a.begin(), a.end());
  CHECK(other_seed == a);
  CHECK(other_epoch == a);
}

TEST_CASE("epoch batching edge shapes and failures") {
  CHECK(epoch_batches(5, 5, 0, 0).size() == 1);
  CHECK(epoch_batches(1, 64, 0, 0).size() == 1);
  auto b = epoch_batches(5, 2, 0, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 2);
  CHECK(b[2].size() == 1);

  CHECK_THROWS_AS(epoch_batches(0, 4, 0, 0), DataError);
  CHECK_THROWS_AS(epoch_batches(10, 0, 0, 0), ConfigError);
}

TEST_CASE("batch stream clamps oversized batches and carries fields") {
  auto ds = synthesize_dataset(tiny_spec(12, 3, 9)).shape_set;  // 6 items
  REQUIRE(ds.size() == 6);

  BatchStream stream(ds, 50, 3);
  CHECK(stream.clamped());
  stream.begin_epoch(0);
  CHECK(stream.batches_per_epoch() == 1);

  auto batch = stream.next();
  REQUIRE(batch.has_value());
  CHECK(batch->size() == 6);
  CHECK_FALSE(stream.next().has_value());

  REQUIRE(batch->masks.defined());
  REQUIRE(batch->labels.defined());
  for (int64_t j = 0; j < batch->size(); ++j) {
    const int64_t src = batch->indices[j];
    CHECK(torch::equal(batch->images[j], ds.images[src]));
    CHECK(torch::equal(batch->masks[j], ds.masks[src]));
    CHECK(batch->labels[j].item<int64_t>() == ds.labels[src]);
  }

  // a fresh epoch re-shuffles from the stream seed, not from global state
  stream.begin_epoch(1);
  auto again = stream.next();
  REQUIRE(again.has_value());
  CHECK(again->indices == epoch_batches(6, 6, 3, 1)[0]);
}

TEST_CASE("synthetic dataset splits and reproduces bitwise") {
  auto r1 = synthesize_dataset(tiny_spec(10, 4, 7));
  auto r2 = synthesize_dataset(tiny_spec(10, 4, 7));
  CHECK(r1.shape_set.size() == 5);
  CHECK(r1.texture_set.size() == 5);
  CHECK(datasets_bitwise_equal(r1.shape_set, r2.shape_set));
  CHECK(datasets_bitwise_equal(r1.texture_set, r2.texture_set));

  auto different = synthesize_dataset(tiny_spec(10, 4, 8));
  CHECK_FALSE(torch::equal(r1.shape_set.images, different.shape_set.images));

  // the two halves are disjoint index ranges of one pool
  std::vector<std::string> ids = r1.shape_set.ids;
  ids.insert(ids.end(), r1.texture_set.ids.begin(), r1.texture_set.ids.end());
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());

  auto odd = synthesize_dataset(tiny_spec(5, 2, 7));
  CHECK(odd.shape_set.size() == 3);
  CHECK(odd.texture_set.size() == 2);

  CHECK_THROWS_AS(synthesize_dataset(tiny_spec(1, 2, 7)), DataError);
}

TEST_CASE("synthetic samples stay inside range and carry labels") {
  auto spec = tiny_spec(16, 4, 21);
  auto r = synthesize_dataset(spec);
  for (const auto* ds : {&r.shape_set, &r.texture_set}) {
    CHECK(ds->images.min().item<float>() >= -1.0f);
    CHECK(ds->images.max().item<float>() <= 1.0f);
    CHECK(ds->num_categories == 4);
    REQUIRE(ds->category_names.size() == 4);
    for (auto l : ds->labels) {
      CHECK(l >= 0);
      CHECK(l < 4);
    }
  }
  CHECK(r.shape_set.category_names[0] == "cat_00");
  CHECK(r.shape_set.category_names[3] == "cat_03");
}

TEST_CASE("synthetic masks are proper subsets of the container interior") {
  auto spec = tiny_spec(8, 3, 33);
  spec.image_size = 64;
  for (int64_t i = 0; i < 8; ++i) {
    auto s = synthesize_sample(spec, i);
    auto mask = s.mask.to(torch::kInt64);
    auto interior = s.container_interior.to(torch::kInt64);
    const auto mask_px = mask.sum().item<int64_t>();
    const auto interior_px = interior.sum().item<int64_t>();
    CHECK(mask_px > 0);
    // no food pixel outside the container interior
    CHECK((mask * (1 - interior)).sum().item<int64_t>() == 0);
    // and the rim region leaves the interior strictly larger
    CHECK(interior_px > mask_px);
  }
}

TEST_CASE("labeled dataset round trips through disk") {
  auto ds = synthesize_dataset(tiny_spec(12, 3, 41)).shape_set;  // 6 items
  auto dir = temp_dir("roundtrip-labeled");
  save_dataset(ds, dir, R"({"note":"fixture"})");

  auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  CHECK(manifest["note"] == "fixture");
  CHECK(manifest["count"] == 6);
  CHECK(manifest["labeled"] == true);

  IngestReport report;
  auto back = load_dataset(dir, &report);
  CHECK(report.errors.empty());
  REQUIRE(back.size() == ds.size());
  CHECK(back.has_labels());
  CHECK(back.has_masks());
  CHECK(back.category_names == ds.category_names);

  // files are written category-major; recover the original order per label
  std::vector<int64_t> orig_by_label[3], back_by_label[3];
  for (int64_t i = 0; i < ds.size(); ++i) orig_by_label[ds.labels[i]].push_back(i);
  for (int64_t i = 0; i < back.size(); ++i) back_by_label[back.labels[i]].push_back(i);
  for (int k = 0; k < 3; ++k) {
    REQUIRE(orig_by_label[k].size() == back_by_label[k].size());
    for (std::size_t j = 0; j < orig_by_label[k].size(); ++j) {
      auto orig = ds.images[orig_by_label[k][j]];
      auto got = back.images[back_by_label[k][j]];
      // png stores 8-bit samples; half a quantisation step in [-1,1]
      CHECK((orig - got).abs().max().item<float>() <= 0.5f / 255.0f * 2.0f + 1e-6f);
      CHECK(torch::equal(ds.masks[orig_by_label[k][j]], back.masks[back_by_label[k][j]]));
    }
  }
}

TEST_CASE("unlabeled dataset stays unlabeled and keeps order") {
  auto ds = synthesize_dataset(tiny_spec(8, 2, 55)).shape_set;
  ds.labels.clear();
  ds.num_categories = 0;
  ds.category_names.clear();
  ds.masks = torch::Tensor();
  ds.validate();

  auto dir = temp_dir("roundtrip-unlabeled");
  save_dataset(ds, dir);
  auto back = load_dataset(dir);
  REQUIRE(back.size() == ds.size());
  CHECK_FALSE(back.has_labels());
  CHECK_FALSE(back.has_masks());
  for (int64_t i = 0; i < ds.size(); ++i) {
    CHECK((ds.images[i] - back.images[i]).abs().max().item<float>() <= 0.5f / 255.0f * 2.0f + 1e-6f);
    CHECK(back.ids[i].find("items/") == 0);
  }
}

TEST_CASE("single image file round trip stays within quantisation") {
  auto dir = temp_dir("png");
  auto img = Image::from_tensor(random_image(32, 17));
  save_image_png(img, dir / "x.png");
  auto back = load_image_file(dir / "x.png", 0);
  CHECK(back.chw.sizes() == img.chw.sizes());
  CHECK((back.chw - img.chw).abs().max().item<float>() <= 0.5f / 255.0f * 2.0f + 1e-6f);

  auto resized = load_image_file(dir / "x.png", 64);
  CHECK(resized.height() == 64);
  CHECK_THROWS_AS(load_image_file(dir / "missing.png", 0), DataError);
}

TEST_CASE("ingest resizes mixed inputs and records junk files") {
  auto dir = temp_dir("ingest-flat");
  write_png(dir / "a.png", 20, 20, 1);
  write_png(dir / "b.png", 50, 37, 2);
  std::ofstream(dir / "junk.png") << "not a png";

  IngestReport report;
  auto ds = ingest_directory(dir, 32, std::nullopt, &report);
  CHECK(ds.size() == 2);
  CHECK(report.loaded == 2);
  REQUIRE(report.errors.size() == 1);
  CHECK(report.errors[0].path.find("junk.png") != std::string::npos);
  CHECK_FALSE(ds.has_labels());
  CHECK(ds.images.sizes() == torch::IntArrayRef({2, 3, 32, 32}));
  CHECK(ds.images.min().item<float>() >= -1.0f);
  CHECK(ds.images.max().item<float>() <= 1.0f);
}

TEST_CASE("ingest maps category directories to sorted labels") {
  auto dir = temp_dir("ingest-cats");
  save_image_png(Image::from_tensor(random_image(32, 3)), dir / "banana" / "0.png");
  save_image_png(Image::from_tensor(random_image(32, 4)), dir / "apple" / "0.png");

  auto ds = ingest_directory(dir, 32);
  REQUIRE(ds.num_categories == 2);
  CHECK(ds.category_names == std::vector<std::string>{"apple", "banana"});
  CHECK(ds.ids[0] == "apple/0");
  CHECK(ds.labels[0] == 0);
  CHECK(ds.labels[1] == 1);

  // a manifest pins a different category order
  std::ofstream(dir / "manifest.json") << R"({"categories":["banana","apple"]})";
  auto pinned = ingest_directory(dir, 32);
  CHECK(pinned.category_names == std::vector<std::string>{"banana", "apple"});
  CHECK(pinned.ids[0] == "banana/0");
  CHECK(pinned.labels[0] == 0);
}

TEST_CASE("ingest failure modes") {
  auto dir = temp_dir("ingest-empty");
  CHECK_THROWS_AS(ingest_directory(dir, 32), DataError);
  CHECK_THROWS_AS(ingest_directory(dir / "nowhere", 32), DataError);
  CHECK_THROWS_AS(ingest_directory(dir, 33), ConfigError);
  CHECK_THROWS_AS(ingest_directory(dir, 0), ConfigError);
  CHECK_THROWS_AS(ingest_directory(dir, -32), ConfigError);
}

TEST_CASE("masked ingest pairs files and substitutes empty masks") {
  auto dir = temp_dir("ingest-masks");
  write_png(dir / "i0.png", 40, 40, 5);
  write_png(dir / "i1.png", 40, 40, 6);
  write_png(dir / "i2.png", 40, 40, 7);

  auto m0 = torch::zeros({40, 40}, torch::kUInt8);
  m0.index_put_({torch::indexing::Slice(8, 32), torch::indexing::Slice(8, 32)}, 1);
  save_mask_png(m0, dir / "masks" / "i0.png");
  save_mask_png(torch::ones({16, 16}, torch::kUInt8), dir / "masks" / "i2.png");  // wrong dims

  IngestReport report;
  auto ds = ingest_directory(dir, 32, std::string("masks"), &report);
  REQUIRE(ds.size() == 2);  // i2 pair dropped
  CHECK(ds.has_masks());
  REQUIRE(report.errors.size() == 1);
  CHECK(report.errors[0].message.find("mismatch") != std::string::npos);

  // i0 keeps a nonempty mask; i1 falls back to all-zero with a warning
  CHECK(ds.masks[0].sum().item<int64_t>() > 0);
  CHECK(ds.masks[1].sum().item<int64_t>() == 0);
  bool warned = false;
  for (const auto& w : report.warnings) warned |= w.message.find("empty mask") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("region extraction crops the exact bounding box") {
  torch::manual_seed(99);
  auto img = Image::from_tensor(torch::rand({3, 64, 64}) * 2.0f - 1.0f);
  auto lm = torch::zeros({64, 64}, torch::kInt64);
  lm.index_put_({torch::indexing::Slice(10, 40), torch::indexing::Slice(10, 30)}, 5);

  auto items = extract_masked_items(img, lm, 32, {0.0f, 0.0f, 0.0f});
  REQUIRE(items.size() == 1);

  auto crop = img.chw.index({torch::indexing::Slice(), torch::indexing::Slice(10, 40),
                             torch::indexing::Slice(10, 30)});
  auto expect = resize_bilinear_chw(crop, 32);
  CHECK(torch::equal(items[0].first.chw, expect));
  CHECK(items[0].second.hw.min().item<uint8_t>() == 1);  // rectangle fills its own box
}

TEST_CASE("region extraction fills outside pixels with the background") {
  auto img = Image::from_tensor(torch::ones({3, 32, 32}));
  auto lm = torch::zeros({32, 32}, torch::kInt64);
  lm.index_put_({4, 4}, 2);
  lm.index_put_({11, 11}, 2);  // bbox rows 4..11, cols 4..11, mostly unlabeled

  const std::array<float, 3> bg = {-0.5f, 0.0f, 0.5f};
  auto items = extract_masked_items(img, lm, 32, bg);
  REQUIRE(items.size() == 1);

  auto crop = img.chw.index({torch::indexing::Slice(), torch::indexing::Slice(4, 12),
                             torch::indexing::Slice(4, 12)});
  auto mcrop = (lm.index({torch::indexing::Slice(4, 12), torch::indexing::Slice(4, 12)}) == 2);
  auto filled = torch::where(mcrop.unsqueeze(0), crop,
                             torch::tensor({bg[0], bg[1], bg[2]}).view({3, 1, 1}));
  CHECK(torch::equal(items[0].first.chw, resize_bilinear_chw(filled, 32)));
}

TEST_CASE("region extraction handles whole-image masks and bad input") {
  auto img = Image::from_tensor(random_image(32, 13));
  auto whole = torch::ones({32, 32}, torch::kInt64);
  auto items = extract_masked_items(img, whole, 32, {0.0f, 0.0f, 0.0f});
  REQUIRE(items.size() == 1);
  CHECK(torch::equal(items[0].first.chw, img.chw));  // native size, full mask: identity
  CHECK(items[0].second.hw.min().item<uint8_t>() == 1);

  // labels come back sorted ascending
  auto lm = torch::zeros({32, 32}, torch::kInt64);
  lm.index_put_({torch::indexing::Slice(0, 8), torch::indexing::Slice(0, 8)}, 9);
  lm.index_put_({torch::indexing::Slice(20, 30), torch::indexing::Slice(20, 30)}, 4);
  auto two = extract_masked_items(img, lm, 32, {0.0f, 0.0f, 0.0f});
  REQUIRE(two.size() == 2);

  CHECK(extract_masked_items(img, torch::zeros({32, 32}, torch::kInt64), 32, {0, 0, 0}).empty());
  CHECK_THROWS_AS(extract_masked_items(img, torch::zeros({16, 16}, torch::kInt64), 32, {0, 0, 0}),
                  DataError);
}

TEST_CASE("mask png round trips binary and label values") {
  auto dir = temp_dir("mask-png");

  auto binary = (torch::rand({24, 24}) > 0.5).to(torch::kUInt8);
  save_mask_png(binary, dir / "binary.png");
  auto raw = load_mask_file(dir / "binary.png");
  // binary masks go to disk scaled to 0/255 for viewability
  CHECK(torch::equal((raw > 0).to(torch::kUInt8), binary));
  CHECK(raw.max().item<int64_t>() == 255);

  auto labels = torch::zeros({10, 10}, torch::kUInt8);
  labels.index_put_({torch::indexing::Slice(0, 3), torch::indexing::Slice()}, 3);
  labels.index_put_({torch::indexing::Slice(7, 10), torch::indexing::Slice()}, 7);
  save_mask_png(labels, dir / "labels.png");
  CHECK(torch::equal(load_mask_file(dir / "labels.png"), labels.to(torch::kInt64)));

  CHECK_THROWS_AS(load_mask_file(dir / "absent.png"), DataError);
}

TEST_CASE("nearest mask resize re-binarizes") {
  auto m = torch::zeros({8, 8}, torch::kUInt8);
  m.index_put_({torch::indexing::Slice(0, 4), torch::indexing::Slice()}, 1);
  auto up = resize_nearest_mask(m, 16);
  CHECK(up.sizes() == torch::IntArrayRef({16, 16}));
  auto vals = std::get<0>(torch::_unique(up.to(torch::kInt64)));
  CHECK(vals.max().item<int64_t>() <= 1);
  CHECK(up.sum().item<int64_t>() == 128);  // top half scales exactly
}

TEST_CASE("grid rendering stitches cells with separators") {
  std::vector<std::vector<torch::Tensor>> grid(2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) grid[r].push_back(torch::full({3, 8, 8}, 0.1f * (r * 3 + c)));

  auto canvas = render_grid(grid).chw;
  CHECK(canvas.sizes() == torch::IntArrayRef({3, 18, 28}));
  // cell (1,2) lands at rows 10..17, cols 20..27
  auto cell = canvas.index({torch::indexing::Slice(), torch::indexing::Slice(10, 18),
                            torch::indexing::Slice(20, 28)});
  CHECK(torch::equal(cell, grid[1][2]));
  CHECK(canvas.index({0, 8, 0}).item<float>() == 1.0f);  // separator row stays white

  grid[1].pop_back();
  CHECK_THROWS_AS(render_grid(grid), DataError);
  CHECK_THROWS_AS(render_grid({{torch::zeros({3, 8, 8}), torch::zeros({3, 4, 4})}}), DataError);
  CHECK_THROWS_AS(render_grid({}), DataError);
}

}  // TEST_SUITE
