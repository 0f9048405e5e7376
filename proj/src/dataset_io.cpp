#include "shapegan/dataset_io.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <fstream>
#include <set>

namespace shapegan {

namespace {

using json = nlohmann::json;

const std::set<std::string> kImageExtensions = {".png", ".jpg", ".jpeg", ".bmp"};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return kImageExtensions.count(ext) > 0;
}

torch::Tensor mat_to_chw(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return (t.permute({2, 0, 1}).to(torch::kFloat32) / 255.0f) * 2.0f - 1.0f;
}

cv::Mat chw_to_mat(const torch::Tensor& chw) {
  auto hwc = ((chw.clamp(-1.0f, 1.0f) + 1.0f) * 0.5f * 255.0f)
                 .round()
                 .clamp(0, 255)
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool dirs_only) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (dirs_only && e.is_directory()) out.push_back(e.path());
    if (!dirs_only && e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

torch::Tensor resize_bilinear_chw(const torch::Tensor& chw, int64_t target_size) {
  if (chw.size(1) == target_size && chw.size(2) == target_size) return chw.clone();
  auto hwc = chw.permute({1, 2, 0}).contiguous();
  cv::Mat src(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_32FC3,
              hwc.data_ptr<float>());
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(target_size), static_cast<int>(target_size)), 0, 0,
             cv::INTER_LINEAR);
  auto t = torch::from_blob(dst.data, {target_size, target_size, 3}, torch::kFloat32).clone();
  // bilinear output is a convex combination; clamp only absorbs float rounding
  return t.permute({2, 0, 1}).clamp(-1.0f, 1.0f).contiguous();
}

torch::Tensor resize_nearest_mask(const torch::Tensor& hw, int64_t target_size) {
  auto src_t = hw.to(torch::kFloat32).contiguous();
  if (hw.size(0) == target_size && hw.size(1) == target_size)
    return (src_t > 0.5f).to(torch::kUInt8);
  cv::Mat src(static_cast<int>(src_t.size(0)), static_cast<int>(src_t.size(1)), CV_32FC1,
              src_t.data_ptr<float>());
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(target_size), static_cast<int>(target_size)), 0, 0,
             cv::INTER_NEAREST);
  auto t = torch::from_blob(dst.data, {target_size, target_size}, torch::kFloat32).clone();
  // re-threshold at 0.5 so masks stay strictly binary
  return (t > 0.5f).to(torch::kUInt8);
}

Image load_image_file(const fs::path& file, int64_t target_size) {
  cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("undecodable image: " + file.string());
  auto chw = mat_to_chw(bgr);
  if (target_size > 0) chw = resize_bilinear_chw(chw, target_size);
  return Image::from_tensor(chw);
}

void save_image_png(const Image& img, const fs::path& file) {
  fs::create_directories(file.parent_path());
  if (!cv::imwrite(file.string(), chw_to_mat(img.chw)))
    throw DataError("failed to write " + file.string());
}

torch::Tensor load_mask_file(const fs::path& file) {
  cv::Mat m = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("undecodable mask: " + file.string());
  auto t = torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).clone();
  return t.to(torch::kInt64);
}

void save_mask_png(const torch::Tensor& hw_labels, const fs::path& file) {
  fs::create_directories(file.parent_path());
  auto t = hw_labels.to(torch::kUInt8).contiguous();
  // binary masks go out as 0/255 so they are viewable; label masks stay raw
  if (t.numel() > 0 && t.max().item<uint8_t>() <= 1) t = (t * 255).contiguous();
  cv::Mat m(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_8UC1, t.data_ptr<uint8_t>());
  if (!cv::imwrite(file.string(), m)) throw DataError("failed to write " + file.string());
}

ImageDataset ingest_directory(const fs::path& path, int64_t target_size,
                              const std::optional<std::string>& mask_subdir,
                              IngestReport* report) {
  if (target_size <= 0 || target_size % 32 != 0)
    throw ConfigError("target_size must be a positive multiple of 32");
  if (!fs::is_directory(path)) throw DataError("not a directory: " + path.string());

  IngestReport local;
  IngestReport& rep = report ? *report : local;

  // category subdirs (mask dir excluded); empty list means a flat unlabeled set
  std::vector<fs::path> cat_dirs;
  for (const auto& d : sorted_entries(path, /*dirs_only=*/true)) {
    if (mask_subdir && d.filename() == *mask_subdir) continue;
    cat_dirs.push_back(d);
  }

  std::vector<std::string> cat_names;
  for (const auto& d : cat_dirs) cat_names.push_back(d.filename().string());

  // optional manifest overrides category order
  const fs::path manifest_path = path / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      json m = json::parse(std::ifstream(manifest_path));
      if (m.contains("categories")) {
        std::vector<std::string> order = m["categories"].get<std::vector<std::string>>();
        std::vector<fs::path> reordered;
        std::vector<std::string> names;
        for (const auto& name : order) {
          auto it = std::find_if(cat_dirs.begin(), cat_dirs.end(),
                                 [&](const fs::path& p) { return p.filename() == name; });
          if (it != cat_dirs.end()) {
            reordered.push_back(*it);
            names.push_back(name);
          }
        }
        for (const auto& d : cat_dirs)
          if (std::find(reordered.begin(), reordered.end(), d) == reordered.end()) {
            reordered.push_back(d);
            names.push_back(d.filename().string());
          }
        cat_dirs = reordered;
        cat_names = names;
      }
    } catch (const json::exception& e) {
      rep.warnings.push_back({manifest_path.string(), std::string("manifest ignored: ") + e.what()});
    }
  }

  struct Entry {
    fs::path img;
    fs::path mask;  // empty when absent
    int64_t label;  // -1 when unlabeled
    std::string id;
  };
  std::vector<Entry> entries;

  auto add_dir = [&](const fs::path& dir, int64_t label, const std::string& prefix) {
    for (const auto& f : sorted_entries(dir, /*dirs_only=*/false)) {
      Entry e{f, {}, label, prefix + f.stem().string()};
      if (mask_subdir) {
        fs::path rel = fs::relative(f, path);
        fs::path mp = path / *mask_subdir / rel;
        if (fs::exists(mp)) e.mask = mp;
      }
      entries.push_back(std::move(e));
    }
  };

  if (cat_dirs.empty()) {
    add_dir(path, -1, "");
  } else {
    for (std::size_t k = 0; k < cat_dirs.size(); ++k)
      add_dir(cat_dirs[k], static_cast<int64_t>(k), cat_names[k] + "/");
  }

  std::vector<torch::Tensor> images, masks;
  std::vector<int64_t> labels;
  std::vector<std::string> ids;
  bool any_mask = false;

  for (const auto& e : entries) {
    cv::Mat bgr = cv::imread(e.img.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
      rep.errors.push_back({e.img.string(), "undecodable image, skipped"});
      continue;
    }
    torch::Tensor mask;
    if (!e.mask.empty()) {
      cv::Mat mm = cv::imread(e.mask.string(), cv::IMREAD_GRAYSCALE);
      if (mm.empty()) {
        rep.errors.push_back({e.mask.string(), "undecodable mask, skipped"});
        continue;
      }
      if (mm.rows != bgr.rows || mm.cols != bgr.cols) {
        rep.errors.push_back({e.mask.string(), "mask/image dimension mismatch, pair skipped"});
        continue;
      }
      auto raw = torch::from_blob(mm.data, {mm.rows, mm.cols}, torch::kUInt8).clone();
      mask = resize_nearest_mask(raw, target_size);
      any_mask = true;
    }
    images.push_back(resize_bilinear_chw(mat_to_chw(bgr), target_size));
    masks.push_back(mask);
    labels.push_back(e.label);
    ids.push_back(e.id);
  }

  if (images.empty()) throw DataError("no images found in " + path.string());
  rep.loaded = static_cast<int64_t>(images.size());

  ImageDataset ds;
  ds.images = torch::stack(images);
  if (any_mask) {
    // items without a mask file get an all-zero mask; recorded as warnings
    for (std::size_t i = 0; i < masks.size(); ++i)
      if (!masks[i].defined()) {
        masks[i] = torch::zeros({target_size, target_size}, torch::kUInt8);
        rep.warnings.push_back({ids[i], "no mask file, empty mask substituted"});
      }
    ds.masks = torch::stack(masks);
  }
  if (!cat_dirs.empty()) {
    ds.labels = std::move(labels);
    ds.num_categories = static_cast<int64_t>(cat_dirs.size());
    ds.category_names = cat_names;
  }
  ds.ids = std::move(ids);
  ds.validate();
  return ds;
}

std::vector<std::pair<Image, SegMask>> extract_masked_items(
    const Image& image, const torch::Tensor& label_mask, int64_t target_size,
    const std::array<float, 3>& background, std::vector<std::string>* warnings) {
  if (label_mask.dim() != 2 || label_mask.size(0) != image.height() ||
      label_mask.size(1) != image.width())
    throw DataError("label mask dims do not match image");

  auto lm = label_mask.to(torch::kInt64);
  auto present = std::get<0>(torch::_unique(lm));
  std::vector<std::pair<Image, SegMask>> out;

  for (int64_t i = 0; i < present.size(0); ++i) {
    const int64_t label = present[i].item<int64_t>();
    if (label == 0) continue;
    auto item = (lm == label);
    auto rows = item.any(1).nonzero().flatten();
    auto cols = item.any(0).nonzero().flatten();
    if (rows.numel() == 0) {
      if (warnings) warnings->push_back("label " + std::to_string(label) + " has empty mask, skipped");
      continue;
    }
    const int64_t r0 = rows[0].item<int64_t>(), r1 = rows[-1].item<int64_t>();
    const int64_t c0 = cols[0].item<int64_t>(), c1 = cols[-1].item<int64_t>();

    auto crop = image.chw.index({torch::indexing::Slice(),
                                 torch::indexing::Slice(r0, r1 + 1),
                                 torch::indexing::Slice(c0, c1 + 1)})
                    .clone();
    auto mcrop = item.index({torch::indexing::Slice(r0, r1 + 1), torch::indexing::Slice(c0, c1 + 1)});
    auto bg = torch::tensor({background[0], background[1], background[2]}).view({3, 1, 1});
    crop = torch::where(mcrop.unsqueeze(0), crop, bg);

    out.emplace_back(Image::from_tensor(resize_bilinear_chw(crop, target_size)),
                     SegMask::from_tensor(resize_nearest_mask(mcrop.to(torch::kUInt8), target_size)));
  }
  return out;
}

void save_dataset(const ImageDataset& ds, const fs::path& dir, const std::string& manifest_extra_json) {
  ds.validate();
  fs::create_directories(dir);
  char name[64];
  for (int64_t i = 0; i < ds.size(); ++i) {
    std::snprintf(name, sizeof(name), "s%06lld.png", static_cast<long long>(i));
    const std::string cat =
        ds.has_labels() ? ds.category_names[ds.labels[i]] : std::string("items");
    save_image_png(ds.image(i), dir / cat / name);
    if (ds.has_masks()) save_mask_png(ds.masks[i], dir / "masks" / cat / name);
  }
  json m = json::parse(manifest_extra_json);
  m["count"] = ds.size();
  m["image_size"] = ds.height();
  m["categories"] = ds.has_labels() ? ds.category_names : std::vector<std::string>{"items"};
  m["labeled"] = ds.has_labels();
  m["has_masks"] = ds.has_masks();
  std::ofstream f(dir / "manifest.json");
  f << m.dump(2) << "\n";
}

ImageDataset load_dataset(const fs::path& dir, IngestReport* report) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path))
    throw DataError("no manifest.json in " + dir.string() + " (not a saved dataset?)");
  int64_t image_size = 0;
  bool has_masks = false, labeled = true;
  try {
    json m = json::parse(std::ifstream(manifest_path));
    image_size = m.at("image_size").get<int64_t>();
    if (m.contains("has_masks")) has_masks = m["has_masks"].get<bool>();
    if (m.contains("labeled")) labeled = m["labeled"].get<bool>();
  } catch (const json::exception& e) {
    throw DataError("bad manifest in " + dir.string() + ": " + e.what());
  }
  auto ds = ingest_directory(dir, image_size,
                             has_masks ? std::optional<std::string>("masks") : std::nullopt,
                             report);
  if (!labeled) {
    ds.labels.clear();
    ds.num_categories = 0;
    ds.category_names.clear();
  }
  return ds;
}

Image render_grid(const std::vector<std::vector<torch::Tensor>>& grid) {
  if (grid.empty() || grid[0].empty()) throw DataError("empty grid");
  const int64_t h = grid[0][0].size(1), w = grid[0][0].size(2);
  const int64_t rows = static_cast<int64_t>(grid.size());
  const int64_t cols = static_cast<int64_t>(grid[0].size());
  const int64_t sep = 2;
  auto canvas = torch::ones({3, rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep});
  for (int64_t r = 0; r < rows; ++r) {
    if (static_cast<int64_t>(grid[r].size()) != cols) throw DataError("ragged grid");
    for (int64_t c = 0; c < cols; ++c) {
      const auto& cell = grid[r][c];
      if (cell.size(1) != h || cell.size(2) != w) throw DataError("grid cells must share dims");
      canvas.index_put_({torch::indexing::Slice(),
                         torch::indexing::Slice(r * (h + sep), r * (h + sep) + h),
                         torch::indexing::Slice(c * (w + sep), c * (w + sep) + w)},
                        cell);
    }
  }
  return Image{canvas};
}

}  // namespace shapegan
