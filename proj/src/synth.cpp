#include "shapegan/synth.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>

namespace shapegan {

namespace {

using json = nlohmann::json;

constexpr double kPi = 3.14159265358979323846;
constexpr double kRimHalf = 0.75;       // rim band is ~1.5px wide
constexpr double kBlobRimGap = 2.0;     // blobs stay this far inside the rim band

const std::set<std::string> kKnownShapes = {"circle", "ellipse", "rounded-rectangle"};
const std::vector<std::string> kDefaultFamilies = {"stripes", "dots", "checker", "grain"};

struct Palette {
  std::array<float, 3> a, b;
};

const Palette kPalettes[8] = {
    {{0.65f, -0.55f, -0.55f}, {0.10f, -0.80f, -0.80f}},   // red
    {{-0.55f, -0.25f, 0.70f}, {-0.80f, -0.65f, 0.15f}},   // blue
    {{-0.45f, 0.55f, -0.45f}, {-0.75f, 0.05f, -0.70f}},   // green
    {{0.60f, 0.10f, -0.55f}, {0.05f, -0.45f, -0.80f}},    // amber
    {{0.35f, -0.55f, 0.60f}, {-0.15f, -0.80f, 0.10f}},    // purple
    {{-0.55f, 0.45f, 0.50f}, {-0.80f, -0.05f, -0.05f}},   // teal
    {{0.65f, -0.45f, 0.35f}, {0.15f, -0.75f, -0.20f}},    // magenta
    {{0.25f, 0.35f, -0.60f}, {-0.25f, -0.10f, -0.85f}},   // olive
};

// Guarantee some channel keeps both palette endpoints >= 0.4 away from the
// background on the same side, so every convex mix of the pair stays
// separable from the background by thresholding.
Palette contrast_palette(int64_t category, const std::array<float, 3>& bg) {
  Palette p = kPalettes[category % 8];
  const int roll = static_cast<int>((category / 8) % 3);
  if (roll) {
    Palette q = p;
    for (int c = 0; c < 3; ++c) {
      q.a[c] = p.a[(c + roll) % 3];
      q.b[c] = p.b[(c + roll) % 3];
    }
    p = q;
  }
  for (int c = 0; c < 3; ++c) {
    const float lo = std::min(p.a[c], p.b[c]), hi = std::max(p.a[c], p.b[c]);
    if (hi <= bg[c] - 0.4f || lo >= bg[c] + 0.4f) return p;
  }
  // push channel 1 to whichever side of the background has room
  const float target = bg[1] >= 0.0f ? std::max(-1.0f, bg[1] - 0.9f) : std::min(1.0f, bg[1] + 0.9f);
  p.a[1] = target;
  p.b[1] = std::clamp(target + (bg[1] >= 0.0f ? -0.1f : 0.1f), -1.0f, 1.0f);
  return p;
}

std::array<float, 3> rim_color(const std::array<float, 3>& bg) {
  const float lum = (bg[0] + bg[1] + bg[2]) / 3.0f;
  const float v = lum >= 0.0f ? std::max(-1.0f, lum - 0.8f) : std::min(1.0f, lum + 0.8f);
  return {v, v, v};
}

// Signed distance to the container boundary, positive inside. Concave over
// the plane for all three shapes, so superlevel sets are convex.
struct Container {
  std::function<double(double, double)> sdf;
};

Container make_container(const std::string& kind, int64_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  const double jx = rng.uniform(-0.03, 0.03) * s, jy = rng.uniform(-0.03, 0.03) * s;
  const double cx = s / 2.0 + jx, cy = s / 2.0 + jy;
  Container c;
  if (kind == "circle") {
    const double r = rng.uniform(0.36, 0.44) * s;
    c.sdf = [=](double x, double y) { return r - std::hypot(x - cx, y - cy); };
  } else if (kind == "ellipse") {
    const double a = rng.uniform(0.33, 0.45) * s, b = rng.uniform(0.33, 0.45) * s;
    const double m = std::min(a, b);
    c.sdf = [=](double x, double y) {
      const double rho = std::sqrt(((x - cx) / a) * ((x - cx) / a) + ((y - cy) / b) * ((y - cy) / b));
      return (1.0 - rho) * m;
    };
  } else {  // rounded-rectangle
    const double hx = rng.uniform(0.30, 0.38) * s, hy = rng.uniform(0.30, 0.38) * s;
    const double rc = 0.12 * s;
    c.sdf = [=](double x, double y) {
      const double qx = std::abs(x - cx) - (hx - rc), qy = std::abs(y - cy) - (hy - rc);
      const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
      const double inside = std::min(std::max(qx, qy), 0.0);
      return -(outside + inside - rc);
    };
  }
  return c;
}

struct Blob {
  double cx, cy, r0;
  std::array<double, 3> amp;    // harmonics k = 2,3,4
  std::array<double, 3> phase;
};

bool blob_contains(const Blob& b, double x, double y) {
  const double dx = x - b.cx, dy = y - b.cy;
  const double d = std::hypot(dx, dy);
  if (d > 1.35 * b.r0) return false;
  const double theta = std::atan2(dy, dx);
  double r = 1.0;
  for (int k = 0; k < 3; ++k) r += b.amp[k] * std::cos((k + 2) * theta + b.phase[k]);
  return d <= b.r0 * r;
}

uint64_t pixel_hash(std::uint64_t seed, int64_t index, int64_t x, int64_t y) {
  return mix_seed(seed, {tag64("grain"), static_cast<std::uint64_t>(index),
                         (static_cast<std::uint64_t>(x) << 24) ^ static_cast<std::uint64_t>(y)});
}

}  // namespace

void SynthSpec::validate() const {
  if (num_images < 2) throw DataError("num_images < 2: cannot split into two sets");
  if (num_categories < 1) throw ConfigError("num_categories must be >= 1");
  if (image_size < 32 || image_size % 32 != 0)
    throw ConfigError("image_size must be a positive multiple of 32");
  if (container_shapes.empty()) throw ConfigError("container_shapes must be nonempty");
  for (const auto& s : container_shapes)
    if (!kKnownShapes.count(s)) throw ConfigError("unknown container shape: " + s);
  if (!texture_families.empty() &&
      static_cast<int64_t>(texture_families.size()) != num_categories)
    throw ConfigError("texture_families count must equal num_categories");
  for (const auto& f : texture_families)
    if (std::find(kDefaultFamilies.begin(), kDefaultFamilies.end(), f) == kDefaultFamilies.end())
      throw ConfigError("unknown texture family: " + f);
  if (!category_names.empty() &&
      static_cast<int64_t>(category_names.size()) != num_categories)
    throw ConfigError("category_names count must equal num_categories");
  for (float v : background_color)
    if (v < -1.0f || v > 1.0f) throw ConfigError("background_color outside [-1,1]");
}

std::vector<std::string> SynthSpec::resolved_families() const {
  if (!texture_families.empty()) return texture_families;
  std::vector<std::string> out;
  for (int64_t k = 0; k < num_categories; ++k) out.push_back(kDefaultFamilies[k % 4]);
  return out;
}

std::vector<std::string> SynthSpec::resolved_category_names() const {
  if (!category_names.empty()) return category_names;
  std::vector<std::string> out;
  char buf[32];
  for (int64_t k = 0; k < num_categories; ++k) {
    std::snprintf(buf, sizeof(buf), "cat_%02lld", static_cast<long long>(k));
    out.emplace_back(buf);
  }
  return out;
}

std::string SynthSpec::to_json() const {
  json j;
  j["num_images"] = num_images;
  j["num_categories"] = num_categories;
  j["image_size"] = image_size;
  j["seed"] = seed;
  j["background_color"] = background_color;
  j["container_shapes"] = container_shapes;
  j["texture_families"] = resolved_families();
  j["category_names"] = resolved_category_names();
  return j.dump(2);
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid synth spec JSON: ") + e.what());
  }
  SynthSpec s;
  try {
    if (j.contains("num_images")) s.num_images = j["num_images"].get<int64_t>();
    if (j.contains("num_categories")) s.num_categories = j["num_categories"].get<int64_t>();
    if (j.contains("image_size")) s.image_size = j["image_size"].get<int64_t>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("background_color")) s.background_color = j["background_color"].get<std::array<float, 3>>();
    if (j.contains("container_shapes")) s.container_shapes = j["container_shapes"].get<std::vector<std::string>>();
    if (j.contains("texture_families")) s.texture_families = j["texture_families"].get<std::vector<std::string>>();
    if (j.contains("category_names")) s.category_names = j["category_names"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid synth spec field: ") + e.what());
  }
  return s;
}

SynthSample synthesize_sample(const SynthSpec& spec, int64_t index) {
  spec.validate();
  const int64_t S = spec.image_size;
  const double sd = static_cast<double>(S);
  Rng rng(mix_seed(spec.seed, {tag64("sample"), static_cast<std::uint64_t>(index)}));

  const auto& shapes = spec.container_shapes;
  Container cont = make_container(shapes[rng.uniform_int(static_cast<int64_t>(shapes.size()))], S, rng);

  // sdf sampled at pixel centers
  std::vector<double> sdf(S * S);
  int64_t rim_area = 0;
  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x) {
      const double v = cont.sdf(x + 0.5, y + 0.5);
      sdf[y * S + x] = v;
      if (std::abs(v) <= kRimHalf) ++rim_area;
    }

  auto candidates_for = [&](double margin) {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < S * S; ++i)
      if (sdf[i] >= margin) out.push_back(i);
    return out;
  };

  const int64_t n_blobs = 1 + rng.uniform_int(3);
  std::vector<uint8_t> food(S * S, 0);
  double scale = 1.0;
  int64_t food_area = 0;

  // grow blobs until the food cluster clearly out-weighs the rim band, so
  // largest-component segmentation lands on the food
  for (int attempt = 0; attempt < 6; ++attempt) {
    std::fill(food.begin(), food.end(), 0);
    std::vector<Blob> blobs;
    Rng brng(mix_seed(spec.seed, {tag64("blobs"), static_cast<std::uint64_t>(index),
                                  static_cast<std::uint64_t>(attempt)}));
    for (int64_t b = 0; b < n_blobs; ++b) {
      double r0 = brng.uniform(0.24, 0.30) * sd * scale;
      std::vector<int64_t> cand;
      for (int shrink = 0; shrink < 8; ++shrink) {
        cand = candidates_for(kRimHalf + std::max(2.0, 0.04 * sd) + 0.7 * r0);
        if (!cand.empty()) break;
        r0 *= 0.85;
      }
      if (cand.empty()) continue;

      Blob blob;
      blob.r0 = r0;
      if (blobs.empty()) {
        const int64_t pick = cand[brng.uniform_int(static_cast<int64_t>(cand.size()))];
        blob.cx = static_cast<double>(pick % S) + 0.5;
        blob.cy = static_cast<double>(pick / S) + 0.5;
      } else {
        // anchor to an existing blob so the union stays one connected cluster
        bool placed = false;
        for (int tries = 0; tries < 20 && !placed; ++tries) {
          const Blob& anchor = blobs[brng.uniform_int(static_cast<int64_t>(blobs.size()))];
          const double ang = brng.uniform(0.0, 2.0 * kPi);
          const double d = brng.uniform(0.2, 0.95) * 0.7 * (anchor.r0 + r0);
          const double px = anchor.cx + d * std::cos(ang), py = anchor.cy + d * std::sin(ang);
          const int64_t ix = static_cast<int64_t>(px), iy = static_cast<int64_t>(py);
          if (ix >= 0 && ix < S && iy >= 0 && iy < S &&
              sdf[iy * S + ix] >= kRimHalf + std::max(2.0, 0.04 * sd) + 0.7 * r0) {
            blob.cx = px;
            blob.cy = py;
            placed = true;
          }
        }
        if (!placed) {
          blob.cx = blobs[0].cx;
          blob.cy = blobs[0].cy;
        }
      }
      double total = 0.0;
      for (int k = 0; k < 3; ++k) {
        blob.amp[k] = brng.uniform(0.0, 0.15);
        blob.phase[k] = brng.uniform(0.0, 2.0 * kPi);
        total += blob.amp[k];
      }
      if (total > 0.3)
        for (int k = 0; k < 3; ++k) blob.amp[k] *= 0.3 / total;
      blobs.push_back(blob);
    }

    for (const auto& blob : blobs) {
      const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(blob.cx - 1.4 * blob.r0));
      const int64_t x1 = std::min<int64_t>(S - 1, static_cast<int64_t>(blob.cx + 1.4 * blob.r0));
      const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(blob.cy - 1.4 * blob.r0));
      const int64_t y1 = std::min<int64_t>(S - 1, static_cast<int64_t>(blob.cy + 1.4 * blob.r0));
      for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x)
          if (sdf[y * S + x] >= kRimHalf + kBlobRimGap && blob_contains(blob, x + 0.5, y + 0.5))
            food[y * S + x] = 1;
    }
    food_area = std::count(food.begin(), food.end(), uint8_t{1});
    if (food_area > static_cast<int64_t>(1.15 * static_cast<double>(rim_area)) && food_area > 0) break;
    scale *= 1.25;
  }

  // paint
  const int64_t label = index % spec.num_categories;
  const Palette pal = contrast_palette(label, spec.background_color);
  const auto rim_c = rim_color(spec.background_color);
  const std::string family = spec.resolved_families()[label];

  const double ang = rng.uniform(0.0, kPi);
  const double period = rng.uniform(0.065, 0.11) * sd;
  const double phase = rng.uniform(0.0, 1.0);

  auto image = torch::empty({3, S, S}, torch::kFloat32);
  auto mask = torch::zeros({S, S}, torch::kUInt8);
  auto interior = torch::zeros({S, S}, torch::kUInt8);
  auto img_a = image.accessor<float, 3>();
  auto mask_a = mask.accessor<uint8_t, 2>();
  auto int_a = interior.accessor<uint8_t, 2>();

  const double ca = std::cos(ang), sa = std::sin(ang);
  for (int64_t y = 0; y < S; ++y) {
    for (int64_t x = 0; x < S; ++x) {
      const double v = sdf[y * S + x];
      std::array<float, 3> px = spec.background_color;
      if (std::abs(v) <= kRimHalf) px = rim_c;
      if (v > 0) int_a[y][x] = 1;
      if (food[y * S + x]) {
        mask_a[y][x] = 1;
        const double u = (x + 0.5) * ca + (y + 0.5) * sa;
        const double w = -(x + 0.5) * sa + (y + 0.5) * ca;
        if (family == "stripes") {
          const double t = u / period + phase;
          px = (t - std::floor(t)) < 0.5 ? pal.a : pal.b;
        } else if (family == "dots") {
          const double fu = u / period - std::floor(u / period + 0.5);
          const double fv = w / period - std::floor(w / period + 0.5);
          px = (std::hypot(fu, fv) < 0.33) ? pal.a : pal.b;
        } else if (family == "checker") {
          const auto cxq = static_cast<int64_t>(std::floor(u / period + phase));
          const auto cyq = static_cast<int64_t>(std::floor(w / period));
          px = ((cxq + cyq) & 1) ? pal.a : pal.b;
        } else {  // grain
          const double t =
              static_cast<double>(pixel_hash(spec.seed, index, x, y) >> 11) * 0x1.0p-53;
          for (int c = 0; c < 3; ++c)
            px[c] = static_cast<float>(pal.a[c] * t + pal.b[c] * (1.0 - t));
        }
      }
      for (int c = 0; c < 3; ++c) img_a[c][y][x] = px[c];
    }
  }

  SynthSample out;
  out.image = image;
  out.mask = mask;
  out.container_interior = interior;
  out.label = label;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%06lld", static_cast<long long>(index));
  out.id = buf;
  return out;
}

SynthResult synthesize_dataset(const SynthSpec& spec) {
  spec.validate();
  const int64_t n = spec.num_images;
  const int64_t n_shape = (n + 1) / 2;
  const auto cat_names = spec.resolved_category_names();

  auto build = [&](int64_t begin, int64_t end) {
    ImageDataset ds;
    std::vector<torch::Tensor> images, masks;
    for (int64_t i = begin; i < end; ++i) {
      auto s = synthesize_sample(spec, i);
      images.push_back(s.image);
      masks.push_back(s.mask);
      ds.labels.push_back(s.label);
      ds.ids.push_back(s.id);
    }
    ds.images = torch::stack(images);
    ds.masks = torch::stack(masks);
    ds.num_categories = spec.num_categories;
    ds.category_names = cat_names;
    ds.validate();
    return ds;
  };

  SynthResult out;
  out.shape_set = build(0, n_shape);
  out.texture_set = build(n_shape, n);
  return out;
}

}  // namespace shapegan
