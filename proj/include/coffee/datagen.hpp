#pragma once

// Procedural 16x16 benchmark: four base shapes, four overlay attributes (plus
// high-coverage "dominant" variants), jittered rendering, balanced corpora,
// and the deliberately mislabeled fine-tuning sets where an attribute is in
// the pixels but not in the prompt.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coffee/io.hpp"
#include "coffee/rng.hpp"
#include "coffee/tensor.hpp"

namespace coffee {

inline constexpr int kImageSide = 16;
inline constexpr int kImagePixels = kImageSide * kImageSide;

struct ConceptSpec {
  std::string name;
  void (*renderer)(int dx, int dy, float intensity, float* out);
};

namespace shapes {

inline void set_px(float* out, int x, int y, float v) {
  if (x >= 0 && x < kImageSide && y >= 0 && y < kImageSide) out[y * kImageSide + x] = v;
}

inline void circle(int dx, int dy, float inten, float* out) {
  const double cx = 7.5 + dx, cy = 7.5 + dy;
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= 20.25) set_px(out, x, y, inten);
}

inline void square(int dx, int dy, float inten, float* out) {
  for (int y = 4 + dy; y <= 10 + dy; ++y)
    for (int x = 4 + dx; x <= 10 + dx; ++x) set_px(out, x, y, inten);
}

inline void triangle(int dx, int dy, float inten, float* out) {
  for (int r = 0; r <= 7; ++r) {
    const int y = 4 + dy + r;
    const double halfw = 0.5 + 0.45 * r;
    for (int x = 0; x < kImageSide; ++x)
      if (std::abs(x - 7.5 - dx) <= halfw) set_px(out, x, y, inten);
  }
}

inline void cross(int dx, int dy, float inten, float* out) {
  for (int y = 3 + dy; y <= 12 + dy; ++y)
    for (int x = 7 + dx; x <= 9 + dx; ++x) set_px(out, x, y, inten);
  for (int y = 7 + dy; y <= 9 + dy; ++y)
    for (int x = 3 + dx; x <= 12 + dx; ++x) set_px(out, x, y, inten);
}

}  // namespace shapes

inline const std::vector<ConceptSpec>& concepts() {
  static const std::vector<ConceptSpec> kConcepts = {
      {"circle", shapes::circle},
      {"square", shapes::square},
      {"triangle", shapes::triangle},
      {"cross", shapes::cross},
  };
  return kConcepts;
}

inline const ConceptSpec& concept_by_name(const std::string& name) {
  for (const ConceptSpec& c : concepts())
    if (c.name == name) return c;
  throw Error(Error::Kind::config, "unknown concept '" + name + "'");
}

struct AttributeSpec {
  std::string name;
  std::array<uint8_t, kImagePixels> mask;  // 1 where the overlay paints
  float intensity;
  float coverage;  // exact mask count / 256
  bool dominant;
};

namespace overlays {

// Default overlays stay under 30% coverage; dominant variants cover >= 55%
// of the canvas, reproducing the regime where the undesired concept swamps
// the fine-tuning signal.

inline bool frame(int x, int y, bool dom) {
  const int w = dom ? 3 : 1;
  return x < w || x >= kImageSide - w || y < w || y >= kImageSide - w;
}

inline bool stripe(int x, int y, bool dom) {
  if (dom) return x % 2 == 0 || y % 4 == 0;
  (void)y;
  return x % 5 == 2;
}

inline bool dot(int x, int y, bool dom) {
  if (dom) {
    const int cx = x % 4, cy = y % 4;
    return cx >= 1 && cx <= 3 && cy >= 1 && cy <= 3;
  }
  return x % 4 == 2 && y % 4 == 2;
}

inline bool checker(int x, int y, bool dom) {
  if (dom) return ((x / 2 + y / 2) % 2 == 0) || (x % 2 == 0 && y % 2 == 0);
  const bool corner = (x < 4 || x >= 12) && (y < 4 || y >= 12);
  return corner && (x + y) % 2 == 0;
}

}  // namespace overlays

inline std::vector<AttributeSpec> attributes(bool dominant = false) {
  struct Entry {
    const char* name;
    bool (*pred)(int, int, bool);
  };
  static const Entry kEntries[] = {
      {"frame", overlays::frame},
      {"stripe", overlays::stripe},
      {"dot", overlays::dot},
      {"checker", overlays::checker},
  };
  std::vector<AttributeSpec> out;
  for (const Entry& e : kEntries) {
    AttributeSpec a;
    a.name = e.name;
    a.intensity = 0.9f;
    a.dominant = dominant;
    int count = 0;
    for (int y = 0; y < kImageSide; ++y)
      for (int x = 0; x < kImageSide; ++x) {
        const bool on = e.pred(x, y, dominant);
        a.mask[size_t(y * kImageSide + x)] = on ? 1 : 0;
        count += on ? 1 : 0;
      }
    a.coverage = float(count) / float(kImagePixels);
    out.push_back(std::move(a));
  }
  return out;
}

inline AttributeSpec attribute_by_name(const std::string& name, bool dominant = false) {
  for (AttributeSpec& a : attributes(dominant))
    if (a.name == name) return a;
  throw Error(Error::Kind::config, "unknown attribute '" + name + "'");
}

struct LabeledImage {
  std::vector<float> pixels;            // [256] in [0,1]
  std::string base;                     // concept name
  std::vector<std::string> attributes;  // sorted attribute names
  std::string prompt;

  bool has_attribute(const std::string& name) const {
    return std::find(attributes.begin(), attributes.end(), name) != attributes.end();
  }
};

// Rasterize base + overlays with per-image jitter: the base shape moves by
// +/-1 pixel and its intensity wobbles by +/-0.1 around 0.7; overlays are
// composited by elementwise max.
inline LabeledImage render(const ConceptSpec& shape, const std::vector<AttributeSpec>& attrs,
                           uint64_t jitter_seed) {
  Rng rng(jitter_seed);
  const int dx = int(rng.below(3)) - 1;
  const int dy = int(rng.below(3)) - 1;
  const float inten = float(0.7 + rng.uniform(-0.1, 0.1));
  LabeledImage img;
  img.pixels.assign(kImagePixels, 0.0f);
  shape.renderer(dx, dy, inten, img.pixels.data());
  for (const AttributeSpec& a : attrs) {
    for (int i = 0; i < kImagePixels; ++i)
      if (a.mask[size_t(i)] && a.intensity > img.pixels[size_t(i)])
        img.pixels[size_t(i)] = a.intensity;
    img.attributes.push_back(a.name);
  }
  std::sort(img.attributes.begin(), img.attributes.end());
  img.attributes.erase(std::unique(img.attributes.begin(), img.attributes.end()),
                       img.attributes.end());
  img.base = shape.name;
  img.prompt = shape.name;
  for (const std::string& a : img.attributes) img.prompt += " " + a;
  return img;
}

// Balanced pretraining corpus: every concept appears size/4 times, cycling
// through all 16 attribute subsets in complement pairs so combination counts
// stay within +/-1 of size/64 for any size and every attribute decorates
// exactly half of each concept's images whenever 64 divides size.
inline std::vector<LabeledImage> build_pretrain_corpus(int size, uint64_t seed) {
  const int min_size = 16 * int(concepts().size()) * (int(attributes().size()) + 1);
  if (size < min_size)
    throw Error(Error::Kind::contract, "pretrain corpus size must be >= " +
                                           std::to_string(min_size) + ", got " + std::to_string(size));
  const std::vector<AttributeSpec> attrs = attributes();
  // subsets ordered as complement pairs: (S, ~S) adjacent
  std::vector<int> subset_order;
  for (int m = 0; m < 8; ++m) {
    subset_order.push_back(m);
    subset_order.push_back(15 - m);
  }
  struct Combo {
    const ConceptSpec* c;
    int mask;
  };
  std::vector<Combo> combos;
  for (const ConceptSpec& c : concepts())
    for (int m : subset_order) combos.push_back({&c, m});

  std::vector<LabeledImage> out;
  out.reserve(size_t(size));
  const int q = size / int(combos.size());
  const int r = size % int(combos.size());
  uint64_t idx = 0;
  for (int rep = 0; rep < q + 1; ++rep) {
    const int upto = rep < q ? int(combos.size()) : r;
    for (int ci = 0; ci < upto; ++ci) {
      std::vector<AttributeSpec> sel;
      for (int b = 0; b < 4; ++b)
        if (combos[size_t(ci)].mask & (1 << b)) sel.push_back(attrs[size_t(b)]);
      out.push_back(render(*combos[size_t(ci)].c, sel, derive_seed(seed, "corpus-image", idx)));
      ++idx;
    }
  }
  return out;
}

// The entanglement trap: every image shows base + attribute, every prompt
// names only the base.
inline std::vector<LabeledImage> build_finetune_set(const std::string& concept_name,
                                                    const std::string& attribute, int n,
                                                    uint64_t seed, bool dominant = false) {
  if (n < 1) throw Error(Error::Kind::contract, "finetune set needs n >= 1");
  const ConceptSpec& c = concept_by_name(concept_name);
  const AttributeSpec a = attribute_by_name(attribute, dominant);
  std::vector<LabeledImage> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    LabeledImage img = render(c, {a}, derive_seed(seed, "finetune-image", uint64_t(i)));
    img.prompt = concept_name;  // attribute deliberately absent from the prompt
    out.push_back(std::move(img));
  }
  return out;
}

// --- dataset serialization: JSON manifest + raw float32 blob ----------------

inline void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& images) {
  nlohmann::json manifest;
  manifest["count"] = images.size();
  manifest["image_pixels"] = kImagePixels;
  manifest["pixel_file"] = "pixels.f32";
  nlohmann::json rows = nlohmann::json::array();
  std::string blob;
  blob.reserve(images.size() * kImagePixels * 4);
  for (const LabeledImage& img : images) {
    rows.push_back({{"base", img.base}, {"attributes", img.attributes}, {"prompt", img.prompt}});
    append_f32le(blob, img.pixels.data(), img.pixels.size());
  }
  manifest["images"] = std::move(rows);
  std::filesystem::create_directories(dir);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "pixels.f32", blob);
}

inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Error::Kind::io, "bad dataset manifest: " + std::string(e.what()));
  }
  const size_t count = manifest.at("count").get<size_t>();
  const std::string blob = read_file(dir / manifest.at("pixel_file").get<std::string>());
  std::vector<LabeledImage> out;
  out.reserve(count);
  const auto& rows = manifest.at("images");
  if (rows.size() != count)
    throw Error(Error::Kind::io, "dataset manifest count mismatch");
  for (size_t i = 0; i < count; ++i) {
    LabeledImage img;
    img.pixels.assign(kImagePixels, 0.0f);
    read_f32le(blob, i * kImagePixels * 4, img.pixels.data(), kImagePixels, "dataset pixels");
    img.base = rows[i].at("base").get<std::string>();
    img.attributes = rows[i].at("attributes").get<std::vector<std::string>>();
    img.prompt = rows[i].at("prompt").get<std::string>();
    out.push_back(std::move(img));
  }
  return out;
}

inline void export_pgms(const std::filesystem::path& dir, const std::vector<LabeledImage>& images) {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.pgm", i);
    write_pgm(dir / name, images[i].pixels.data(), kImageSide, kImageSide);
  }
}

}  // namespace coffee
