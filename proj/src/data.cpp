#include "ssjdn/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>
#include <png.h>

namespace ssjdn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary and tokenization

Vocabulary::Vocabulary() {
  add(std::string(kPadToken));
  add(std::string(kUnknownToken));
}

int Vocabulary::index_of(std::string_view token) const {
  auto it = token_to_index_.find(token);
  return it == token_to_index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token_at(int index) const {
  if (index < 0 || index >= size()) throw Error("vocabulary index out of range: " + std::to_string(index));
  return index_to_token_[index];
}

bool Vocabulary::contains(std::string_view token) const { return token_to_index_.find(token) != token_to_index_.end(); }

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = token_to_index_.emplace(token, size());
  if (inserted) index_to_token_.push_back(token);
  return it->second;
}

std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> tokens;
  std::string current;
  for (char raw : caption) {
    const auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (!std::ispunct(ch)) {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary build_vocabulary(std::span<const std::string> captions, int min_count) {
  if (captions.empty()) throw Error("empty corpus");
  // Count, remembering first appearance for the tie-break.
  std::unordered_map<std::string, std::pair<int, std::size_t>> counts;
  std::size_t position = 0;
  for (const auto& caption : captions) {
    for (auto& token : tokenize(caption)) {
      auto [it, inserted] = counts.try_emplace(token, 0, position++);
      ++it->second.first;
    }
  }
  struct Ranked {
    std::string token;
    int count;
    std::size_t first_seen;
  };
  std::vector<Ranked> ranked;
  for (auto& [token, entry] : counts) {
    if (entry.first >= min_count && token != Vocabulary::kPadToken && token != Vocabulary::kUnknownToken) {
      ranked.push_back({token, entry.first, entry.second});
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    return a.count != b.count ? a.count > b.count : a.first_seen < b.first_seen;
  });
  Vocabulary vocab;
  for (const auto& entry : ranked) vocab.add(entry.token);
  return vocab;
}

EncodedCaption encode_caption(std::string_view caption, const Vocabulary& vocab, int max_len) {
  if (max_len < 1) throw Error("max_len must be >= 1");
  EncodedCaption out;
  out.tokens.assign(max_len, Vocabulary::kPad);
  const auto tokens = tokenize(caption);
  out.length = static_cast<int>(std::min<std::size_t>(tokens.size(), max_len));
  for (int i = 0; i < out.length; ++i) out.tokens[i] = vocab.index_of(tokens[i]);
  return out;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

namespace {

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error("unknown split '" + name + "'");
}

}  // namespace

std::vector<std::string> Dataset::all_captions() const {
  std::vector<std::string> out;
  out.reserve(samples.size() * kCaptionsPerImage);
  for (const auto& s : samples) out.insert(out.end(), s.captions.begin(), s.captions.end());
  return out;
}

void validate_dataset(const Dataset& dataset) {
  if (dataset.num_categories < 1) throw Error("num_categories must be positive");
  std::set<std::string> ids;
  for (const auto& s : dataset.samples) {
    if (static_cast<int>(s.captions.size()) != kCaptionsPerImage) {
      throw Error("sample '" + s.id + "' has " + std::to_string(s.captions.size()) +
                  " captions, expected " + std::to_string(kCaptionsPerImage));
    }
    if (s.category < 0 || s.category >= dataset.num_categories) {
      throw Error("sample '" + s.id + "' has category " + std::to_string(s.category) +
                  " outside [0, " + std::to_string(dataset.num_categories) + ")");
    }
    if (!ids.insert(s.id).second) throw Error("duplicate sample id '" + s.id + "'");
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct ShapeTemplate {
  std::string name;
  std::string plural;
  bool (*inside)(double u, double v);
};

const std::vector<ShapeTemplate>& templates() {
  static const std::vector<ShapeTemplate> table = {
      {"square", "squares", [](double u, double v) { return std::abs(u) <= 0.9 && std::abs(v) <= 0.9; }},
      {"circle", "circles", [](double u, double v) { return u * u + v * v <= 1.0; }},
      {"triangle", "triangles",
       [](double u, double v) { return v >= -0.9 && v <= 0.9 && std::abs(u) <= (v + 0.9) / 1.8; }},
      {"cross", "crosses",
       [](double u, double v) {
         return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
       }},
      {"ring", "rings",
       [](double u, double v) {
         const double r2 = u * u + v * v;
         return r2 <= 1.0 && r2 >= 0.3;
       }},
      {"bar", "bars", [](double u, double v) { return std::abs(u) <= 1.0 && std::abs(v) <= 0.25; }},
      {"l-shape", "l-shapes",
       [](double u, double v) {
         return (u >= -1.0 && u <= -0.35 && std::abs(v) <= 1.0) || (v >= 0.35 && v <= 1.0 && std::abs(u) <= 1.0);
       }},
      {"dot-cluster", "dot-clusters",
       [](double u, double v) {
         for (double cx : {-0.55, 0.55}) {
           for (double cy : {-0.55, 0.55}) {
             if ((u - cx) * (u - cx) + (v - cy) * (v - cy) <= 0.16) return true;
           }
         }
         return false;
       }},
  };
  return table;
}

struct Color {
  const char* name;
  float r, g, b;
};

constexpr Color kColors[] = {
    {"red", 0.90f, 0.15f, 0.15f},   {"green", 0.15f, 0.80f, 0.20f}, {"blue", 0.20f, 0.30f, 0.95f},
    {"yellow", 0.95f, 0.90f, 0.15f}, {"purple", 0.65f, 0.20f, 0.85f}, {"orange", 1.00f, 0.55f, 0.10f},
};

struct SizeBand {
  const char* name;
  double fraction;  // nominal extent as a fraction of image width
};

constexpr SizeBand kSizes[] = {{"small", 0.10}, {"medium", 0.25}, {"large", 0.50}};
constexpr const char* kCountWords[] = {"one", "two", "three"};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

struct Scene {
  int shape = 0;
  int color = 0;
  int size = 0;
  int count = 1;
};

std::vector<std::string> make_captions(const Scene& scene, std::mt19937_64& rng) {
  const auto& shape = templates()[scene.shape];
  const std::string noun = scene.count == 1 ? shape.name : shape.plural;
  const std::string count = kCountWords[scene.count - 1];
  const std::string color = kColors[scene.color].name;
  const std::string size = kSizes[scene.size].name;
  const bool one = scene.count == 1;
  std::vector<std::string> pool = {
      count + " " + size + " " + color + " " + noun + " on a textured background",
      "the image shows " + count + " " + color + " " + noun + " of " + size + " size",
      size + " " + noun + " colored " + color + ", " + count + " in total",
      std::string("there ") + (one ? "is " : "are ") + count + " " + color + " " + noun + " that " +
          (one ? "is " : "are ") + size,
      count + " " + noun + " in " + color + ", " + (one ? "it looks " : "they look ") + size,
      "a gray scene with " + count + " " + size + " " + color + " " + noun,
      "we can see " + count + " " + noun + ", " + size + " and " + color,
  };
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(kCaptionsPerImage);
  return pool;
}

Image render(const Scene& scene, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image image(size, size, 3);

  // Background: gray base with a low-frequency ripple, pixel noise and a few
  // distractor strokes.
  const double base = 0.18 + 0.12 * unit(rng);
  double fx[3], fy[3], ph[3];
  for (int i = 0; i < 3; ++i) {
    fx[i] = (unit(rng) - 0.5) * 0.4;
    fy[i] = (unit(rng) - 0.5) * 0.4;
    ph[i] = unit(rng) * 6.283185307179586;
  }
  std::vector<double> lum(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = base;
      for (int i = 0; i < 3; ++i) v += 0.04 * std::sin(fx[i] * x + fy[i] * y + ph[i]);
      v += (unit(rng) - 0.5) * 0.06;
      lum[static_cast<std::size_t>(y) * size + x] = v;
    }
  }
  const int strokes = 1 + static_cast<int>(unit(rng) * 3);
  for (int s = 0; s < strokes; ++s) {
    const double x0 = unit(rng) * size, y0 = unit(rng) * size;
    const double angle = unit(rng) * 3.141592653589793;
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double len = size * (0.3 + 0.5 * unit(rng));
    for (double t = 0; t < len; t += 0.5) {
      const int x = static_cast<int>(x0 + dx * t), y = static_cast<int>(y0 + dy * t);
      if (x >= 0 && x < size && y >= 0 && y < size) lum[static_cast<std::size_t>(y) * size + x] = 0.45;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const float v = quantize(lum[static_cast<std::size_t>(y) * size + x]);
      for (int ch = 0; ch < 3; ++ch) image.at(y, x, ch) = v;
    }
  }

  const auto& shape = templates()[scene.shape];
  const Color& color = kColors[scene.color];
  for (int i = 0; i < scene.count; ++i) {
    const double extent = size * kSizes[scene.size].fraction * (0.85 + 0.3 * unit(rng));
    const double half = std::max(extent / 2.0, 1.5);
    const double margin = std::min(half, size / 2.0 - 1.0);
    const double cx = margin + unit(rng) * (size - 2 * margin);
    const double cy = margin + unit(rng) * (size - 2 * margin);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - half)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + half)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - half)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + half)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double u = (x + 0.5 - cx) / half;
        const double v = (y + 0.5 - cy) / half;
        if (shape.inside(u, v)) {
          image.at(y, x, 0) = quantize(color.r);
          image.at(y, x, 1) = quantize(color.g);
          image.at(y, x, 2) = quantize(color.b);
        }
      }
    }
  }
  return image;
}

}  // namespace

const std::vector<std::string>& shape_template_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& t : templates()) out.push_back(t.name);
    return out;
  }();
  return names;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  const int available = static_cast<int>(templates().size());
  if (spec.num_categories < 1 || spec.num_categories > available) {
    std::string names;
    for (const auto& n : shape_template_names()) names += (names.empty() ? "" : ", ") + n;
    throw Error("num_categories=" + std::to_string(spec.num_categories) + " but only " +
                std::to_string(available) + " shape templates are available: " + names);
  }
  if (spec.image_size < 32) throw Error("image_size must be >= 32");
  if (spec.num_images < 0) throw Error("num_images must be non-negative");
  if (spec.min_shapes < 1 || spec.max_shapes > 3 || spec.min_shapes > spec.max_shapes) {
    throw Error("shapes per image must satisfy 1 <= min <= max <= 3");
  }

  // Balanced labels, shuffled once by the global seed.
  std::vector<int> labels(spec.num_images);
  for (int i = 0; i < spec.num_images; ++i) labels[i] = i % spec.num_categories;
  std::mt19937_64 label_rng(splitmix64(spec.seed));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  Dataset dataset;
  dataset.num_categories = spec.num_categories;
  dataset.split = spec.split;
  dataset.category_names.assign(shape_template_names().begin(),
                                shape_template_names().begin() + spec.num_categories);
  dataset.samples.resize(spec.num_images);
  for (int i = 0; i < spec.num_images; ++i) {
    std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(i) + 1)));
    Scene scene;
    scene.shape = labels[i];
    scene.color = static_cast<int>(rng() % std::size(kColors));
    scene.size = static_cast<int>(rng() % std::size(kSizes));
    scene.count = spec.min_shapes + static_cast<int>(rng() % (spec.max_shapes - spec.min_shapes + 1));
    Sample& sample = dataset.samples[i];
    char id[32];
    std::snprintf(id, sizeof(id), "img_%05d", i);
    sample.id = id;
    sample.category = scene.shape;
    sample.image = render(scene, spec.image_size, rng);
    sample.captions = make_captions(scene, rng);
  }
  return dataset;
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, double val_fraction) {
  Dataset train, val;
  train.num_categories = val.num_categories = dataset.num_categories;
  train.category_names = val.category_names = dataset.category_names;
  train.split = Split::train;
  val.split = Split::val;
  const auto threshold = static_cast<std::uint64_t>(val_fraction * 10000.0);
  for (const auto& s : dataset.samples) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char ch : s.id) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    (h % 10000 < threshold ? val : train).samples.push_back(s);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Files

Image read_png_rgb(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw Error("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    throw Error("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  Image image(static_cast<int>(png.height), static_cast<int>(png.width), 3);
  for (std::size_t i = 0; i < buffer.size(); ++i) image.data[i] = buffer[i] / 255.0f;
  png_image_free(&png);
  return image;
}

void write_png_rgb(const Image& image, const std::filesystem::path& path) {
  if (image.c != 3) throw Error("write_png_rgb expects 3 channels");
  std::vector<unsigned char> buffer(image.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.w);
  png.height = static_cast<png_uint_32>(image.h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw Error("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

void write_png_gray(const Map2<float>& map, const std::filesystem::path& path) {
  std::vector<unsigned char> buffer(map.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<unsigned char>(std::lround(std::clamp(map.data[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(map.w);
  png.height = static_cast<png_uint_32>(map.h);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw Error("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  validate_dataset(dataset);
  std::filesystem::create_directories(dir / "images");
  json root;
  root["num_categories"] = dataset.num_categories;
  root["split"] = std::string(split_name(dataset.split));
  if (!dataset.category_names.empty()) root["category_names"] = dataset.category_names;
  json samples = json::array();
  for (const auto& s : dataset.samples) {
    const std::string rel = "images/" + s.id + ".png";
    write_png_rgb(s.image, dir / rel);
    samples.push_back({{"id", s.id}, {"image", rel}, {"captions", s.captions}, {"category", s.category}});
  }
  root["samples"] = std::move(samples);
  std::ofstream out(dir / "annotations.json");
  if (!out) throw Error("cannot write " + (dir / "annotations.json").string());
  out << root.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto annotations = dir / "annotations.json";
  std::ifstream in(annotations);
  if (!in) throw Error("missing file: " + annotations.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed " + annotations.string() + ": " + e.what());
  }
  if (!root.is_object() || !root.contains("num_categories") || !root["num_categories"].is_number_integer() ||
      !root.contains("samples") || !root["samples"].is_array()) {
    throw Error("malformed " + annotations.string() + ": expected num_categories and samples");
  }
  Dataset dataset;
  dataset.num_categories = root["num_categories"].get<int>();
  if (root.contains("split")) dataset.split = parse_split(root["split"].get<std::string>());
  if (root.contains("category_names")) {
    dataset.category_names = root["category_names"].get<std::vector<std::string>>();
  }
  std::size_t index = 0;
  for (const auto& record : root["samples"]) {
    const std::string where = "record " + std::to_string(index++);
    if (!record.is_object() || !record.contains("id") || !record["id"].is_string()) {
      throw Error("malformed " + where + ": missing string field 'id'");
    }
    Sample sample;
    sample.id = record["id"].get<std::string>();
    const std::string who = where + " (id '" + sample.id + "')";
    if (!record.contains("image") || !record["image"].is_string()) {
      throw Error("malformed " + who + ": missing string field 'image'");
    }
    if (!record.contains("captions") || !record["captions"].is_array()) {
      throw Error("malformed " + who + ": missing array field 'captions'");
    }
    if (!record.contains("category") || !record["category"].is_number_integer()) {
      throw Error("malformed " + who + ": missing integer field 'category'");
    }
    for (const auto& c : record["captions"]) {
      if (!c.is_string()) throw Error("malformed " + who + ": captions must be strings");
      sample.captions.push_back(c.get<std::string>());
    }
    sample.category = record["category"].get<int>();
    if (static_cast<int>(sample.captions.size()) != kCaptionsPerImage) {
      throw Error("sample '" + sample.id + "' has " + std::to_string(sample.captions.size()) +
                  " captions, expected " + std::to_string(kCaptionsPerImage));
    }
    if (sample.category < 0 || sample.category >= dataset.num_categories) {
      throw Error("sample '" + sample.id + "' has category " + std::to_string(sample.category) +
                  " but num_categories is " + std::to_string(dataset.num_categories));
    }
    sample.image = read_png_rgb(dir / record["image"].get<std::string>());
    dataset.samples.push_back(std::move(sample));
  }
  validate_dataset(dataset);
  return dataset;
}

}  // namespace ssjdn
