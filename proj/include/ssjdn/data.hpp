#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssjdn/tensor.hpp"

namespace ssjdn {

inline constexpr int kCaptionsPerImage = 5;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnknownToken = "<unk>";

  Vocabulary();

  int size() const { return static_cast<int>(index_to_token_.size()); }
  // Returns kUnknown for tokens not in the vocabulary.
  int index_of(std::string_view token) const;
  const std::string& token_at(int index) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return index_to_token_; }

  // Appends a token if absent; returns its index.
  int add(const std::string& token);

  bool operator==(const Vocabulary& other) const { return index_to_token_ == other.index_to_token_; }

 private:
  std::map<std::string, int, std::less<>> token_to_index_;
  std::vector<std::string> index_to_token_;
};

// Lowercases, strips punctuation and splits on whitespace.
std::vector<std::string> tokenize(std::string_view caption);

// Tokens with frequency >= min_count, ordered by frequency desc, ties by
// first appearance in the corpus. Throws Error("empty corpus") for an empty input.
Vocabulary build_vocabulary(std::span<const std::string> captions, int min_count);

struct EncodedCaption {
  std::vector<int> tokens;  // exactly max_len entries, right-padded with kPad
  int length = 0;           // number of real tokens kept (after truncation)
};

EncodedCaption encode_caption(std::string_view caption, const Vocabulary& vocab, int max_len);

enum class Split { train, val, test };
std::string_view split_name(Split split);

// RGB image, values in [0,1], quantized to multiples of 1/255 so it survives
// an 8-bit PNG round trip unchanged.
using Image = Tensor3<float>;

struct Sample {
  std::string id;
  Image image;
  std::vector<std::string> captions;
  int category = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_categories = 0;
  Split split = Split::train;
  std::vector<std::string> category_names;  // optional, may be empty

  std::size_t size() const { return samples.size(); }
  std::vector<std::string> all_captions() const;
};

// Throws Error naming the offending sample on any invariant violation.
void validate_dataset(const Dataset& dataset);

struct SyntheticSpec {
  int num_images = 400;
  int image_size = 64;
  int num_categories = 8;
  int min_shapes = 1;
  int max_shapes = 3;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

// Names of the shape templates, in category-index order.
const std::vector<std::string>& shape_template_names();

Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

// Writes annotations.json and images/<id>.png under dir.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Deterministic partition by a stable hash of the sample id.
std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, double val_fraction);

// PNG helpers (8-bit). Grayscale maps are written from values in [0,1].
Image read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const Image& image, const std::filesystem::path& path);
void write_png_gray(const Map2<float>& map, const std::filesystem::path& path);

}  // namespace ssjdn
