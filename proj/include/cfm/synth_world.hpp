#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfm/encoders.hpp"

namespace cfm::synth {

enum class Shape : std::uint8_t { circle, square, triangle, cross, ring };
enum class SizeClass : std::uint8_t { small, large };

inline constexpr std::array<std::string_view, 5> kShapeNames{"circle", "square", "triangle", "cross", "ring"};
inline constexpr std::array<std::string_view, 8> kColorNames{"red",     "green", "blue",   "yellow",
                                                             "magenta", "cyan",  "orange", "white"};
inline constexpr std::array<std::string_view, 2> kSizeNames{"small", "large"};
inline constexpr std::size_t kNumCategories = kShapeNames.size() * kColorNames.size() * kSizeNames.size();

// Object side length in pixels, independent of the canvas resolution.
inline constexpr std::array<int, 2> kSizePixels{8, 14};

enum class Membership : std::uint8_t { base = 0, novel = 1, unlabeled = 2 };

struct Concept {
  Shape shape;
  std::uint8_t color;
  SizeClass size;

  int category() const;
  std::string name() const;  // "color size shape"
  static Concept from_category(int category);
};

// Fixed base/novel partition: 64 base and 16 novel categories. For every
// (color, size) pair exactly one shape is novel, so every attribute value is
// seen during finetuning.
struct Split {
  std::vector<int> base;
  std::vector<int> novel;
  bool is_novel(int category) const;
};
const Split& default_split();
std::vector<std::string> category_names();

struct Box {
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  float width() const { return x1 - x0; }
  float height() const { return y1 - y0; }
  float area() const { return std::max(0.0f, width()) * std::max(0.0f, height()); }
  bool operator==(const Box&) const = default;
};
float iou(const Box& a, const Box& b);

struct Annotation {
  Box box;
  int label = -1;  // category id, −1 for an unlabeled region
  Membership membership = Membership::unlabeled;
  bool operator==(const Annotation&) const = default;
};

// One dataset record: an 8-bit RGB raster, caption token ids (no end token) and
// region annotations.
struct Scene {
  std::uint32_t size = 0;
  std::uint32_t channels = 3;
  std::vector<std::uint8_t> pixels;
  std::vector<int> caption;
  std::vector<Annotation> annotations;
  bool operator==(const Scene&) const = default;
};

// Word-level toy vocabulary; id 0 is padding and id 1 the end-of-text token.
class Vocabulary {
 public:
  static const Vocabulary& instance();
  static constexpr int kPad = 0;
  static constexpr int kEot = 1;

  std::size_t size() const { return words_.size(); }
  int id(std::string_view word) const;  // DataError on unknown words
  const std::string& word(int id) const;
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
};

// Caption patterns for pretraining pairs; "{}" receives the object list.
const std::vector<std::string>& caption_templates();
// Prompt patterns used to embed category names for detection.
const std::vector<std::string>& prompt_templates();
std::string fill_template(std::string_view pattern, std::string_view text);

inline constexpr std::size_t kPretrainImageSize = 32;
inline constexpr std::size_t kDetectImageSize = 64;

// Deterministic scene of 1–3 objects on a 32×32 canvas with a caption naming
// every object. Labels of annotations follow the category table.
Scene generate_pretrain_pair(std::uint64_t seed);

enum class Phase { train, eval };

// Deterministic 64×64 scene of 3–6 objects. Train phase: base objects labeled,
// novel objects kept as unlabeled regions. Eval phase: every object labeled and
// tagged base/novel.
Scene generate_detection_scene(std::uint64_t seed, const Split& split, Phase phase);

// Background boxes (IoU < 0.2 with every annotation) for region training and scoring.
std::vector<Box> sample_negative_boxes(const Scene& scene, std::size_t count, std::uint64_t seed);

// Fixed per-channel normalization applied to 8-bit pixels.
inline constexpr float kPixelMean = 0.5f;
inline constexpr float kPixelStd = 0.25f;
ImageBatch to_image_batch(const std::vector<const Scene*>& scenes);

enum class DatasetKind : std::uint8_t { pretrain = 0, detect = 1 };

struct Dataset {
  DatasetKind kind = DatasetKind::pretrain;
  std::vector<Scene> records;
  bool operator==(const Dataset&) const = default;
};

inline constexpr std::uint8_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace cfm::synth
