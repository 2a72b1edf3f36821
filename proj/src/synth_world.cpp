#include "cfm/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cfm/binary_io.hpp"
#include "cfm/error.hpp"
#include "cfm/rng.hpp"

namespace cfm::synth {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{
    {220, 40, 40},    // red
    {40, 190, 60},    // green
    {50, 80, 230},    // blue
    {235, 220, 50},   // yellow
    {210, 60, 200},   // magenta
    {60, 215, 220},   // cyan
    {245, 140, 30},   // orange
    {240, 240, 240},  // white
}};

constexpr std::uint8_t kBackground = 30;
constexpr int kBackgroundNoise = 6;

bool covers(Shape shape, int side, int px, int py) {
  // Pixel-center coordinates relative to the box center, in pixels.
  const double half = side / 2.0;
  const double x = px + 0.5 - half;
  const double y = py + 0.5 - half;
  const double r2 = x * x + y * y;
  switch (shape) {
    case Shape::square:
      return true;
    case Shape::circle:
      return r2 <= half * half;
    case Shape::ring:
      return r2 <= half * half && r2 >= (half * 0.5) * (half * 0.5);
    case Shape::cross:
      return std::abs(x) <= side / 6.0 || std::abs(y) <= side / 6.0;
    case Shape::triangle:
      return std::abs(x) <= (py + 0.5) / side * half;
  }
  return false;
}

std::vector<std::uint8_t> blank_canvas(std::size_t size, Rng& rng) {
  std::vector<std::uint8_t> px(size * size * 3);
  for (auto& v : px) v = static_cast<std::uint8_t>(kBackground + rng.range(-kBackgroundNoise, kBackgroundNoise));
  return px;
}

void paint(std::vector<std::uint8_t>& px, std::size_t size, const Concept& c, int x0, int y0) {
  const int side = kSizePixels[static_cast<std::size_t>(c.size)];
  const auto& rgb = kPalette[c.color];
  for (int py = 0; py < side; ++py)
    for (int qx = 0; qx < side; ++qx) {
      if (!covers(c.shape, side, qx, py)) continue;
      const std::size_t at = (static_cast<std::size_t>(y0 + py) * size + static_cast<std::size_t>(x0 + qx)) * 3;
      px[at] = rgb[0];
      px[at + 1] = rgb[1];
      px[at + 2] = rgb[2];
    }
}

// Places objects of the given categories without overlap (1 px gap); objects
// that do not fit after a bounded number of tries are dropped.
std::vector<Annotation> place(const std::vector<int>& cats, std::size_t size, Rng& rng) {
  std::vector<Annotation> placed;
  for (int cat : cats) {
    const Concept c = Concept::from_category(cat);
    const int side = kSizePixels[static_cast<std::size_t>(c.size)];
    for (int attempt = 0; attempt < 64; ++attempt) {
      const int x0 = rng.range(0, static_cast<int>(size) - side);
      const int y0 = rng.range(0, static_cast<int>(size) - side);
      const Box box{static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x0 + side),
                    static_cast<float>(y0 + side)};
      const Box grown{box.x0 - 1, box.y0 - 1, box.x1 + 1, box.y1 + 1};
      const bool clear = std::none_of(placed.begin(), placed.end(), [&](const Annotation& a) {
        return grown.x0 < a.box.x1 && a.box.x0 < grown.x1 && grown.y0 < a.box.y1 && a.box.y0 < grown.y1;
      });
      if (clear) {
        placed.push_back({box, cat, Membership::unlabeled});
        break;
      }
    }
  }
  return placed;
}

Scene render(std::size_t size, const std::vector<Annotation>& objects, Rng& rng) {
  Scene scene;
  scene.size = static_cast<std::uint32_t>(size);
  scene.pixels = blank_canvas(size, rng);
  for (const auto& a : objects) {
    paint(scene.pixels, size, Concept::from_category(a.label), static_cast<int>(a.box.x0), static_cast<int>(a.box.y0));
  }
  return scene;
}

}  // namespace

int Concept::category() const {
  return (static_cast<int>(color) * 2 + static_cast<int>(size)) * 5 + static_cast<int>(shape);
}

std::string Concept::name() const {
  return std::string(kColorNames[color]) + " " + std::string(kSizeNames[static_cast<std::size_t>(size)]) + " " +
         std::string(kShapeNames[static_cast<std::size_t>(shape)]);
}

Concept Concept::from_category(int category) {
  if (category < 0 || category >= static_cast<int>(kNumCategories)) {
    throw DataError("category id " + std::to_string(category) + " out of range");
  }
  return Concept{static_cast<Shape>(category % 5), static_cast<std::uint8_t>(category / 10),
                 static_cast<SizeClass>((category / 5) % 2)};
}

bool Split::is_novel(int category) const {
  return std::find(novel.begin(), novel.end(), category) != novel.end();
}

const Split& default_split() {
  static const Split split = [] {
    Split s;
    for (int cat = 0; cat < static_cast<int>(kNumCategories); ++cat) {
      const Concept c = Concept::from_category(cat);
      const int key = c.color + 3 * static_cast<int>(c.size) + static_cast<int>(c.shape);
      (key % 5 == 0 ? s.novel : s.base).push_back(cat);
    }
    return s;
  }();
  return split;
}

std::vector<std::string> category_names() {
  std::vector<std::string> names;
  for (int cat = 0; cat < static_cast<int>(kNumCategories); ++cat) names.push_back(Concept::from_category(cat).name());
  return names;
}

float iou(const Box& a, const Box& b) {
  const Box inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const float i = (inter.x1 > inter.x0 && inter.y1 > inter.y0) ? inter.area() : 0.0f;
  const float u = a.area() + b.area() - i;
  return u > 0.0f ? i / u : 0.0f;
}

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<eot>"};
  for (auto w : kColorNames) words_.emplace_back(w);
  for (auto w : kSizeNames) words_.emplace_back(w);
  for (auto w : kShapeNames) words_.emplace_back(w);
  for (const char* w : {"a", "an", "the", "of", "and", "with", "on", "in", "is", "there", "photo", "picture", "image",
                        "showing", "dark", "background", "this", "rendering", "scene", "object", "shape", "some",
                        "next", "to", "it", "contains"}) {
    words_.emplace_back(w);
  }
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw DataError("unknown token '" + std::string(word) + "'");
  return static_cast<int>(it - words_.begin());
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw DataError("token id out of vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? " " : "") + word(ids[i]);
  return out;
}

const std::vector<std::string>& caption_templates() {
  static const std::vector<std::string> t{
      "a photo of {}", "{} on a dark background", "an image showing {}", "there is {}", "a picture with {}",
      "this scene contains {}"};
  return t;
}

const std::vector<std::string>& prompt_templates() {
  static const std::vector<std::string> t{"a photo of a {}", "a picture of the {}", "an image of a {}",
                                          "a rendering of a {}", "this is a {}"};
  return t;
}

std::string fill_template(std::string_view pattern, std::string_view text) {
  const auto at = pattern.find("{}");
  if (at == std::string_view::npos) return std::string(pattern);
  return std::string(pattern.substr(0, at)) + std::string(text) + std::string(pattern.substr(at + 2));
}

Scene generate_pretrain_pair(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5052));
  const int n = rng.range(1, 3);
  std::vector<int> cats;
  for (int i = 0; i < n; ++i) cats.push_back(static_cast<int>(rng.below(kNumCategories)));
  auto objects = place(cats, kPretrainImageSize, rng);
  Scene scene = render(kPretrainImageSize, objects, rng);
  const Split& split = default_split();
  for (auto& a : objects) a.membership = split.is_novel(a.label) ? Membership::novel : Membership::base;
  scene.annotations = objects;

  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::string list;
  for (std::size_t i = 0; i < order.size(); ++i) {
    list += (i ? " and a " : "a ") + Concept::from_category(objects[order[i]].label).name();
  }
  const auto& templates = caption_templates();
  const std::string caption = fill_template(templates[rng.below(templates.size())], list);
  scene.caption = Vocabulary::instance().tokenize(caption);
  return scene;
}

Scene generate_detection_scene(std::uint64_t seed, const Split& split, Phase phase) {
  Rng rng(mix_seed(seed, 0x4445));
  const int n = rng.range(3, 6);
  std::vector<int> cats;
  for (int i = 0; i < n; ++i) cats.push_back(static_cast<int>(rng.below(kNumCategories)));
  auto objects = place(cats, kDetectImageSize, rng);
  Scene scene = render(kDetectImageSize, objects, rng);
  for (auto a : objects) {
    const bool novel = split.is_novel(a.label);
    if (phase == Phase::train && novel) {
      a.label = -1;
      a.membership = Membership::unlabeled;
    } else {
      a.membership = novel ? Membership::novel : Membership::base;
    }
    scene.annotations.push_back(a);
  }
  return scene;
}

std::vector<Box> sample_negative_boxes(const Scene& scene, std::size_t count, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x4e45));
  std::vector<Box> out;
  const int size = static_cast<int>(scene.size);
  for (int attempt = 0; attempt < 500 && out.size() < count; ++attempt) {
    const int side = rng.range(8, 16);
    const int x0 = rng.range(0, size - side);
    const int y0 = rng.range(0, size - side);
    const Box b{static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x0 + side),
                static_cast<float>(y0 + side)};
    const bool clear = std::all_of(scene.annotations.begin(), scene.annotations.end(),
                                   [&](const Annotation& a) { return iou(a.box, b) < 0.2f; });
    if (clear) out.push_back(b);
  }
  return out;
}

ImageBatch to_image_batch(const std::vector<const Scene*>& scenes) {
  if (scenes.empty()) throw ContractError("to_image_batch: no scenes");
  ImageBatch batch;
  batch.count = scenes.size();
  batch.size = scenes.front()->size;
  batch.channels = scenes.front()->channels;
  batch.pixels.reserve(batch.count * batch.size * batch.size * batch.channels);
  for (const Scene* s : scenes) {
    if (s->size != batch.size || s->channels != batch.channels) throw ShapeError("to_image_batch: mixed resolutions");
    for (auto v : s->pixels) batch.pixels.push_back((static_cast<float>(v) / 255.0f - kPixelMean) / kPixelStd);
  }
  return batch;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  io::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CFMD"), 4));
  w.put<std::uint8_t>(kDatasetVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dataset.kind));
  w.put<std::uint64_t>(dataset.records.size());
  for (const Scene& s : dataset.records) {
    if (s.pixels.size() != static_cast<std::size_t>(s.size) * s.size * s.channels) {
      throw DataError("scene pixel buffer does not match its dimensions");
    }
    w.put<std::uint32_t>(s.size);
    w.put<std::uint32_t>(s.size);
    w.put<std::uint32_t>(s.channels);
    w.put_bytes(s.pixels);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.caption.size()));
    for (int id : s.caption) w.put<std::uint32_t>(static_cast<std::uint32_t>(id));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.annotations.size()));
    for (const Annotation& a : s.annotations) {
      w.put<float>(a.box.x0);
      w.put<float>(a.box.y0);
      w.put<float>(a.box.x1);
      w.put<float>(a.box.y1);
      w.put<std::int32_t>(a.label);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(a.membership));
    }
  }
  return w.bytes();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  char magic[4];
  r.get_bytes(std::span<std::uint8_t>(reinterpret_cast<std::uint8_t*>(magic), 4), "magic");
  if (std::string_view(magic, 4) != "CFMD") throw FormatError(0, "bad dataset magic");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kDatasetVersion) throw FormatError(4, "unsupported dataset version " + std::to_string(version));
  const auto kind = r.get<std::uint8_t>("kind");
  if (kind > 1) throw FormatError(5, "unknown dataset kind " + std::to_string(kind));
  Dataset ds;
  ds.kind = static_cast<DatasetKind>(kind);
  // Smallest possible record is 24 bytes (three dims, empty caption and boxes, 0 pixels).
  const auto count = r.get_count<std::uint64_t>(24, "record count");
  ds.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Scene s;
    const auto at = r.offset();
    const auto h = r.get<std::uint32_t>("height");
    const auto wd = r.get<std::uint32_t>("width");
    s.channels = r.get<std::uint32_t>("channels");
    if (h != wd) throw FormatError(at, "non-square image");
    if (h == 0 || s.channels == 0 || static_cast<std::uint64_t>(h) * wd * s.channels > r.remaining()) {
      throw FormatError(at, "image dimensions " + std::to_string(h) + "x" + std::to_string(wd) + "x" +
                                std::to_string(s.channels) + " exceed remaining bytes");
    }
    s.size = h;
    s.pixels.resize(static_cast<std::size_t>(h) * wd * s.channels);
    r.get_bytes(s.pixels, "pixels");
    const auto n_tokens = r.get_count<std::uint32_t>(4, "caption length");
    s.caption.resize(n_tokens);
    for (auto& id : s.caption) id = static_cast<int>(r.get<std::uint32_t>("token id"));
    const auto n_boxes = r.get_count<std::uint32_t>(21, "box count");
    s.annotations.resize(n_boxes);
    for (auto& a : s.annotations) {
      a.box.x0 = r.get<float>("box");
      a.box.y0 = r.get<float>("box");
      a.box.x1 = r.get<float>("box");
      a.box.y1 = r.get<float>("box");
      a.label = r.get<std::int32_t>("label");
      const auto m_at = r.offset();
      const auto m = r.get<std::uint8_t>("membership");
      if (m > 2) throw FormatError(m_at, "bad membership tag " + std::to_string(m));
      a.membership = static_cast<Membership>(m);
    }
    ds.records.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after last record");
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::write_file(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset '" + path.string() + "' not found");
  return decode_dataset(io::read_file(path));
}

}  // namespace cfm::synth
