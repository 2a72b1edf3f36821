#include "doctest.h"

#include <map>
#include <set>

#include "cfm/binary_io.hpp"
#include "cfm/error.hpp"
#include "cfm/synth_world.hpp"
#include "test_util.hpp"

using namespace cfm;
using namespace cfm::synth;

TEST_CASE("category table has 80 unique names and a 64/16 split") {
  const auto names = category_names();
  CHECK(names.size() == 80);
  CHECK(std::set<std::string>(names.begin(), names.end()).size() == 80);
  for (int cat = 0; cat < 80; ++cat) CHECK(Concept::from_category(cat).category() == cat);
  CHECK(Concept{synth::Shape::ring, 0, SizeClass::large}.name() == "red large ring");
  const Split& split = default_split();
  CHECK(split.base.size() == 64);
  CHECK(split.novel.size() == 16);
  for (int n : split.novel) CHECK(std::find(split.base.begin(), split.base.end(), n) == split.base.end());
  // Every shape, color and size occurs among the novel categories.
  std::set<int> shapes, colors, sizes;
  for (int n : split.novel) {
    const Concept c = Concept::from_category(n);
    shapes.insert(static_cast<int>(c.shape));
    colors.insert(c.color);
    sizes.insert(static_cast<int>(c.size));
  }
  CHECK(shapes.size() == 5);
  CHECK(colors.size() == 8);
  CHECK(sizes.size() == 2);
}

TEST_CASE("pretrain pairs are deterministic and use the fixed vocabulary") {
  const Scene a = generate_pretrain_pair(42);
  const Scene b = generate_pretrain_pair(42);
  CHECK(a.pixels == b.pixels);
  CHECK(a.caption == b.caption);
  CHECK(generate_pretrain_pair(43).pixels != a.pixels);
  const auto& vocab = Vocabulary::instance();
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Scene sc = generate_pretrain_pair(s);
    CHECK(sc.size == kPretrainImageSize);
    CHECK(!sc.caption.empty());
    for (int id : sc.caption) {
      CHECK(id >= 2);
      CHECK(static_cast<std::size_t>(id) < vocab.size());
    }
  }
}

TEST_CASE("every category appears in at least one of 1000 captions") {
  const auto names = category_names();
  std::set<std::string> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const std::string caption = Vocabulary::instance().detokenize(generate_pretrain_pair(s).caption);
    for (const auto& n : names)
      if (caption.find(n) != std::string::npos) seen.insert(n);
  }
  CHECK(seen.size() == 80);
}

TEST_CASE("named objects are drawn inside their boxes and boxes stay in bounds") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Scene sc = generate_pretrain_pair(s);
    const std::string caption = Vocabulary::instance().detokenize(sc.caption);
    CHECK(!sc.annotations.empty());
    for (const auto& a : sc.annotations) {
      CHECK(a.box.x0 >= 0);
      CHECK(a.box.y0 >= 0);
      CHECK(a.box.x1 <= sc.size);
      CHECK(a.box.y1 <= sc.size);
      CHECK(caption.find(Concept::from_category(a.label).name()) != std::string::npos);
      // The box center pixel is painted for every shape but ring; ring paints its edge midpoint.
      const int cx = static_cast<int>(a.box.x0 + a.box.width() / 2);
      const int cy = static_cast<int>(a.box.y1 - 1);
      const auto* px = &sc.pixels[(static_cast<std::size_t>(cy) * sc.size + cx) * 3];
      CHECK((px[0] > 40 || px[1] > 40 || px[2] > 40));
    }
  }
}

TEST_CASE("train-phase scenes keep novel objects unlabeled") {
  const Split& split = default_split();
  int unlabeled = 0;
  for (std::uint64_t s = 0; s < 300; ++s) {
    const Scene train = generate_detection_scene(s, split, Phase::train);
    const Scene eval = generate_detection_scene(s, split, Phase::eval);
    CHECK(train.pixels == eval.pixels);
    REQUIRE(train.annotations.size() == eval.annotations.size());
    for (std::size_t i = 0; i < eval.annotations.size(); ++i) {
      const auto& e = eval.annotations[i];
      const auto& t = train.annotations[i];
      CHECK(e.label >= 0);
      CHECK((e.membership == Membership::novel) == split.is_novel(e.label));
      if (e.membership == Membership::novel) {
        CHECK(t.label == -1);
        CHECK(t.membership == Membership::unlabeled);
        ++unlabeled;
      } else {
        CHECK(t.label == e.label);
        CHECK(t.membership == Membership::base);
      }
      CHECK(t.box == e.box);
    }
  }
  CHECK(unlabeled > 0);
}

TEST_CASE("per-category frequency over 5000 eval scenes is uniform within 20%") {
  std::vector<int> counts(kNumCategories, 0);
  int total = 0;
  for (std::uint64_t s = 0; s < 5000; ++s) {
    for (const auto& a : generate_detection_scene(s, default_split(), Phase::eval).annotations) {
      ++counts[static_cast<std::size_t>(a.label)];
      ++total;
    }
  }
  const double expected = static_cast<double>(total) / kNumCategories;
  for (int c : counts) {
    CHECK(c >= 0.8 * expected);
    CHECK(c <= 1.2 * expected);
  }
}

TEST_CASE("negative boxes avoid objects") {
  const Scene sc = generate_detection_scene(7, default_split(), Phase::eval);
  const auto negs = sample_negative_boxes(sc, 4, 7);
  CHECK(!negs.empty());
  for (const auto& n : negs)
    for (const auto& a : sc.annotations) CHECK(iou(n, a.box) < 0.2f);
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("vocabulary round-trips and rejects unknown words") {
  const auto& v = Vocabulary::instance();
  const auto ids = v.tokenize("a photo of a red small circle");
  CHECK(v.detokenize(ids) == "a photo of a red small circle");
  CHECK_THROWS_AS(v.tokenize("a purple circle"), DataError);
  for (const auto& t : prompt_templates())
    for (const auto& n : category_names()) CHECK_NOTHROW(v.tokenize(fill_template(t, n)));
  CHECK(fill_template("a photo of a {}", "x") == "a photo of a x");
}

TEST_CASE("image batch normalization") {
  const Scene sc = generate_pretrain_pair(1);
  const ImageBatch batch = to_image_batch({&sc});
  CHECK(batch.count == 1);
  CHECK(batch.pixels.size() == 32 * 32 * 3);
  CHECK(batch.pixels[0] == doctest::Approx((sc.pixels[0] / 255.0 - kPixelMean) / kPixelStd));
}

TEST_CASE("dataset round-trips") {
  SUBCASE("empty") {
    Dataset ds{DatasetKind::pretrain, {}};
    const auto bytes = encode_dataset(ds);
    const Dataset back = decode_dataset(bytes);
    CHECK(back.records.empty());
    CHECK(encode_dataset(back) == bytes);
  }
  SUBCASE("100 records byte-exact through a file") {
    Dataset ds{DatasetKind::detect, {}};
    for (std::uint64_t s = 0; s < 100; ++s) ds.records.push_back(generate_detection_scene(s, default_split(), Phase::train));
    const auto path = test::temp_path("round_trip.cfmd");
    write_dataset(path, ds);
    const Dataset back = read_dataset(path);
    CHECK(back.kind == DatasetKind::detect);
    REQUIRE(back.records.size() == 100);
    CHECK(encode_dataset(back) == io::read_file(path));
    CHECK(back.records[5].pixels == ds.records[5].pixels);
    CHECK(back.records[5].annotations.size() == ds.records[5].annotations.size());
  }
}

TEST_CASE("dataset corruption is reported with the right offset") {
  Dataset ds{DatasetKind::pretrain, {generate_pretrain_pair(1), generate_pretrain_pair(2)}};
  auto bytes = encode_dataset(ds);
  // Header is 4 + 1 + 1 + 8 bytes, then 12 bytes of dims and the pixel payload.
  const std::size_t caption_len_at = 14 + 12 + 32 * 32 * 3;
  auto corrupt = bytes;
  corrupt[caption_len_at + 3] = 0x7f;
  try {
    decode_dataset(corrupt);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == caption_len_at);
  }

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_dataset(bad_version), FormatError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_dataset(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_dataset(trailing), FormatError);
  CHECK_THROWS_AS(read_dataset(test::temp_path("missing.cfmd")), IoError);
}
