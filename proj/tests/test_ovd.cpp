#include <cmath>
#include <fstream>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/ops.hpp"
#include "cfm/ovd_scoring.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cfm;
using namespace cfm::ovd;
using cfm::test::random_tensor;
using cfm::test::to_vec;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.vit.width = 16;
  cfg.vit.heads = 2;
  cfg.vit.depth = 1;
  cfg.text.width = 16;
  cfg.text.heads = 2;
  cfg.text.depth = 1;
  return cfg;
}

Tokenizer vocab_tokenizer() {
  return [](std::string_view s) { return synth::Vocabulary::instance().tokenize(s); };
}

// Hand-built space: 4 categories (0, 1 base; 2, 3 novel) over d = 6.
CategorySpace toy_space(const Tensor& embeddings, const Tensor& background) {
  CategorySpace s;
  s.names = {"a", "b", "c", "d"};
  s.base = {0, 1};
  s.novel = {2, 3};
  s.embeddings = embeddings;
  s.background = background;
  return s;
}

double dot_row(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += static_cast<double>(a.at(i, c)) * b.at(j, c);
  return s;
}

}  // namespace

TEST_CASE("category space from template means") {
  const CfmModel model(small_model(), 1);
  const std::vector<std::string> names{"red small circle", "blue large ring", "white small cross"};
  const auto tok = vocab_tokenizer();

  const std::vector<std::string> one{"a photo of a {}"};
  const CategorySpace s1 = build_category_space(names, {0, 1}, {2}, one, model.text, tok);
  const Tensor direct = ops::l2_normalize(model.text.encode(std::vector<std::vector<int>>{tok("a photo of a blue large ring")}));
  CHECK(test::max_abs_diff(s1.embeddings.data().subspan(16, 16), direct.data()) < 1e-6);

  const std::vector<std::string> dup{"a photo of a {}", "a photo of a {}", "a photo of a {}"};
  const CategorySpace sd = build_category_space(names, {0, 1}, {2}, dup, model.text, tok);
  CHECK(test::max_abs_diff(sd.embeddings.data(), s1.embeddings.data()) < 1e-6);

  const std::vector<std::string> three{"a photo of a {}", "this is a {}", "a rendering of a {}"};
  const CategorySpace s3 = build_category_space(names, {0, 1}, {2}, three, model.text, tok);
  for (std::size_t c = 0; c < names.size(); ++c) {
    std::vector<double> mean(16, 0.0);
    for (const auto& t : three) {
      const Tensor e = model.text.encode(std::vector<std::vector<int>>{tok(synth::fill_template(t, names[c]))});
      double n = 0.0;
      for (float v : e.data()) n += static_cast<double>(v) * v;
      for (std::size_t j = 0; j < 16; ++j) mean[j] += e.data()[j] / std::sqrt(n) / 3.0;
    }
    const double norm = std::sqrt(std::inner_product(mean.begin(), mean.end(), mean.begin(), 0.0));
    for (std::size_t j = 0; j < 16; ++j) CHECK(std::abs(s3.embeddings.at(c, j) - mean[j] / norm) < 1e-6);
  }
  const Tensor bg = ops::l2_normalize(model.text.encode(std::vector<std::vector<int>>{tok("background")}));
  CHECK(to_vec(s3.background) == to_vec(bg));

  CHECK_THROWS_AS(build_category_space({"purple blob"}, {0}, {}, one, model.text, tok), DataError);
  CHECK_THROWS_AS(build_category_space(names, {0, 1}, {1}, one, model.text, tok), ContractError);
  CHECK_THROWS_AS(build_category_space(names, {0}, {}, {}, model.text, tok), ContractError);
}

TEST_CASE("detection score") {
  std::vector<float> eye(4 * 6, 0.0f);
  for (int i = 0; i < 4; ++i) eye[i * 6 + i] = 1.0f;
  std::vector<float> bgv(6, 0.0f);
  bgv[5] = 1.0f;
  const CategorySpace space = toy_space(Tensor({4, 6}, eye), Tensor({1, 6}, bgv));
  const Tensor region({1, 6}, {0, 0, 1, 0, 0, 0});
  const Tensor p = detection_score(region, space, Phase::test, 0.1f);
  CHECK(p.shape() == Shape{1, 5});
  CHECK(std::max_element(p.data().begin(), p.data().end()) - p.data().begin() == 2);

  const Tensor emb = ops::l2_normalize(random_tensor({4, 6}, 1));
  const Tensor bg = ops::l2_normalize(random_tensor({1, 6}, 2));
  const CategorySpace rs = toy_space(emb, bg);
  const Tensor r = ops::l2_normalize(random_tensor({3, 6}, 3));
  const float tau = 0.2f;
  for (Phase phase : {Phase::train, Phase::test}) {
    const Tensor ps = detection_score(r, rs, phase, tau);
    const auto cats = rs.categories(phase);
    REQUIRE(ps.cols() == cats.size() + 1);
    for (std::size_t i = 0; i < 3; ++i) {
      double sum = 0.0, denom = 0.0;
      std::vector<double> logits;
      for (int c : cats) logits.push_back(dot_row(r, i, emb, static_cast<std::size_t>(c)) / tau);
      logits.push_back(dot_row(r, i, bg, 0) / tau);
      for (double l : logits) denom += std::exp(l);
      for (std::size_t k = 0; k < logits.size(); ++k) {
        CHECK(std::abs(ps.at(i, k) - std::exp(logits[k]) / denom) < 1e-6);
        sum += ps.at(i, k);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }

  // Test-phase p restricted to the base coordinates and renormalized is not
  // the train-phase p: the latter keeps background mass.
  const Tensor train = detection_score(r, rs, Phase::train, tau);
  const Tensor test = detection_score(r, rs, Phase::test, tau);
  const double base_mass = test.at(0, 0) + test.at(0, 1);
  const double diff = std::abs(test.at(0, 0) / base_mass - train.at(0, 0)) +
                      std::abs(test.at(0, 1) / base_mass - train.at(0, 1));
  CHECK(diff > 1e-3);
}

TEST_CASE("RoI pooling geometry") {
  const std::size_t image = 64, grid = 8, t = 64;
  const Tensor features = random_tensor({2 * t, 5}, 4);

  const std::vector<Region> whole{{1, {0, 0, 64, 64}}};
  const Tensor pooled = roi_pool(features, whole, image, grid);
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < t; ++i) mean += features.at(t + i, c);
    CHECK(std::abs(pooled.at(0, c) - mean / t) < 1e-5);
  }

  // Cells (row 2..3, col 1..4) in pixels: x 8..40, y 16..32.
  const std::vector<Region> cells{{0, {8, 16, 40, 32}}};
  const Tensor cp = roi_pool(features, cells, image, grid);
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (std::size_t r = 2; r < 4; ++r)
      for (std::size_t q = 1; q < 5; ++q) mean += features.at(r * grid + q, c);
    CHECK(std::abs(cp.at(0, c) - mean / 8.0) < 1e-5);
  }

  for (const synth::Box& b : {synth::Box{3, 5, 17, 19}, synth::Box{50, 50, 64, 64}, synth::Box{0, 0, 1, 1}}) {
    const auto w = roi_weights(b, image, grid);
    double total = 0.0;
    for (const auto& s : w) total += s.weight;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK_THROWS_AS(roi_weights({5, 5, 5, 10}, image, grid), GeometryError);
  CHECK_THROWS_AS(roi_weights({60, 5, 70, 10}, image, grid), GeometryError);
}

TEST_CASE("VLM score sums to one and has no background") {
  const CategorySpace space = toy_space(ops::l2_normalize(random_tensor({4, 6}, 1)), ops::l2_normalize(random_tensor({1, 6}, 2)));
  const Tensor z = vlm_score(random_tensor({3, 6}, 5), space, 0.1f);
  CHECK(z.shape() == Shape{3, 4});
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += z.at(i, k);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("ensemble score and objectness") {
  const std::vector<float> p{0.1f, 0.5f, 0.3f, 0.05f};
  const std::vector<float> z{0.4f, 0.2f, 0.1f, 0.3f};
  const bool base_only[4] = {false, false, false, false};
  const bool all_novel[4] = {true, true, true, true};
  const bool mixed[4] = {false, false, true, true};

  CHECK(ensemble_score(p, z, base_only, 1.0, 0.3) == p);
  for (double a : {0.0, 0.2, 0.7})
    for (double b : {0.0, 0.65, 1.0}) {
      const auto s = ensemble_score(p, p, mixed, a, b);
      for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(p[i]).epsilon(1e-6));
    }
  const auto transfer = ensemble_score(p, z, all_novel, 0.0, 0.65);
  for (std::size_t i = 0; i < 4; ++i) CHECK(transfer[i] == doctest::Approx(std::pow(z[i], 0.35) * std::pow(p[i], 0.65)).epsilon(1e-6));

  // Relabeling base↔novel keeps the argmax when α = β.
  const auto s1 = ensemble_score(p, z, mixed, 0.4, 0.4);
  const auto s2 = ensemble_score(p, z, base_only, 0.4, 0.4);
  CHECK(std::max_element(s1.begin(), s1.end()) - s1.begin() == std::max_element(s2.begin(), s2.end()) - s2.begin());

  // Monotone in each coordinate of p and z.
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> pp(4), zz(4);
    for (auto& v : pp) v = static_cast<float>(rng.uniform());
    for (auto& v : zz) v = static_cast<float>(rng.uniform());
    const auto before = ensemble_score(pp, zz, mixed, 0.2, 0.65);
    const std::size_t k = rng.below(4);
    auto p_up = pp;
    p_up[k] += 0.1f;
    auto z_up = zz;
    z_up[k] += 0.1f;
    CHECK(ensemble_score(p_up, zz, mixed, 0.2, 0.65)[k] >= before[k]);
    CHECK(ensemble_score(pp, z_up, mixed, 0.2, 0.65)[k] >= before[k]);
  }

  const std::vector<float> neg{-0.1f, 0.5f, 0.3f, 0.3f};
  CHECK_THROWS_AS(ensemble_score(neg, z, mixed, 0.2, 0.65), DomainError);
  CHECK_THROWS_AS(ensemble_score(p, z, mixed, 1.2, 0.65), DomainError);

  CHECK(fuse_objectness(p, 1.0f) == p);
  for (float v : fuse_objectness(p, 0.0f)) CHECK(v == 0.0f);
  const auto half = fuse_objectness(p, 0.5f);
  for (std::size_t i = 0; i < 4; ++i) CHECK(half[i] == p[i] * 0.5f);
  for (float o : {0.01f, 0.3f, 0.9f}) {
    const auto f = fuse_objectness(s1, o);
    CHECK(std::max_element(f.begin(), f.end()) - f.begin() == std::max_element(s1.begin(), s1.end()) - s1.begin());
  }
  CHECK_THROWS_AS(fuse_objectness(p, 1.5f), DomainError);
}

TEST_CASE("VLM backbone selection") {
  ModelConfig cfg = small_model();
  CfmModel model(cfg, 2);
  const auto frozen_path = test::temp_path("frozen_vlm.cfmw");
  write_checkpoint(frozen_path, model.params());
  model.image.set_resolution(64, PeResize::interpolate);
  const DetectorHead head(cfg.vit.width);

  std::vector<synth::Scene> scenes;
  for (std::uint64_t s = 0; s < 2; ++s) scenes.push_back(synth::generate_detection_scene(s, synth::default_split(), synth::Phase::eval));
  const ImageBatch images = synth::to_image_batch({&scenes[0], &scenes[1]});
  std::vector<Region> regions;
  for (std::size_t i = 0; i < 2; ++i)
    for (const auto& a : scenes[i].annotations) regions.push_back({i, a.box});

  auto z_from = [&](const VlmBackbone& b) {
    return to_vec(roi_pool(backbone_features(b.encoder(), images), regions, 64, 8));
  };
  const VlmBackbone fin = VlmBackbone::select(frozen_path, model.image, VlmSource::finetuned);
  const VlmBackbone fro = VlmBackbone::select(frozen_path, model.image, VlmSource::frozen);
  CHECK(fin.weight_hash() == fro.weight_hash());
  CHECK(z_from(fin) == z_from(fro));

  // A finetuning step moves the live weights; the frozen copy keeps the old hash.
  const std::uint64_t pretrain_hash = fro.weight_hash();
  ParamSet live;
  model.image.register_params(live);
  Tensor w = live.get("image_enc/block0/mlp_fc1/weight");
  w.data_mut()[3] += 0.25f;
  CHECK(fin.weight_hash() != pretrain_hash);
  CHECK(fro.weight_hash() == pretrain_hash);
  CHECK(z_from(fin) != z_from(fro));

  // The detection path reads the finetuned backbone whatever the flag.
  const Tensor det = region_embeddings(backbone_features(model.image, images), regions, model.image, head);
  const Tensor det_again = region_embeddings(backbone_features(model.image, images), regions, model.image, head);
  CHECK(to_vec(det) == to_vec(det_again));

  CHECK_THROWS_AS(VlmBackbone::select(test::temp_path("absent.cfmw"), model.image, VlmSource::frozen), IoError);
}

TEST_CASE("region scores and CSV export") {
  const CfmModel model(small_model(), 3);
  const CategorySpace space = build_category_space(synth::category_names(), synth::default_split().base,
                                                   synth::default_split().novel, synth::prompt_templates(),
                                                   model.text, vocab_tokenizer());
  const Tensor emb = ops::l2_normalize(random_tensor({5, 16}, 1));
  const Tensor pooled = random_tensor({5, 16}, 2);
  const std::vector<float> o{1, 1, 1, 0.1f, 0.1f};
  const auto scores = score_regions(emb, pooled, space, 0.1f, kDefaultAlpha, kDefaultBeta, o);
  REQUIRE(scores.size() == 5);
  for (const auto& s : scores) {
    CHECK(s.p.size() == 81);
    CHECK(s.z.size() == 80);
    for (std::size_t k = 0; k < 80; ++k) CHECK(s.s_ovd[k] == doctest::Approx(s.objectness * s.s_ens[k]));
  }
  // α = β = 1 ranks by the detection score alone.
  for (const auto& s : score_regions(emb, pooled, space, 0.1f, 1.0, 1.0, o)) {
    CHECK(s.argmax_category() == std::max_element(s.p.begin(), s.p.end() - 1) - s.p.begin());
  }

  auto rows = scores;
  rows[0].true_category = 5;
  rows[0].membership = synth::Membership::base;
  const auto path = test::temp_path("scores.csv");
  write_scores_csv(path, rows, space);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "region_id,true_category,argmax_category,p_max,z_max,s_ovd_max,membership");
  int n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == 5);
}
