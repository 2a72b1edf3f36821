#include "cfm/ovd_scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "cfm/error.hpp"
#include "cfm/ops.hpp"

namespace cfm::ovd {

bool CategorySpace::is_novel(int category) const {
  return std::find(novel.begin(), novel.end(), category) != novel.end();
}

std::vector<int> CategorySpace::categories(Phase phase) const {
  if (phase == Phase::train) return base;
  std::vector<int> all(names.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return all;
}

namespace {

Tensor encode_unit(const TextEncoder& text, const std::vector<std::vector<int>>& captions) {
  return ops::l2_normalize(text.encode(captions));
}

// Rows of `table` picked by category id, plus an optional trailing row.
Tensor stack_rows(const Tensor& table, const std::vector<int>& ids, const Tensor* extra) {
  const std::size_t d = table.cols();
  std::vector<float> out;
  out.reserve((ids.size() + 1) * d);
  for (int id : ids) {
    auto row = table.data().subspan(static_cast<std::size_t>(id) * d, d);
    out.insert(out.end(), row.begin(), row.end());
  }
  if (extra) out.insert(out.end(), extra->data().begin(), extra->data().end());
  const std::size_t rows = out.size() / d;
  return Tensor({rows, d}, std::move(out));
}

}  // namespace

CategorySpace build_category_space(const std::vector<std::string>& names, const std::vector<int>& base,
                                   const std::vector<int>& novel, const std::vector<std::string>& templates,
                                   const TextEncoder& text, const Tokenizer& tokenize) {
  if (names.empty() || templates.empty()) throw ContractError("build_category_space: empty names or templates");
  std::set<int> seen;
  for (const auto* group : {&base, &novel}) {
    for (int id : *group) {
      if (id < 0 || static_cast<std::size_t>(id) >= names.size()) throw ContractError("category id out of range");
      if (!seen.insert(id).second) throw ContractError("category " + names[static_cast<std::size_t>(id)] +
                                                       " listed twice across base and novel");
    }
  }

  NoGradScope nograd;
  CategorySpace space;
  space.names = names;
  space.base = base;
  space.novel = novel;
  space.templates = templates;
  const std::size_t t = templates.size();
  std::vector<std::vector<int>> captions;
  captions.reserve(names.size() * t);
  for (const auto& name : names)
    for (const auto& pattern : templates) captions.push_back(tokenize(synth::fill_template(pattern, name)));
  const Tensor each = encode_unit(text, captions);
  const std::size_t d = each.cols();
  std::vector<float> mean(names.size() * d, 0.0f);
  for (std::size_t c = 0; c < names.size(); ++c) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < t; ++k) acc += each.at(c * t + k, j);
      mean[c * d + j] = static_cast<float>(acc / static_cast<double>(t));
    }
  }
  space.embeddings = ops::l2_normalize(Tensor({names.size(), d}, std::move(mean)));
  space.background = encode_unit(text, {tokenize("background")});
  return space;
}

Tensor detection_logits(const Tensor& regions, const CategorySpace& space, Phase phase, float temperature) {
  const Tensor classifier = stack_rows(space.embeddings, space.categories(phase), &space.background);
  return ops::scale(ops::matmul(regions, ops::transpose(classifier)), 1.0f / temperature);
}

Tensor detection_score(const Tensor& regions, const CategorySpace& space, Phase phase, float temperature) {
  return ops::softmax(detection_logits(regions, space, phase, temperature), 1);
}

Tensor vlm_score(const Tensor& pooled_features, const CategorySpace& space, float temperature) {
  const Tensor unit = ops::l2_normalize(pooled_features);
  return ops::softmax(ops::scale(ops::matmul(unit, ops::transpose(space.embeddings)), 1.0f / temperature), 1);
}

std::vector<RoiSample> roi_weights(const synth::Box& box, std::size_t image_size, std::size_t grid) {
  constexpr std::size_t kBins = 2;
  const auto size = static_cast<float>(image_size);
  if (!(box.x1 > box.x0 && box.y1 > box.y0)) throw GeometryError("roi: box has zero area");
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > size || box.y1 > size) throw GeometryError("roi: box outside the image");
  const double stride = static_cast<double>(image_size) / static_cast<double>(grid);
  std::vector<double> dense(grid * grid, 0.0);

  auto axis_points = [&](double lo, double hi) {
    const double bin = (hi - lo) / kBins;
    const auto per_bin = static_cast<std::size_t>(std::max(1.0, std::ceil(bin / stride - 1e-9)));
    std::vector<double> pts;
    for (std::size_t b = 0; b < kBins; ++b)
      for (std::size_t k = 0; k < per_bin; ++k)
        pts.push_back(lo + bin * (static_cast<double>(b) + (static_cast<double>(k) + 0.5) / static_cast<double>(per_bin)));
    return pts;
  };
  // Pixel coordinate → fractional cell index, clamped to the grid of centers.
  auto to_cell = [&](double p) {
    return std::clamp(p / stride - 0.5, 0.0, static_cast<double>(grid - 1));
  };

  const auto xs = axis_points(box.x0, box.x1);
  const auto ys = axis_points(box.y0, box.y1);
  const double w = 1.0 / static_cast<double>(xs.size() * ys.size());
  for (double py : ys) {
    const double fy = to_cell(py);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, grid - 1);
    const double wy = fy - static_cast<double>(y0);
    for (double px : xs) {
      const double fx = to_cell(px);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, grid - 1);
      const double wx = fx - static_cast<double>(x0);
      dense[y0 * grid + x0] += w * (1 - wy) * (1 - wx);
      dense[y0 * grid + x1] += w * (1 - wy) * wx;
      dense[y1 * grid + x0] += w * wy * (1 - wx);
      dense[y1 * grid + x1] += w * wy * wx;
    }
  }
  std::vector<RoiSample> out;
  for (std::size_t c = 0; c < dense.size(); ++c)
    if (dense[c] > 0.0) out.push_back({c, static_cast<float>(dense[c])});
  return out;
}

Tensor roi_pool(const Tensor& features, std::span<const Region> regions, std::size_t image_size, std::size_t grid) {
  const std::size_t t = grid * grid;
  if (regions.empty()) throw ContractError("roi_pool: no regions");
  if (features.rows() % t != 0) throw ShapeError("roi_pool: features are not a whole number of token grids");
  const std::size_t images = features.rows() / t;
  std::vector<float> weights(regions.size() * features.rows(), 0.0f);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (regions[r].image >= images) throw ContractError("roi_pool: region refers to a missing image");
    for (const auto& s : roi_weights(regions[r].box, image_size, grid)) {
      weights[r * features.rows() + regions[r].image * t + s.cell] = s.weight;
    }
  }
  return ops::matmul(Tensor({regions.size(), features.rows()}, std::move(weights)), features);
}

std::vector<float> ensemble_score(std::span<const float> p, std::span<const float> z, std::span<const bool> novel,
                                  double alpha, double beta) {
  if (p.size() != z.size() || p.size() != novel.size()) throw ShapeError("ensemble_score: length mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0 && beta >= 0.0 && beta <= 1.0)) {
    throw DomainError("ensemble_score: exponents must lie in [0, 1]");
  }
  std::vector<float> s(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0f && z[i] >= 0.0f)) throw DomainError("ensemble_score: negative or NaN score");
    const double a = novel[i] ? beta : alpha;
    s[i] = static_cast<float>(std::pow(static_cast<double>(z[i]), 1.0 - a) * std::pow(static_cast<double>(p[i]), a));
  }
  return s;
}

std::vector<float> fuse_objectness(std::span<const float> s_ens, float objectness) {
  if (!(objectness >= 0.0f && objectness <= 1.0f)) throw DomainError("objectness must lie in [0, 1]");
  std::vector<float> out(s_ens.begin(), s_ens.end());
  for (auto& v : out) v *= objectness;
  return out;
}

DetectorHead::DetectorHead(std::size_t width) {
  std::vector<float> eye(width * width, 0.0f);
  for (std::size_t i = 0; i < width; ++i) eye[i * width + i] = 1.0f;
  proj.weight = Tensor({width, width}, std::move(eye), true);
  proj.bias = Tensor::zeros({width}, true);
}

void DetectorHead::register_params(ParamSet& set) const { proj.register_params(set, "det_head/proj"); }

Tensor backbone_features(const ImageEncoder& encoder, const ImageBatch& images) {
  const ViTConfig& cfg = encoder.config();
  if (images.size != cfg.image_size) {
    throw ShapeError("backbone_features: images are " + std::to_string(images.size) + " px, encoder expects " +
                     std::to_string(cfg.image_size));
  }
  const Tensor tokens = encoder.embed(patchify_batch(images, cfg.patch_size));
  Rng unused(0);
  const Tensor with_pe = apply_ped(tokens, encoder.pe_table(), 0.0, Mode::eval, unused);
  std::vector<std::vector<std::size_t>> fed(images.count, std::vector<std::size_t>(cfg.tokens()));
  for (auto& f : fed)
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = i;
  return encoder.encode(with_pe, fed).tokens;
}

Tensor region_embeddings(const Tensor& features, std::span<const Region> regions, const ImageEncoder& encoder,
                         const DetectorHead& head) {
  const ViTConfig& cfg = encoder.config();
  return ops::l2_normalize(head.proj(roi_pool(features, regions, cfg.image_size, cfg.grid())));
}

VlmBackbone VlmBackbone::select(const std::filesystem::path& frozen_checkpoint, const ImageEncoder& finetuned,
                                VlmSource source) {
  if (!std::filesystem::exists(frozen_checkpoint)) {
    throw IoError("frozen checkpoint '" + frozen_checkpoint.string() + "' not found");
  }
  if (source == VlmSource::finetuned) return VlmBackbone(nullptr, &finetuned, source);

  ViTConfig cfg = finetuned.config();
  const std::size_t target = cfg.image_size;
  cfg.image_size = finetuned.pretrain_grid() * cfg.patch_size;
  Rng rng(0);
  auto frozen = std::make_shared<ImageEncoder>(cfg, rng);
  ParamSet params;
  frozen->register_params(params);
  load_checkpoint(frozen_checkpoint, params);
  frozen->set_resolution(target, finetuned.pe_resize());
  const ImageEncoder* raw = frozen.get();
  return VlmBackbone(std::move(frozen), raw, source);
}

std::uint64_t VlmBackbone::weight_hash() const {
  ParamSet params;
  encoder_->register_params(params);
  return cfm::weight_hash(params);
}

int RegionScore::argmax_category() const {
  return static_cast<int>(std::max_element(s_ovd.begin(), s_ovd.end()) - s_ovd.begin());
}

std::vector<RegionScore> score_regions(const Tensor& region_emb, const Tensor& vlm_pooled,
                                       const CategorySpace& space, float temperature, double alpha, double beta,
                                       std::span<const float> objectness) {
  NoGradScope nograd;
  const Tensor p = detection_score(region_emb, space, Phase::test, temperature);
  const Tensor z = vlm_score(vlm_pooled, space, temperature);
  const std::size_t n = region_emb.rows();
  const std::size_t c = space.names.size();
  if (objectness.size() != n || vlm_pooled.rows() != n) throw ShapeError("score_regions: region count mismatch");
  const std::unique_ptr<bool[]> novel(new bool[c]);
  for (std::size_t k = 0; k < c; ++k) novel[k] = space.is_novel(static_cast<int>(k));

  std::vector<RegionScore> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    RegionScore& s = out[r];
    s.region_id = r;
    s.objectness = objectness[r];
    s.p.assign(p.data().begin() + static_cast<std::ptrdiff_t>(r * (c + 1)),
               p.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * (c + 1)));
    s.z.assign(z.data().begin() + static_cast<std::ptrdiff_t>(r * c),
               z.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    s.s_ens = ensemble_score(std::span(s.p).first(c), s.z, std::span<const bool>(novel.get(), c), alpha, beta);
    s.s_ovd = fuse_objectness(s.s_ens, s.objectness);
  }
  return out;
}

void write_scores_csv(const std::filesystem::path& path, const std::vector<RegionScore>& scores,
                      const CategorySpace& space) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "region_id,true_category,argmax_category,p_max,z_max,s_ovd_max,membership\n";
  const std::size_t c = space.names.size();
  char buf[64];
  for (const auto& s : scores) {
    const auto arg = static_cast<std::size_t>(s.argmax_category());
    const std::string truth = s.true_category < 0 ? "background" : space.names[static_cast<std::size_t>(s.true_category)];
    const char* membership = s.true_category < 0 ? "negative"
                             : s.membership == synth::Membership::novel ? "novel"
                                                                         : "base";
    out << s.region_id << ',' << truth << ',' << space.names[arg];
    for (float v : {*std::max_element(s.p.begin(), s.p.begin() + static_cast<std::ptrdiff_t>(c)),
                    *std::max_element(s.z.begin(), s.z.end()), s.s_ovd[arg]}) {
      std::snprintf(buf, sizeof buf, ",%.6g", static_cast<double>(v));
      out << buf;
    }
    out << ',' << membership << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace cfm::ovd
