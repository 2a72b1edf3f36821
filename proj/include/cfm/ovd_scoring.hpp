#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfm/checkpoint.hpp"
#include "cfm/encoders.hpp"
#include "cfm/nn.hpp"
#include "cfm/synth_world.hpp"
#include "cfm/tensor.hpp"

namespace cfm::ovd {

enum class Phase { train, test };

// Text-embedding classifier over all categories, split into base and novel.
struct CategorySpace {
  std::vector<std::string> names;  // indexed by category id
  std::vector<int> base;
  std::vector<int> novel;
  std::vector<std::string> templates;
  Tensor embeddings;  // [names × d], unit rows
  Tensor background;  // [1 × d], unit row

  bool is_novel(int category) const;
  // Category ids scored in a phase: base ids (train) or every id (test).
  std::vector<int> categories(Phase phase) const;
};

using Tokenizer = std::function<std::vector<int>(std::string_view)>;

// Each category embedding is the re-normalized mean of its unit-normalized
// template embeddings. The background embedding encodes the bare word
// "background".
CategorySpace build_category_space(const std::vector<std::string>& names, const std::vector<int>& base,
                                   const std::vector<int>& novel, const std::vector<std::string>& templates,
                                   const TextEncoder& text, const Tokenizer& tokenize);

// Cosine logits / temperature against the phase's categories with background
// as the last column: [N × (K+1)]. Differentiable in `regions`.
Tensor detection_logits(const Tensor& regions, const CategorySpace& space, Phase phase, float temperature);
// softmax of detection_logits.
Tensor detection_score(const Tensor& regions, const CategorySpace& space, Phase phase, float temperature);
// Softmax over cosine similarities to every category, no background: [N × C].
Tensor vlm_score(const Tensor& pooled_features, const CategorySpace& space, float temperature);

struct Region {
  std::size_t image = 0;  // index into the feature batch
  synth::Box box;
};

struct RoiSample {
  std::size_t cell;
  float weight;
};

// Bilinear RoI sampling weights over the token grid for one box. The box is
// split into 2×2 bins, each sampled on a regular ceil(bin / stride) grid per
// axis; token features sit at cell centers. Weights sum to 1.
std::vector<RoiSample> roi_weights(const synth::Box& box, std::size_t image_size, std::size_t grid);
// Pooled features [regions × d] from per-token features [images·grid² × d].
Tensor roi_pool(const Tensor& features, std::span<const Region> regions, std::size_t image_size, std::size_t grid);

// Geometric-mean ensemble over categories: z^(1−α)·p^α for base and
// z^(1−β)·p^β for novel categories.
std::vector<float> ensemble_score(std::span<const float> p, std::span<const float> z,
                                  std::span<const bool> novel, double alpha, double beta);
std::vector<float> fuse_objectness(std::span<const float> s_ens, float objectness);

// Region projection on top of the backbone, initialized to the identity.
struct DetectorHead {
  nn::Linear proj;

  DetectorHead() = default;
  explicit DetectorHead(std::size_t width);
  void register_params(ParamSet& set) const;
};

// Post-final-LN token features of every token with PE added (no dropout).
Tensor backbone_features(const ImageEncoder& encoder, const ImageBatch& images);

// Unit region embeddings for the detection score: head(roi_pool(features)).
Tensor region_embeddings(const Tensor& features, std::span<const Region> regions, const ImageEncoder& encoder,
                         const DetectorHead& head);

enum class VlmSource { frozen, finetuned };

// The backbone that feeds the VLM score: either the finetuned encoder itself
// or a separate copy restored from the frozen pretraining checkpoint.
class VlmBackbone {
 public:
  static VlmBackbone select(const std::filesystem::path& frozen_checkpoint, const ImageEncoder& finetuned,
                            VlmSource source);

  const ImageEncoder& encoder() const { return *encoder_; }
  VlmSource source() const { return source_; }
  std::uint64_t weight_hash() const;

 private:
  VlmBackbone(std::shared_ptr<const ImageEncoder> owned, const ImageEncoder* encoder, VlmSource source)
      : owned_(std::move(owned)), encoder_(encoder), source_(source) {}

  std::shared_ptr<const ImageEncoder> owned_;
  const ImageEncoder* encoder_;
  VlmSource source_;
};

inline constexpr double kDefaultAlpha = 0.2;
inline constexpr double kDefaultBeta = 0.65;

struct RegionScore {
  std::size_t region_id = 0;
  int true_category = -1;  // −1 for negatives
  synth::Membership membership = synth::Membership::unlabeled;
  float objectness = 1.0f;
  std::vector<float> p;      // all categories then background
  std::vector<float> z;      // all categories
  std::vector<float> s_ens;  // all categories
  std::vector<float> s_ovd;  // all categories

  int argmax_category() const;
};

// Scores regions of one image batch in the test phase.
std::vector<RegionScore> score_regions(const Tensor& region_emb, const Tensor& vlm_pooled,
                                       const CategorySpace& space, float temperature, double alpha, double beta,
                                       std::span<const float> objectness);

// CSV columns: region_id,true_category,argmax_category,p_max,z_max,s_ovd_max,membership
void write_scores_csv(const std::filesystem::path& path, const std::vector<RegionScore>& scores,
                      const CategorySpace& space);

}  // namespace cfm::ovd
