#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cfm/checkpoint.hpp"
#include "cfm/encoders.hpp"
#include "cfm/objectives.hpp"
#include "cfm/ovd_scoring.hpp"
#include "cfm/synth_world.hpp"

namespace cfm::train {

// Linear warmup 0 → base_lr over `warmup` steps, then linear decay to 0 at `total`.
struct Schedule {
  double base_lr = 1e-3;
  std::size_t warmup = 100;
  std::size_t total = 2000;
};

double lr_at(std::size_t step, const Schedule& schedule);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with bias correction and decoupled weight decay. Parameters join in
// groups that scale the learning rate; decay applies to matrices only
// (parameters with two or more dimensions).
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void add_group(const ParamSet& params, double lr_scale);
  // One update from the accumulated gradients (missing gradients count as
  // zero). A non-finite gradient aborts the step before any parameter moves.
  void step(double lr);
  std::size_t steps() const { return steps_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> m;
    std::vector<float> v;
    double lr_scale;
    bool decay;
  };
  AdamWConfig config_;
  std::vector<Slot> slots_;
  std::size_t steps_ = 0;
};

struct PretrainConfig {
  ModelConfig model;
  CfmConfig objective;
  Schedule schedule;
  AdamWConfig optimizer;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;       // initialization, PED and mask draws
  std::uint64_t data_seed = 1;  // on-the-fly pair stream
  std::filesystem::path dataset;  // optional .cfmd of pretraining pairs
  std::filesystem::path out_dir;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t prefetch = 4;
};

struct PretrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path frozen_checkpoint;
  std::filesystem::path metrics;
  std::vector<StepDiagnostics> history;
  float temperature = 0.0f;
};

// Metrics CSV columns: step,L_con,L_rec,total,tokens_contrastive,tokens_recon,ped_dropped_fraction
PretrainResult pretrain(const PretrainConfig& config, std::ostream* progress = nullptr);

// Seeds of the pretraining stream and of a disjoint held-out stream.
std::uint64_t pretrain_pair_seed(std::uint64_t data_seed, std::uint64_t index);
std::uint64_t held_out_pair_seed(std::uint64_t data_seed, std::uint64_t index);
std::vector<synth::Scene> held_out_pairs(std::uint64_t data_seed, std::size_t count);

TrainBatch make_batch(const std::vector<const synth::Scene*>& scenes);

// Pretrained dual encoder plus a region projection head.
class Detector {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed);

  CfmModel model;
  ovd::DetectorHead head;

  ParamSet params() const;
  ParamSet backbone_params() const;
  ParamSet head_params() const;
};

struct FinetuneConfig {
  ModelConfig model;
  std::filesystem::path pretrained;
  std::filesystem::path out;
  Schedule schedule{5e-4, 50, 500};
  AdamWConfig optimizer;
  double backbone_lr_ratio = 0.5;
  std::size_t image_size = synth::kDetectImageSize;
  PeResize pe_resize = PeResize::interpolate;
  std::size_t batch_size = 8;
  std::size_t negatives_per_image = 4;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 2;
};

struct FinetuneResult {
  std::filesystem::path checkpoint;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
  std::vector<double> losses;
  double first_backbone_update_norm = 0.0;
  double first_head_update_norm = 0.0;
};

ovd::CategorySpace default_category_space(const TextEncoder& text);

// Region labels for one training scene: base classes by position in the base
// list, background (= base count) for unlabeled objects and negatives. A novel
// label throws.
std::vector<int> training_labels(const synth::Scene& scene, std::size_t negatives, const ovd::CategorySpace& space);

FinetuneResult finetune(const FinetuneConfig& config, std::ostream* progress = nullptr);

struct RetrievalResult {
  std::size_t n = 0;
  double image_to_text[3] = {0, 0, 0};  // R@1, R@5, R@10
  double text_to_image[3] = {0, 0, 0};
};

inline constexpr std::size_t kRecallKs[3] = {1, 5, 10};

// Ranks by cosine similarity; ties go to the lower index.
RetrievalResult recall_at_k(const Tensor& image_emb, const Tensor& text_emb);
RetrievalResult eval_retrieval(const CfmModel& model, const std::vector<synth::Scene>& pairs);

struct RegionEvalConfig {
  ModelConfig model;
  std::filesystem::path detector;
  std::filesystem::path frozen;
  ovd::VlmSource source = ovd::VlmSource::frozen;
  double alpha = ovd::kDefaultAlpha;
  double beta = ovd::kDefaultBeta;
  std::size_t image_size = synth::kDetectImageSize;
  PeResize pe_resize = PeResize::interpolate;
  std::size_t scenes = 1000;
  std::size_t negatives_per_image = 2;
  std::uint64_t data_seed = 3;
  std::filesystem::path scores_csv;  // optional
};

struct RegionEvalResult {
  double base_accuracy = 0.0;
  double novel_accuracy = 0.0;
  std::size_t base_regions = 0;
  std::size_t novel_regions = 0;
  std::vector<ovd::RegionScore> scores;
};

inline constexpr float kNegativeObjectness = 0.1f;

RegionEvalResult eval_regions(const RegionEvalConfig& config);

// Top-1 accuracy over labeled regions of a score list, split by membership.
void accuracy_from_scores(const std::vector<ovd::RegionScore>& scores, RegionEvalResult& result);

}  // namespace cfm::train
