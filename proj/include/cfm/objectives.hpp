#pragma once

#include <span>
#include <vector>

#include "cfm/encoders.hpp"
#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

// Image-to-text InfoNCE over L2-normalized rows: −(1/B) Σᵢ log softmaxⱼ(vᵢ·lⱼ/τ)ᵢ
// with τ = exp(log_temperature). Requires B ≥ 2 and unit rows (within 1e-5).
Tensor infonce_i2t(const Tensor& image, const Tensor& text, const Tensor& log_temperature);
// Text-to-image direction: the softmax runs over images.
Tensor infonce_t2i(const Tensor& image, const Tensor& text, const Tensor& log_temperature);
// (I2T + T2I) / 2.
Tensor infonce_total(const Tensor& image, const Tensor& text, const Tensor& log_temperature);

// Uniform random partition of T tokens with |M| = round(mask_ratio·T); both
// index lists are sorted ascending.
MaskPlan sample_mask(std::size_t total, double mask_ratio, Rng& rng);

enum class SgSide { target, reconstruction };

// 1 − mean over images of the mean over that image's masked tokens of
// cos(target, reconstruction). Rows of image i are [offsets[i], offsets[i+1]).
// One side carries a stop-gradient according to `sg_side`. The returned value
// is not yet scaled by λ_rec.
Tensor recon_loss(const Tensor& targets, const Tensor& reconstructions, std::span<const std::size_t> offsets,
                  SgSide sg_side);

enum class BranchMode { full, exclusive };

struct CfmConfig {
  BranchMode mode = BranchMode::full;
  double mask_ratio = 0.75;
  double lambda_rec = 2.0;
  SgSide sg_side = SgSide::target;
};

struct TrainBatch {
  ImageBatch images;
  std::vector<std::vector<int>> captions;  // content token ids, no end token
};

struct StepDiagnostics {
  double l_con = 0.0;
  double l_rec = 0.0;
  double total = 0.0;
  std::size_t tokens_contrastive = 0;
  std::size_t tokens_recon = 0;
  double ped_dropped_fraction = 0.0;
};

struct StepLoss {
  Tensor total;
  Tensor l_con;
  Tensor l_rec;  // undefined when λ_rec = 0 (branch skipped)
  StepDiagnostics diagnostics;
  std::vector<MaskPlan> plans;
  // Token indices fed to the contrastive encoder, per image.
  std::vector<std::vector<std::size_t>> contrastive_tokens;
};

// One CFM training objective evaluation: contrastive branch plus (when
// λ_rec > 0) the masked reconstruction branch through the weight-shared encoder.
// All randomness (PED, masks) is drawn from `rng`.
StepLoss cfm_step_loss(const CfmModel& model, const TrainBatch& batch, const CfmConfig& config, Rng& rng);

// Dataset-normalized patch pixels used as the pixel reconstruction target.
Tensor pixel_targets(const Tensor& patches, std::span<const MaskPlan> plans);

}  // namespace cfm
