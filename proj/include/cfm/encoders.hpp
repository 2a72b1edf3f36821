#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cfm/checkpoint.hpp"
#include "cfm/nn.hpp"
#include "cfm/rng.hpp"
#include "cfm/tensor.hpp"

namespace cfm {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t depth = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  double ped_prob = 0.5;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

struct TextConfig {
  std::size_t vocab_size = 64;
  std::size_t max_len = 64;
  std::size_t depth = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  int eot_id = 1;

  void validate() const;
};

// Partition of a T-token grid into visible tokens V (fed to the reconstruction
// encoder) and masked tokens M (reconstructed).
struct MaskPlan {
  std::size_t total = 0;
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
  double mask_ratio = 0.75;

  // V ∩ M = ∅ and V ∪ M = {0..T−1}.
  bool is_partition() const;
};

enum class Mode { train, eval };
enum class PeResize { interpolate, recompute };

// Normalized images, count × size × size × channels, row-major HWC per image.
struct ImageBatch {
  std::size_t count = 0;
  std::size_t size = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  std::span<const float> image(std::size_t i) const {
    const std::size_t n = size * size * channels;
    return std::span<const float>(pixels).subspan(i * n, n);
  }
};

// Raster-order non-overlapping patches; each patch flattened as (row, col, channel).
std::vector<float> patchify(std::span<const float> image, std::size_t image_size, std::size_t channels,
                            std::size_t patch_size);
std::vector<float> unpatchify(std::span<const float> patches, std::size_t image_size, std::size_t channels,
                              std::size_t patch_size);
// [count·T × patch_dim]
Tensor patchify_batch(const ImageBatch& batch, std::size_t patch_size);

// Fixed 2-D sinusoidal table [(grid_h·grid_w) × width] in raster order. The first
// width/2 channels encode the row, the rest the column; within each half,
// channel pairs (2k, 2k+1) hold (sin, cos) of position · 10000^(−k/(width/4)).
Tensor sinusoidal_pe_2d(std::size_t grid_h, std::size_t grid_w, std::size_t width);

// Channelwise bilinear resampling of a PE table between grids (corner-aligned).
Tensor interpolate_pe(const Tensor& table, std::size_t from_h, std::size_t from_w, std::size_t to_h,
                      std::size_t to_w);

// Adds the PE table to each image's tokens ([count·T × width]). In train mode
// each image independently has the whole table withheld with probability
// ped_prob. `dropped`, when given, receives the per-image outcome.
Tensor apply_ped(const Tensor& tokens, const Tensor& pe_table, double ped_prob, Mode mode, Rng& rng,
                 std::vector<bool>* dropped = nullptr);

class ImageEncoder {
 public:
  struct Output {
    Tensor tokens;                     // [Σ fed × width], post final LayerNorm, in fed order
    Tensor pooled;                     // [count × width], mean over fed tokens
    std::vector<std::size_t> offsets;  // segment offsets into `tokens`
  };

  ImageEncoder(const ViTConfig& config, Rng& rng);

  const ViTConfig& config() const { return config_; }
  const Tensor& pe_table() const { return pe_; }
  std::size_t pretrain_grid() const { return pretrain_grid_; }
  PeResize pe_resize() const { return pe_resize_; }
  void register_params(ParamSet& set) const;

  // Switches the input resolution. The PE table is either bilinearly
  // interpolated from the pretraining grid or recomputed at the new grid.
  void set_resolution(std::size_t image_size, PeResize mode);

  // Patch embedding: [count·T × patch_dim] → [count·T × width].
  Tensor embed(const Tensor& patches) const;

  // Runs the blocks on the fed token subset of each image; attention is
  // restricted to the tokens fed for that image.
  Output encode(const Tensor& tokens, std::span<const std::vector<std::size_t>> fed) const;

  std::size_t tokens_processed() const { return tokens_processed_; }
  void reset_token_counter() const { tokens_processed_ = 0; }

 private:
  ViTConfig config_;
  std::size_t pretrain_grid_;
  nn::Linear patch_embed_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_final_;
  Tensor pe_;
  PeResize pe_resize_ = PeResize::interpolate;
  mutable std::size_t tokens_processed_ = 0;
};

// Two-block transformer over the full token grid: visible features at V, a
// shared learnable mask token at M, PE always added. Returns rows for M in M's
// order, projected to `out_dim`.
class ReconDecoder {
 public:
  ReconDecoder(std::size_t width, std::size_t heads, std::size_t depth, std::size_t out_dim, Rng& rng);

  void register_params(ParamSet& set) const;
  std::size_t out_dim() const { return out_dim_; }

  Tensor decode(const Tensor& visible, std::span<const MaskPlan> plans, const Tensor& pe_table) const;

 private:
  std::size_t width_;
  std::size_t out_dim_;
  Tensor mask_token_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_final_;
  nn::Linear head_;
};

// Causal text transformer; the embedding is read at the end-of-text token and
// projected to the joint width.
class TextEncoder {
 public:
  TextEncoder(const TextConfig& config, std::size_t joint_width, Rng& rng);

  const TextConfig& config() const { return config_; }
  void register_params(ParamSet& set) const;

  // Truncates content ids to max_len − 1 and appends the end token.
  std::vector<int> prepare(std::span<const int> ids) const;

  // [count × joint_width], not normalized. Padding after the end token cannot
  // influence it under causal attention, so sequences are packed unpadded.
  Tensor encode(std::span<const std::vector<int>> captions) const;

 private:
  TextConfig config_;
  Tensor token_embed_;
  Tensor pos_embed_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_final_;
  nn::Linear proj_;
};

enum class ReconTarget { feature, pixel };

struct ModelConfig {
  ViTConfig vit;
  TextConfig text;
  std::size_t decoder_depth = 2;
  ReconTarget recon_target = ReconTarget::feature;
  double init_temperature = 0.1;
};

// Dual encoder plus reconstruction decoder and learnable temperature. The
// contrastive and reconstruction image encoders are one and the same object.
class CfmModel {
 public:
  CfmModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ImageEncoder image;
  TextEncoder text;
  ReconDecoder decoder;
  Tensor log_temperature;  // checkpoint record "temperature" holds ln τ

  float temperature() const;
  // Keeps τ ≥ 1e-3.
  void clamp_temperature();
  ParamSet params() const;

 private:
  ModelConfig config_;
};

inline constexpr float kMinTemperature = 1e-3f;

}  // namespace cfm
