#include "cfm/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/ops.hpp"

namespace cfm {

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (heads == 0 || width % heads != 0) throw ConfigError("width not divisible by heads");
  if (width % 4 != 0) throw ConfigError("width must be divisible by 4 for 2-D sinusoidal embeddings");
  if (depth == 0) throw ConfigError("depth must be positive");
  if (!(ped_prob >= 0.0 && ped_prob <= 1.0)) throw ConfigError("ped_prob must lie in [0, 1]");
}

void TextConfig::validate() const {
  if (max_len < 2) throw ConfigError("text max_len must be at least 2");
  if (heads == 0 || width % heads != 0) throw ConfigError("text width not divisible by heads");
  if (depth == 0) throw ConfigError("text depth must be positive");
  if (eot_id < 0 || static_cast<std::size_t>(eot_id) >= vocab_size) throw ConfigError("eot id outside vocabulary");
}

bool MaskPlan::is_partition() const {
  if (visible.size() + masked.size() != total) return false;
  std::vector<char> seen(total, 0);
  for (auto i : visible) {
    if (i >= total || seen[i]) return false;
    seen[i] = 1;
  }
  for (auto i : masked) {
    if (i >= total || seen[i]) return false;
    seen[i] = 1;
  }
  return true;
}

std::vector<float> patchify(std::span<const float> image, std::size_t image_size, std::size_t channels,
                            std::size_t patch_size) {
  if (image.size() != image_size * image_size * channels || image_size % patch_size != 0) {
    throw ShapeError("patchify: image does not match " + std::to_string(image_size) + "x" +
                     std::to_string(image_size) + "x" + std::to_string(channels));
  }
  const std::size_t grid = image_size / patch_size;
  const std::size_t pdim = patch_size * patch_size * channels;
  std::vector<float> out(grid * grid * pdim);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      float* dst = out.data() + (gy * grid + gx) * pdim;
      for (std::size_t py = 0; py < patch_size; ++py) {
        const float* src = image.data() + ((gy * patch_size + py) * image_size + gx * patch_size) * channels;
        std::copy_n(src, patch_size * channels, dst + py * patch_size * channels);
      }
    }
  return out;
}

std::vector<float> unpatchify(std::span<const float> patches, std::size_t image_size, std::size_t channels,
                              std::size_t patch_size) {
  const std::size_t grid = image_size / patch_size;
  const std::size_t pdim = patch_size * patch_size * channels;
  if (patches.size() != grid * grid * pdim) throw ShapeError("unpatchify: patch count mismatch");
  std::vector<float> image(image_size * image_size * channels);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      const float* src = patches.data() + (gy * grid + gx) * pdim;
      for (std::size_t py = 0; py < patch_size; ++py) {
        float* dst = image.data() + ((gy * patch_size + py) * image_size + gx * patch_size) * channels;
        std::copy_n(src + py * patch_size * channels, patch_size * channels, dst);
      }
    }
  return image;
}

Tensor patchify_batch(const ImageBatch& batch, std::size_t patch_size) {
  if (batch.count == 0) throw ContractError("patchify_batch: empty batch");
  const std::size_t grid = batch.size / patch_size;
  const std::size_t t = grid * grid;
  const std::size_t pdim = patch_size * patch_size * batch.channels;
  std::vector<float> all;
  all.reserve(batch.count * t * pdim);
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto p = patchify(batch.image(i), batch.size, batch.channels, patch_size);
    all.insert(all.end(), p.begin(), p.end());
  }
  return Tensor({batch.count * t, pdim}, std::move(all));
}

Tensor sinusoidal_pe_2d(std::size_t grid_h, std::size_t grid_w, std::size_t width) {
  if (width == 0 || width % 4 != 0) throw ConfigError("sinusoidal_pe_2d: width must be divisible by 4");
  if (grid_h == 0 || grid_w == 0) throw ConfigError("sinusoidal_pe_2d: empty grid");
  const std::size_t half = width / 2;
  const std::size_t bands = width / 4;
  std::vector<float> table(grid_h * grid_w * width);
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t c = 0; c < grid_w; ++c) {
      float* row = table.data() + (r * grid_w + c) * width;
      for (std::size_t k = 0; k < bands; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(bands));
        row[2 * k] = static_cast<float>(std::sin(static_cast<double>(r) * omega));
        row[2 * k + 1] = static_cast<float>(std::cos(static_cast<double>(r) * omega));
        row[half + 2 * k] = static_cast<float>(std::sin(static_cast<double>(c) * omega));
        row[half + 2 * k + 1] = static_cast<float>(std::cos(static_cast<double>(c) * omega));
      }
    }
  return Tensor({grid_h * grid_w, width}, std::move(table));
}

namespace {

// Source coordinate for target index i when resampling n_from → n_to with
// corner alignment.
double source_coord(std::size_t i, std::size_t n_from, std::size_t n_to) {
  if (n_from == 1) return 0.0;
  if (n_to == 1) return static_cast<double>(n_from - 1) / 2.0;
  return static_cast<double>(i) * static_cast<double>(n_from - 1) / static_cast<double>(n_to - 1);
}

}  // namespace

Tensor interpolate_pe(const Tensor& table, std::size_t from_h, std::size_t from_w, std::size_t to_h,
                      std::size_t to_w) {
  if (from_h == 0 || from_w == 0 || to_h == 0 || to_w == 0) throw ConfigError("interpolate_pe: empty grid");
  if (table.rows() != from_h * from_w) throw ShapeError("interpolate_pe: table rows do not match source grid");
  const std::size_t width = table.cols();
  if (from_h == to_h && from_w == to_w) return table.clone();
  auto src = table.data();
  std::vector<float> out(to_h * to_w * width);
  for (std::size_t r = 0; r < to_h; ++r) {
    const double y = source_coord(r, from_h, to_h);
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, from_h - 1);
    const double wy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < to_w; ++c) {
      const double x = source_coord(c, from_w, to_w);
      const auto x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, from_w - 1);
      const double wx = x - static_cast<double>(x0);
      float* dst = out.data() + (r * to_w + c) * width;
      for (std::size_t ch = 0; ch < width; ++ch) {
        const double v00 = src[(y0 * from_w + x0) * width + ch];
        const double v01 = src[(y0 * from_w + x1) * width + ch];
        const double v10 = src[(y1 * from_w + x0) * width + ch];
        const double v11 = src[(y1 * from_w + x1) * width + ch];
        const double top = v00 + (v01 - v00) * wx;
        const double bottom = v10 + (v11 - v10) * wx;
        dst[ch] = static_cast<float>(top + (bottom - top) * wy);
      }
    }
  }
  return Tensor({to_h * to_w, width}, std::move(out));
}

Tensor apply_ped(const Tensor& tokens, const Tensor& pe_table, double ped_prob, Mode mode, Rng& rng,
                 std::vector<bool>* dropped) {
  const std::size_t t = pe_table.rows();
  const std::size_t w = pe_table.cols();
  if (tokens.cols() != w || tokens.rows() % t != 0) {
    throw ShapeError("apply_ped: tokens " + shape_str(tokens.shape()) + " vs PE " + shape_str(pe_table.shape()));
  }
  const std::size_t count = tokens.rows() / t;
  std::vector<bool> drop(count, false);
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < count; ++i) drop[i] = rng.bernoulli(ped_prob);
  }
  if (dropped) *dropped = drop;
  if (std::all_of(drop.begin(), drop.end(), [](bool d) { return d; })) return tokens;
  std::vector<float> add(tokens.numel(), 0.0f);
  auto pe = pe_table.data();
  for (std::size_t i = 0; i < count; ++i) {
    if (!drop[i]) std::copy(pe.begin(), pe.end(), add.begin() + static_cast<std::ptrdiff_t>(i * t * w));
  }
  return ops::add(tokens, Tensor(tokens.shape(), std::move(add)));
}

ImageEncoder::ImageEncoder(const ViTConfig& config, Rng& rng)
    : config_(config), pretrain_grid_(config.grid()), patch_embed_(config.patch_dim(), config.width, rng) {
  config_.validate();
  for (std::size_t i = 0; i < config_.depth; ++i) blocks_.emplace_back(config_.width, config_.heads, config_.depth, rng);
  ln_final_ = nn::LayerNorm(config_.width);
  pe_ = sinusoidal_pe_2d(config_.grid(), config_.grid(), config_.width);
}

void ImageEncoder::register_params(ParamSet& set) const {
  patch_embed_.register_params(set, "image_enc/patch_embed");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_params(set, "image_enc/block" + std::to_string(i));
  ln_final_.register_params(set, "image_enc/ln_final");
}

void ImageEncoder::set_resolution(std::size_t image_size, PeResize mode) {
  ViTConfig next = config_;
  next.image_size = image_size;
  next.validate();
  const std::size_t g = next.grid();
  pe_ = mode == PeResize::interpolate
            ? interpolate_pe(sinusoidal_pe_2d(pretrain_grid_, pretrain_grid_, config_.width), pretrain_grid_,
                             pretrain_grid_, g, g)
            : sinusoidal_pe_2d(g, g, config_.width);
  pe_resize_ = mode;
  config_ = next;
}

Tensor ImageEncoder::embed(const Tensor& patches) const {
  if (patches.cols() != config_.patch_dim()) throw ShapeError("embed: patch width mismatch");
  return patch_embed_(patches);
}

ImageEncoder::Output ImageEncoder::encode(const Tensor& tokens, std::span<const std::vector<std::size_t>> fed) const {
  const std::size_t t = config_.tokens();
  if (tokens.cols() != config_.width || tokens.rows() != fed.size() * t) {
    throw ShapeError("encode: tokens " + shape_str(tokens.shape()) + " for " + std::to_string(fed.size()) +
                     " images of " + std::to_string(t) + " tokens");
  }
  Output out;
  out.offsets.push_back(0);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < fed.size(); ++b) {
    if (fed[b].empty()) throw ContractError("encode: empty token set for image " + std::to_string(b));
    for (auto i : fed[b]) {
      if (i >= t) throw ShapeError("encode: token index " + std::to_string(i) + " out of range");
      rows.push_back(b * t + i);
    }
    out.offsets.push_back(rows.size());
  }
  Tensor x = ops::gather_rows(tokens, rows);
  for (const auto& block : blocks_) x = block.forward(x, out.offsets, false);
  out.tokens = ln_final_(x);
  out.pooled = ops::segment_mean(out.tokens, out.offsets);
  tokens_processed_ += rows.size();
  return out;
}

ReconDecoder::ReconDecoder(std::size_t width, std::size_t heads, std::size_t depth, std::size_t out_dim, Rng& rng)
    : width_(width), out_dim_(out_dim), mask_token_(Tensor::randn({1, width}, rng, 0.02f, true)) {
  for (std::size_t i = 0; i < depth; ++i) blocks_.emplace_back(width, heads, depth, rng);
  ln_final_ = nn::LayerNorm(width);
  head_ = nn::Linear(width, out_dim, rng);
}

void ReconDecoder::register_params(ParamSet& set) const {
  set.add("decoder/mask_token", mask_token_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_params(set, "decoder/block" + std::to_string(i));
  ln_final_.register_params(set, "decoder/ln_final");
  head_.register_params(set, "decoder/head");
}

Tensor ReconDecoder::decode(const Tensor& visible, std::span<const MaskPlan> plans, const Tensor& pe_table) const {
  const std::size_t t = pe_table.rows();
  std::vector<std::size_t> vis_rows, mask_rows, offsets{0};
  for (std::size_t b = 0; b < plans.size(); ++b) {
    const MaskPlan& plan = plans[b];
    if (plan.total != t) throw ShapeError("decode: plan covers " + std::to_string(plan.total) + " tokens, PE has " + std::to_string(t));
    for (auto i : plan.visible) vis_rows.push_back(b * t + i);
    for (auto i : plan.masked) mask_rows.push_back(b * t + i);
    offsets.push_back((b + 1) * t);
  }
  if (visible.rows() != vis_rows.size() || visible.cols() != width_) {
    throw ShapeError("decode: visible features " + shape_str(visible.shape()) + " do not match the plans");
  }
  if (mask_rows.empty()) return Tensor();
  const std::size_t total = plans.size() * t;
  Tensor x = ops::scatter_rows(visible, vis_rows, total);
  const std::vector<std::size_t> zeros(mask_rows.size(), 0);
  x = ops::add(x, ops::scatter_rows(ops::gather_rows(mask_token_, zeros), mask_rows, total));
  std::vector<float> pe(total * width_);
  for (std::size_t b = 0; b < plans.size(); ++b) {
    std::copy(pe_table.data().begin(), pe_table.data().end(), pe.begin() + static_cast<std::ptrdiff_t>(b * t * width_));
  }
  x = ops::add(x, Tensor({total, width_}, std::move(pe)));
  for (const auto& block : blocks_) x = block.forward(x, offsets, false);
  x = ln_final_(x);
  return head_(ops::gather_rows(x, mask_rows));
}

TextEncoder::TextEncoder(const TextConfig& config, std::size_t joint_width, Rng& rng) : config_(config) {
  config_.validate();
  token_embed_ = Tensor::randn({config_.vocab_size, config_.width}, rng, 0.1f, true);
  pos_embed_ = Tensor::randn({config_.max_len, config_.width}, rng, 0.01f, true);
  for (std::size_t i = 0; i < config_.depth; ++i) blocks_.emplace_back(config_.width, config_.heads, config_.depth, rng);
  ln_final_ = nn::LayerNorm(config_.width);
  proj_ = nn::Linear(config_.width, joint_width, rng);
}

void TextEncoder::register_params(ParamSet& set) const {
  set.add("text_enc/token_embed", token_embed_);
  set.add("text_enc/pos_embed", pos_embed_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_params(set, "text_enc/block" + std::to_string(i));
  ln_final_.register_params(set, "text_enc/ln_final");
  proj_.register_params(set, "text_enc/proj");
}

std::vector<int> TextEncoder::prepare(std::span<const int> ids) const {
  const std::size_t keep = std::min(ids.size(), config_.max_len - 1);
  std::vector<int> out(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep));
  out.push_back(config_.eot_id);
  return out;
}

Tensor TextEncoder::encode(std::span<const std::vector<int>> captions) const {
  if (captions.empty()) throw ContractError("encode_text: empty batch");
  std::vector<std::size_t> ids, positions, offsets{0}, eot_rows;
  for (const auto& caption : captions) {
    const auto seq = prepare(caption);
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (seq[p] < 0 || static_cast<std::size_t>(seq[p]) >= config_.vocab_size) {
        throw DataError("token id " + std::to_string(seq[p]) + " outside vocabulary of " +
                        std::to_string(config_.vocab_size));
      }
      ids.push_back(static_cast<std::size_t>(seq[p]));
      positions.push_back(p);
    }
    offsets.push_back(ids.size());
    eot_rows.push_back(ids.size() - 1);
  }
  Tensor x = ops::add(ops::gather_rows(token_embed_, ids), ops::gather_rows(pos_embed_, positions));
  for (const auto& block : blocks_) x = block.forward(x, offsets, true);
  x = ln_final_(ops::gather_rows(x, eot_rows));
  return proj_(x);
}

CfmModel::CfmModel(const ModelConfig& config, std::uint64_t seed)
    : image([&] {
        Rng rng(mix_seed(seed, 1));
        return ImageEncoder(config.vit, rng);
      }()),
      text([&] {
        Rng rng(mix_seed(seed, 2));
        return TextEncoder(config.text, config.vit.width, rng);
      }()),
      decoder([&] {
        Rng rng(mix_seed(seed, 3));
        const std::size_t out = config.recon_target == ReconTarget::feature ? config.vit.width : config.vit.patch_dim();
        return ReconDecoder(config.vit.width, config.vit.heads, config.decoder_depth, out, rng);
      }()),
      log_temperature(Tensor::scalar(static_cast<float>(std::log(config.init_temperature)), true)),
      config_(config) {
  if (!(config.init_temperature >= kMinTemperature)) throw ConfigError("initial temperature below 1e-3");
}

float CfmModel::temperature() const { return std::exp(log_temperature.data()[0]); }

void CfmModel::clamp_temperature() {
  auto v = log_temperature.data_mut();
  v[0] = std::max(v[0], std::log(kMinTemperature));
}

ParamSet CfmModel::params() const {
  ParamSet set;
  image.register_params(set);
  text.register_params(set);
  decoder.register_params(set);
  set.add("temperature", log_temperature);
  return set;
}

}  // namespace cfm
