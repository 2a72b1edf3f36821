#include "cfm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/ops.hpp"

namespace cfm {

namespace {

void require_unit_rows(const Tensor& x, const char* what) {
  const std::size_t n = x.rows(), d = x.cols();
  auto v = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(v[i * d + j]) * v[i * d + j];
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-5) {
      throw ContractError(std::string(what) + " row " + std::to_string(i) + " is not unit norm");
    }
  }
}

Tensor scaled_logits(const Tensor& image, const Tensor& text, const Tensor& log_temperature) {
  if (image.ndim() != 2 || image.shape() != text.shape()) {
    throw ShapeError("infonce: embeddings " + shape_str(image.shape()) + " vs " + shape_str(text.shape()));
  }
  if (image.dim(0) < 2) throw ContractError("infonce: batch size must be at least 2");
  require_unit_rows(image, "image embedding");
  require_unit_rows(text, "text embedding");
  const Tensor inv_tau = ops::exp(ops::scale(log_temperature, -1.0f));
  return ops::mul_scalar(ops::matmul(image, ops::transpose(text)), inv_tau);
}

std::vector<std::size_t> diagonal(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace

Tensor infonce_i2t(const Tensor& image, const Tensor& text, const Tensor& log_temperature) {
  const Tensor logits = scaled_logits(image, text, log_temperature);
  const auto diag = diagonal(image.dim(0));
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits, 1), diag)), -1.0f);
}

Tensor infonce_t2i(const Tensor& image, const Tensor& text, const Tensor& log_temperature) {
  const Tensor logits = scaled_logits(image, text, log_temperature);
  const auto diag = diagonal(image.dim(0));
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits, 0), diag)), -1.0f);
}

Tensor infonce_total(const Tensor& image, const Tensor& text, const Tensor& log_temperature) {
  const Tensor logits = scaled_logits(image, text, log_temperature);
  const auto diag = diagonal(image.dim(0));
  const Tensor i2t = ops::mean(ops::pick(ops::log_softmax(logits, 1), diag));
  const Tensor t2i = ops::mean(ops::pick(ops::log_softmax(logits, 0), diag));
  return ops::scale(ops::add(i2t, t2i), -0.5f);
}

MaskPlan sample_mask(std::size_t total, double mask_ratio, Rng& rng) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractError("sample_mask: mask_ratio must lie in (0, 1)");
  if (total < 2) throw ContractError("sample_mask: need at least 2 tokens");
  const auto n_masked = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(total)));
  if (n_masked == 0 || n_masked == total) {
    throw ContractError("sample_mask: ratio " + std::to_string(mask_ratio) + " over " + std::to_string(total) +
                        " tokens masks none or all");
  }
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  MaskPlan plan;
  plan.total = total;
  plan.mask_ratio = mask_ratio;
  plan.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_masked));
  plan.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_masked), perm.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

Tensor recon_loss(const Tensor& targets, const Tensor& reconstructions, std::span<const std::size_t> offsets,
                  SgSide sg_side) {
  if (targets.shape() != reconstructions.shape()) {
    throw ShapeError("recon_loss: targets " + shape_str(targets.shape()) + " vs reconstructions " +
                     shape_str(reconstructions.shape()));
  }
  if (targets.rows() == 0) throw ContractError("recon_loss: no masked tokens");
  const Tensor f = sg_side == SgSide::target ? ops::stop_gradient(targets) : targets;
  const Tensor g = sg_side == SgSide::reconstruction ? ops::stop_gradient(reconstructions) : reconstructions;
  const Tensor cos = ops::sum_last(ops::mul(ops::l2_normalize(f), ops::l2_normalize(g)));
  const Tensor per_image = ops::segment_mean(ops::reshape(cos, {cos.numel(), 1}), offsets);
  return ops::add_scalar(ops::scale(ops::mean(per_image), -1.0f), 1.0f);
}

Tensor pixel_targets(const Tensor& patches, std::span<const MaskPlan> plans) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    for (auto m : plans[b].masked) rows.push_back(b * plans[b].total + m);
  }
  NoGradScope nograd;
  return ops::gather_rows(patches, rows);
}

StepLoss cfm_step_loss(const CfmModel& model, const TrainBatch& batch, const CfmConfig& config, Rng& rng) {
  const ImageEncoder& encoder = model.image;
  const ViTConfig& vit = encoder.config();
  const std::size_t b = batch.images.count;
  const std::size_t t = vit.tokens();
  if (b != batch.captions.size()) throw ShapeError("cfm_step_loss: image and caption counts differ");
  if (batch.images.size != vit.image_size) {
    throw ShapeError("cfm_step_loss: images are " + std::to_string(batch.images.size) + " px, encoder expects " +
                     std::to_string(vit.image_size));
  }
  const bool recon = config.lambda_rec > 0.0;
  const bool exclusive = config.mode == BranchMode::exclusive;

  StepLoss out;
  const Tensor patches = patchify_batch(batch.images, vit.patch_size);
  const Tensor tokens = encoder.embed(patches);
  std::vector<bool> dropped;
  const Tensor tokens_pe = apply_ped(tokens, encoder.pe_table(), vit.ped_prob, Mode::train, rng, &dropped);

  if (recon || exclusive) {
    for (std::size_t i = 0; i < b; ++i) out.plans.push_back(sample_mask(t, config.mask_ratio, rng));
  }
  std::vector<std::size_t> all(t);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < b; ++i) {
    if (exclusive) {
      if (!out.plans[i].is_partition()) throw ContractError("cfm_step_loss: mask plan is not a partition");
      out.contrastive_tokens.push_back(out.plans[i].masked);
    } else {
      out.contrastive_tokens.push_back(all);
    }
  }

  const std::size_t before = encoder.tokens_processed();
  const ImageEncoder::Output contrastive = encoder.encode(tokens_pe, out.contrastive_tokens);
  out.diagnostics.tokens_contrastive = encoder.tokens_processed() - before;

  const Tensor image_emb = ops::l2_normalize(contrastive.pooled);
  const Tensor text_emb = ops::l2_normalize(model.text.encode(batch.captions));
  out.l_con = infonce_total(image_emb, text_emb, model.log_temperature);
  out.total = out.l_con;

  if (recon) {
    std::vector<std::size_t> mask_offsets{0};
    std::vector<std::vector<std::size_t>> visible;
    std::vector<std::size_t> target_rows;
    for (std::size_t i = 0; i < b; ++i) {
      const MaskPlan& plan = out.plans[i];
      visible.push_back(plan.visible);
      mask_offsets.push_back(mask_offsets.back() + plan.masked.size());
      // In full mode the contrastive encoder saw every token in index order; in
      // exclusive mode it saw exactly M, in M's order.
      if (!exclusive) {
        for (auto m : plan.masked) target_rows.push_back(contrastive.offsets[i] + m);
      }
    }
    Tensor targets;
    if (model.config().recon_target == ReconTarget::pixel) {
      targets = pixel_targets(patches, out.plans);
    } else {
      targets = exclusive ? contrastive.tokens : ops::gather_rows(contrastive.tokens, target_rows);
    }
    const std::size_t before_recon = encoder.tokens_processed();
    const ImageEncoder::Output visible_out = encoder.encode(tokens_pe, visible);
    out.diagnostics.tokens_recon = encoder.tokens_processed() - before_recon;
    const Tensor reconstructions = model.decoder.decode(visible_out.tokens, out.plans, encoder.pe_table());
    out.l_rec = recon_loss(targets, reconstructions, mask_offsets, config.sg_side);
    out.total = ops::add(out.l_con, ops::scale(out.l_rec, static_cast<float>(config.lambda_rec)));
    out.diagnostics.l_rec = out.l_rec.item();
  }

  out.diagnostics.l_con = out.l_con.item();
  out.diagnostics.total = out.total.item();
  const auto n_dropped = static_cast<double>(std::count(dropped.begin(), dropped.end(), true));
  out.diagnostics.ped_dropped_fraction = n_dropped / static_cast<double>(b);
  return out;
}

}  // namespace cfm
