#include <cmath>
#include <numeric>

#include "cfm/error.hpp"
#include "cfm/grad_check.hpp"
#include "cfm/objectives.hpp"
#include "cfm/ops.hpp"
#include "cfm/synth_world.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cfm;
using cfm::test::random_tensor;
using cfm::test::to_vec;

namespace {

Tensor unit_rows(Shape shape, std::uint64_t seed) { return ops::l2_normalize(random_tensor(std::move(shape), seed)); }

Tensor log_tau(double tau) { return Tensor::scalar(static_cast<float>(std::log(tau))); }

// −(1/B) Σᵢ log(exp(sᵢᵢ/τ) / Σⱼ exp(sᵢⱼ/τ)) evaluated directly in double; with
// `transpose` the inner sum runs over images instead.
double oracle_infonce(const Tensor& v, const Tensor& l, double tau, bool transpose) {
  const std::size_t b = v.rows(), d = v.cols();
  auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(v.at(i, c)) * l.at(j, c);
    return s / tau;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < b; ++j) denom += std::exp(transpose ? sim(j, i) : sim(i, j));
    total += std::log(std::exp(sim(i, i)) / denom);
  }
  return -total / static_cast<double>(b);
}

ModelConfig toy_model() {
  ModelConfig cfg;
  cfg.vit.image_size = 16;
  cfg.vit.patch_size = 4;
  cfg.vit.width = 16;
  cfg.vit.heads = 2;
  cfg.vit.depth = 1;
  cfg.vit.ped_prob = 0.5;
  cfg.text.width = 16;
  cfg.text.heads = 2;
  cfg.text.depth = 1;
  cfg.text.max_len = 8;
  cfg.text.vocab_size = 20;
  return cfg;
}

TrainBatch toy_batch(std::size_t count, std::size_t size, std::uint64_t seed) {
  TrainBatch batch;
  batch.images.count = count;
  batch.images.size = size;
  batch.images.pixels = to_vec(random_tensor({count * size * size * 3}, seed));
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> ids;
    for (int k = 0; k < 4; ++k) ids.push_back(2 + static_cast<int>(rng.below(17)));
    batch.captions.push_back(ids);
  }
  return batch;
}

}  // namespace

TEST_CASE("InfoNCE closed forms") {
  const Tensor same = ops::l2_normalize(Tensor({2, 3}, {1, 2, 3, 1, 2, 3}));
  CHECK(infonce_i2t(same, same, log_tau(0.1)).item() == doctest::Approx(0.69315).epsilon(1e-5));
  for (std::size_t b : {2, 4, 7}) {
    std::vector<float> ones(b * 4, 0.5f);
    const Tensor v({b, 4}, ones);
    const Tensor l = ops::l2_normalize(random_tensor({1, 4}, b));
    std::vector<float> lrep;
    for (std::size_t i = 0; i < b; ++i) lrep.insert(lrep.end(), l.data().begin(), l.data().end());
    const Tensor lt({b, 4}, lrep);
    CHECK(std::abs(infonce_total(v, lt, log_tau(0.07)).item() - std::log(static_cast<double>(b))) < 1e-6);
  }

  // Orthonormal matched pairs at τ = 1e-3.
  std::vector<float> eye(16, 0.0f);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0f;
  const Tensor id({4, 4}, eye);
  CHECK(infonce_i2t(id, id, log_tau(1e-3)).item() < 1e-3);

  CHECK_THROWS_AS(infonce_i2t(unit_rows({1, 4}, 1), unit_rows({1, 4}, 2), log_tau(0.1)), ContractError);
  CHECK_THROWS_AS(infonce_i2t(random_tensor({3, 4}, 1), unit_rows({3, 4}, 2), log_tau(0.1)), ContractError);
}

TEST_CASE("InfoNCE matches the double-loop oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor v = unit_rows({4, 8}, seed), l = unit_rows({4, 8}, seed + 100);
    const double tau = 0.1;
    const double i2t = oracle_infonce(v, l, tau, false);
    const double t2i = oracle_infonce(v, l, tau, true);
    CHECK(std::abs(infonce_i2t(v, l, log_tau(tau)).item() - i2t) < 1e-6 * std::max(1.0, i2t) * 4);
    CHECK(std::abs(infonce_t2i(v, l, log_tau(tau)).item() - t2i) < 1e-6 * std::max(1.0, t2i) * 4);
    CHECK(std::abs(infonce_total(v, l, log_tau(tau)).item() - 0.5 * (i2t + t2i)) < 1e-6 * std::max(1.0, i2t) * 4);
  }
  // Symmetric similarity matrix: v = l.
  const Tensor v = unit_rows({5, 8}, 3);
  const float a = infonce_i2t(v, v, log_tau(0.2)).item();
  CHECK(infonce_t2i(v, v, log_tau(0.2)).item() == doctest::Approx(a).epsilon(1e-6));
  CHECK(infonce_total(v, v, log_tau(0.2)).item() == doctest::Approx(a).epsilon(1e-6));
}

TEST_CASE("InfoNCE invariances") {
  const Tensor v = unit_rows({6, 8}, 1), l = unit_rows({6, 8}, 2);
  const float base = infonce_total(v, l, log_tau(0.1)).item();

  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  CHECK(infonce_total(ops::gather_rows(v, perm), ops::gather_rows(l, perm), log_tau(0.1)).item() ==
        doctest::Approx(base).epsilon(1e-5));

  // Random orthogonal matrix via Gram-Schmidt.
  const Tensor g = random_tensor({8, 8}, 77);
  std::vector<double> q(64);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) q[r * 8 + c] = g.at(r, c);
    for (std::size_t p = 0; p < r; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 8; ++c) dot += q[r * 8 + c] * q[p * 8 + c];
      for (std::size_t c = 0; c < 8; ++c) q[r * 8 + c] -= dot * q[p * 8 + c];
    }
    double n = 0.0;
    for (std::size_t c = 0; c < 8; ++c) n += q[r * 8 + c] * q[r * 8 + c];
    for (std::size_t c = 0; c < 8; ++c) q[r * 8 + c] /= std::sqrt(n);
  }
  const Tensor rot({8, 8}, std::vector<float>(q.begin(), q.end()));
  const Tensor vr = ops::l2_normalize(ops::matmul(v, rot)), lr = ops::l2_normalize(ops::matmul(l, rot));
  CHECK(infonce_total(vr, lr, log_tau(0.1)).item() == doctest::Approx(base).epsilon(1e-5));
}

TEST_CASE("mask sampling") {
  Rng rng(1);
  const MaskPlan big = sample_mask(196, 0.75, rng);
  CHECK(big.masked.size() == 147);
  CHECK(big.visible.size() == 49);
  CHECK(big.is_partition());
  CHECK(sample_mask(16, 0.75, rng).masked.size() == 12);

  Rng a(5), b(5);
  CHECK(sample_mask(16, 0.75, a).masked == sample_mask(16, 0.75, b).masked);

  std::vector<int> counts(16, 0);
  Rng draws(99);
  for (int i = 0; i < 10000; ++i)
    for (auto m : sample_mask(16, 0.75, draws).masked) ++counts[m];
  for (int c : counts) {
    CHECK(c / 10000.0 >= 0.73);
    CHECK(c / 10000.0 <= 0.77);
  }

  CHECK_THROWS_AS(sample_mask(16, 0.0, rng), ContractError);
  CHECK_THROWS_AS(sample_mask(16, 1.0, rng), ContractError);
  CHECK_THROWS_AS(sample_mask(1, 0.5, rng), ContractError);
  CHECK_THROWS_AS(sample_mask(4, 0.9, rng), ContractError);  // rounds to all 4
  CHECK_THROWS_AS(sample_mask(4, 0.1, rng), ContractError);  // rounds to none
}

TEST_CASE("reconstruction loss closed forms and invariances") {
  const Tensor f = random_tensor({6, 8}, 1);
  const std::vector<std::size_t> offsets{0, 2, 6};
  CHECK(std::abs(recon_loss(f, f, offsets, SgSide::target).item()) < 1e-6);
  CHECK(recon_loss(f, ops::scale(f, -1.0f), offsets, SgSide::target).item() == doctest::Approx(2.0).epsilon(1e-6));

  std::vector<float> a(12, 0.0f), b(12, 0.0f);
  for (int r = 0; r < 3; ++r) {
    a[r * 4 + r] = 1.0f + r;
    b[r * 4 + 3] = 2.0f;
  }
  const std::vector<std::size_t> off3{0, 3};
  CHECK(recon_loss(Tensor({3, 4}, a), Tensor({3, 4}, b), off3, SgSide::target).item() == doctest::Approx(1.0));

  const Tensor g = random_tensor({6, 8}, 2);
  const float base = recon_loss(f, g, offsets, SgSide::target).item();
  CHECK(base >= 0.0f);
  CHECK(base <= 2.0f);
  CHECK(recon_loss(ops::scale(f, 3.5f), g, offsets, SgSide::target).item() == doctest::Approx(base).epsilon(1e-5));
  CHECK(recon_loss(f, ops::scale(g, 0.01f), offsets, SgSide::reconstruction).item() ==
        doctest::Approx(base).epsilon(1e-5));

  // Per-image mean, then mean over images: image 0 has 2 rows, image 1 has 4.
  double oracle = 0.0;
  for (std::size_t img = 0; img < 2; ++img) {
    double s = 0.0;
    for (std::size_t r = offsets[img]; r < offsets[img + 1]; ++r) {
      double dot = 0.0, nf = 0.0, ng = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        dot += f.at(r, c) * g.at(r, c);
        nf += f.at(r, c) * f.at(r, c);
        ng += g.at(r, c) * g.at(r, c);
      }
      s += dot / std::sqrt(nf * ng);
    }
    oracle += s / static_cast<double>(offsets[img + 1] - offsets[img]);
  }
  CHECK(base == doctest::Approx(1.0 - oracle / 2.0).epsilon(1e-6));

  CHECK_THROWS_AS(recon_loss(Tensor::zeros({2, 4}), random_tensor({2, 4}, 1), std::vector<std::size_t>{0, 2},
                             SgSide::target),
                  DegenerateNormError);
}

TEST_CASE("stop-gradient side selects which features receive gradient") {
  const std::vector<std::size_t> offsets{0, 3};
  for (SgSide side : {SgSide::target, SgSide::reconstruction}) {
    const Tensor f = random_tensor({3, 4}, 1, 1.0f, true);
    const Tensor g = random_tensor({3, 4}, 2, 1.0f, true);
    Graph graph;
    {
      GraphScope scope(graph);
      graph.backward(recon_loss(f, g, offsets, side));
    }
    const Tensor& blocked = side == SgSide::target ? f : g;
    const Tensor& live = side == SgSide::target ? g : f;
    for (float v : blocked.grad()) CHECK(v == 0.0f);
    double norm = 0.0;
    for (float v : live.grad()) norm += std::abs(v);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("step loss token accounting and branch masking") {
  const ModelConfig mcfg = toy_model();
  const CfmModel model(mcfg, 1);
  const TrainBatch batch = toy_batch(4, 16, 3);
  const std::size_t t = mcfg.vit.tokens();

  CfmConfig base_cfg;
  base_cfg.lambda_rec = 0.0;
  Rng r0(1);
  const StepLoss baseline = cfm_step_loss(model, batch, base_cfg, r0);
  CHECK(baseline.diagnostics.tokens_contrastive == 4 * t);
  CHECK(baseline.diagnostics.tokens_recon == 0);
  CHECK_FALSE(baseline.l_rec.defined());
  CHECK(baseline.total.item() == baseline.l_con.item());

  CfmConfig excl;
  excl.mode = BranchMode::exclusive;
  Rng r1(1);
  const StepLoss e = cfm_step_loss(model, batch, excl, r1);
  CHECK(e.diagnostics.tokens_contrastive == 4 * 12);
  CHECK(e.diagnostics.tokens_recon == 4 * 4);
  CHECK(e.diagnostics.tokens_contrastive + e.diagnostics.tokens_recon == baseline.diagnostics.tokens_contrastive);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(e.plans[i].is_partition());
    CHECK(e.contrastive_tokens[i] == e.plans[i].masked);
  }

  CfmConfig full;
  Rng r2(1);
  const StepLoss f = cfm_step_loss(model, batch, full, r2);
  CHECK(f.diagnostics.tokens_contrastive + f.diagnostics.tokens_recon == 4 * t + 4 * 4);
  CHECK(static_cast<double>(f.diagnostics.tokens_contrastive + f.diagnostics.tokens_recon) /
            baseline.diagnostics.tokens_contrastive ==
        doctest::Approx(1.25));
  CHECK(f.total.item() == doctest::Approx(f.l_con.item() + 2.0 * f.l_rec.item()).epsilon(1e-6));

  // λ_rec = 0 reduces the total to the contrastive term computed on its own.
  ModelConfig no_ped = mcfg;
  no_ped.vit.ped_prob = 0.0;
  const CfmModel m2(no_ped, 1);
  Rng r3(4);
  const StepLoss z = cfm_step_loss(m2, batch, base_cfg, r3);
  const Tensor tokens = ops::add(m2.image.embed(patchify_batch(batch.images, 4)),
                                 [&] {
                                   std::vector<float> pe;
                                   for (int i = 0; i < 4; ++i)
                                     pe.insert(pe.end(), m2.image.pe_table().data().begin(),
                                               m2.image.pe_table().data().end());
                                   return Tensor({4 * t, 16}, pe);
                                 }());
  std::vector<std::vector<std::size_t>> fed(4, std::vector<std::size_t>(t));
  for (auto& f_ : fed) std::iota(f_.begin(), f_.end(), std::size_t{0});
  const Tensor v = ops::l2_normalize(m2.image.encode(tokens, fed).pooled);
  const Tensor l = ops::l2_normalize(m2.text.encode(batch.captions));
  CHECK(z.total.item() == infonce_total(v, l, m2.log_temperature).item());
}

TEST_CASE("PED outcome is shared by both branches") {
  ModelConfig mcfg = toy_model();
  mcfg.vit.ped_prob = 0.5;
  const CfmModel model(mcfg, 2);
  const TrainBatch batch = toy_batch(8, 16, 5);
  CfmConfig cfg;
  Rng rng(3);
  const StepLoss s = cfm_step_loss(model, batch, cfg, rng);
  CHECK(s.diagnostics.ped_dropped_fraction > 0.0);
  CHECK(s.diagnostics.ped_dropped_fraction < 1.0);
}

TEST_CASE("stop-gradient contract through the full step") {
  const ModelConfig mcfg = toy_model();
  const TrainBatch batch = toy_batch(2, 16, 8);
  for (SgSide side : {SgSide::target, SgSide::reconstruction}) {
    const CfmModel model(mcfg, 3);
    CfmConfig cfg;
    cfg.sg_side = side;
    cfg.lambda_rec = 2.0;
    Graph graph;
    {
      GraphScope scope(graph);
      Rng rng(1);
      const StepLoss s = cfm_step_loss(model, batch, cfg, rng);
      graph.backward(s.l_rec);
    }
    const ParamSet params = model.params();
    double decoder_grad = 0.0;
    for (const auto& [name, p] : params)
      if (name.rfind("decoder/", 0) == 0 && p.has_grad())
        for (float v : p.grad()) decoder_grad += std::abs(v);
    if (side == SgSide::reconstruction) CHECK(decoder_grad == 0.0);
    else CHECK(decoder_grad > 0.0);
  }
}

TEST_CASE("full CFM loss passes the gradient check") {
  const ModelConfig mcfg = toy_model();
  const CfmModel model(mcfg, 4);
  const TrainBatch batch = toy_batch(2, 16, 9);
  const ParamSet params = model.params();
  for (BranchMode mode : {BranchMode::full, BranchMode::exclusive}) {
    CfmConfig cfg;
    cfg.mode = mode;
    auto loss = [&] {
      Rng rng(7);
      return cfm_step_loss(model, batch, cfg, rng).total;
    };
    for (const char* name : {"image_enc/patch_embed/weight", "image_enc/block0/attn_q/weight",
                             "image_enc/ln_final/beta", "text_enc/token_embed", "text_enc/proj/weight",
                             "decoder/mask_token", "decoder/head/weight", "temperature"}) {
      const std::string param = name;
      CAPTURE(param);
      const auto r = grad_check(loss, params.get(name), {.eps = 1e-3, .max_coords = 20, .seed = 5});
      CHECK(r.max_rel_error < 1e-3);
    }
  }
}
