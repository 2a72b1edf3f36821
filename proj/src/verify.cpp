#include "cfm/verify.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <sstream>

#include "cfm/checkpoint.hpp"
#include "cfm/encoders.hpp"
#include "cfm/error.hpp"
#include "cfm/grad_check.hpp"
#include "cfm/objectives.hpp"
#include "cfm/ops.hpp"
#include "cfm/ovd_scoring.hpp"
#include "cfm/synth_world.hpp"

namespace cfm::verify {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

Tensor random(Shape shape, std::uint64_t seed, float stddev = 1.0f, bool requires_grad = false) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

// Weighted sum so the scalar depends on every output coordinate differently.
Tensor probe(const Tensor& y) { return ops::sum(ops::mul(y, random(y.shape(), 77))); }

struct GradCase {
  std::string name;
  Shape input;
  float stddev;
  std::function<Tensor(const Tensor&)> f;
};

std::vector<GradCase> grad_cases() {
  static const std::size_t seg[] = {0, 2, 3, 6};
  static const std::size_t pick_idx[] = {1, 0, 3};
  static const std::size_t gather_idx[] = {2, 0, 2, 3};
  static const std::size_t scatter_idx[] = {3, 1};
  static const float mask[] = {1, 0, 1, 0, 0, 1};
  static const std::size_t attn_off[] = {0, 3, 7};
  std::vector<GradCase> cases = {
      {"matmul", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::matmul(x, random({4, 2}, 9))); }},
      {"matmul_rhs", {4, 2}, 1.0f, [](const Tensor& x) { return probe(ops::matmul(random({3, 4}, 10), x)); }},
      {"transpose", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::transpose(x)); }},
      {"reshape", {2, 6}, 1.0f, [](const Tensor& x) { return probe(ops::reshape(x, {3, 4})); }},
      {"add", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::add(x, random({2, 3}, 11))); }},
      {"sub", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::sub(random({2, 3}, 11), x)); }},
      {"mul", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::mul(x, x)); }},
      {"scale", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::scale(x, -1.5f)); }},
      {"add_scalar", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::mul(ops::add_scalar(x, 0.5f), x)); }},
      {"add_bias", {3}, 1.0f, [](const Tensor& b) { return probe(ops::add_bias(random({4, 3}, 12), b)); }},
      {"mul_scalar", {1}, 1.0f, [](const Tensor& s) { return probe(ops::mul_scalar(random({3, 3}, 13), s)); }},
      {"exp", {2, 4}, 0.5f, [](const Tensor& x) { return probe(ops::exp(x)); }},
      {"sum", {2, 4}, 1.0f, [](const Tensor& x) { return ops::mul(ops::sum(x), ops::sum(x)); }},
      {"mean", {3, 4}, 1.0f, [](const Tensor& x) { return ops::mean(ops::mul(x, x)); }},
      {"sum_last", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::sum_last(x)); }},
      {"segment_mean", {6, 3}, 1.0f, [](const Tensor& x) { return probe(ops::segment_mean(x, seg)); }},
      {"mean_pool", {5, 3}, 1.0f, [](const Tensor& x) { return probe(ops::mean_pool(x)); }},
      {"softmax", {3, 5}, 1.0f, [](const Tensor& x) { return probe(ops::softmax(x, 1)); }},
      {"softmax_axis0", {3, 5}, 1.0f, [](const Tensor& x) { return probe(ops::softmax(x, 0)); }},
      {"log_softmax", {3, 5}, 1.0f, [](const Tensor& x) { return probe(ops::log_softmax(x, 1)); }},
      {"log_softmax_axis0", {4, 3}, 1.0f, [](const Tensor& x) { return probe(ops::log_softmax(x, 0)); }},
      {"pick", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::pick(x, pick_idx)); }},
      {"l2_normalize", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::l2_normalize(x)); }},
      {"layer_norm", {3, 6}, 1.0f,
       [](const Tensor& x) { return probe(ops::layer_norm(x, random({6}, 14), random({6}, 15))); }},
      {"layer_norm_gamma", {6}, 1.0f,
       [](const Tensor& g) { return probe(ops::layer_norm(random({3, 6}, 16), g, random({6}, 15))); }},
      {"layer_norm_beta", {6}, 1.0f,
       [](const Tensor& b) { return probe(ops::layer_norm(random({3, 6}, 16), random({6}, 14), b)); }},
      {"gelu", {3, 4}, 1.0f, [](const Tensor& x) { return probe(ops::gelu(x)); }},
      {"gather_rows", {4, 3}, 1.0f, [](const Tensor& x) { return probe(ops::gather_rows(x, gather_idx)); }},
      {"scatter_rows", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::scatter_rows(x, scatter_idx, 5)); }},
      {"apply_mask", {2, 3}, 1.0f, [](const Tensor& x) { return probe(ops::apply_mask(x, mask)); }},
  };
  for (bool causal : {false, true}) {
    const std::string suffix = causal ? "_causal" : "";
    cases.push_back({"attention_q" + suffix, {7, 8}, 1.0f, [causal](const Tensor& q) {
                       return probe(ops::attention(q, random({7, 8}, 17), random({7, 8}, 18), attn_off, 2, causal));
                     }});
    cases.push_back({"attention_k" + suffix, {7, 8}, 1.0f, [causal](const Tensor& k) {
                       return probe(ops::attention(random({7, 8}, 19), k, random({7, 8}, 18), attn_off, 2, causal));
                     }});
    cases.push_back({"attention_v" + suffix, {7, 8}, 1.0f, [causal](const Tensor& v) {
                       return probe(ops::attention(random({7, 8}, 19), random({7, 8}, 17), v, attn_off, 2, causal));
                     }});
  }
  return cases;
}

ModelConfig toy_model() {
  ModelConfig cfg;
  cfg.vit.image_size = 16;
  cfg.vit.patch_size = 4;
  cfg.vit.width = 16;
  cfg.vit.heads = 2;
  cfg.vit.depth = 1;
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
  const Tensor pixels = random({count * size * size * 3}, seed);
  batch.images.pixels.assign(pixels.data().begin(), pixels.data().end());
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> ids;
    for (int k = 0; k < 4; ++k) ids.push_back(2 + static_cast<int>(rng.below(17)));
    batch.captions.push_back(ids);
  }
  return batch;
}

CheckResult check(std::string name, bool passed, std::string detail) {
  return {std::move(name), passed, std::move(detail)};
}

// Runs `body`; any exception becomes a failure carrying its message.
CheckResult guarded(const std::string& name, const std::function<CheckResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return check(name, false, std::string("exception: ") + e.what());
  }
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<CheckResult> gradient_checks(std::size_t points) {
  std::vector<CheckResult> out;
  for (const auto& c : grad_cases()) {
    out.push_back(guarded("grad." + c.name, [&] {
      double worst = 0.0;
      for (std::size_t p = 0; p < points; ++p) {
        Tensor x = random(c.input, 1000 + p, c.stddev, true);
        worst = std::max(worst, grad_check([&] { return c.f(x); }, x).max_rel_error);
      }
      return check("grad." + c.name, worst < kGradTolerance,
                   "max_rel_error=" + fmt("%.3g", worst) + " points=" + std::to_string(points));
    }));
  }

  const ModelConfig mcfg = toy_model();
  const CfmModel model(mcfg, 4);
  const TrainBatch batch = toy_batch(2, 16, 9);
  const ParamSet params = model.params();
  for (BranchMode mode : {BranchMode::full, BranchMode::exclusive}) {
    const std::string name = std::string("grad.cfm_loss_") + (mode == BranchMode::full ? "full" : "exclusive");
    out.push_back(guarded(name, [&] {
      CfmConfig cfg;
      cfg.mode = mode;
      auto loss = [&] {
        Rng rng(7);
        return cfm_step_loss(model, batch, cfg, rng).total;
      };
      double worst = 0.0;
      std::string worst_param;
      std::size_t coords = 0;
      for (const char* p : {"image_enc/patch_embed/weight", "image_enc/block0/attn_q/weight",
                            "image_enc/block0/mlp_fc1/weight", "image_enc/ln_final/beta", "text_enc/token_embed",
                            "text_enc/proj/weight", "decoder/mask_token", "decoder/head/weight", "temperature"}) {
        const auto r = grad_check(loss, params.get(p), {.eps = 1e-3, .max_coords = points, .seed = 5});
        coords += r.checked;
        if (r.max_rel_error >= worst) {
          worst = r.max_rel_error;
          worst_param = p;
        }
      }
      return check(name, worst < kGradTolerance,
                   "max_rel_error=" + fmt("%.3g", worst) + " worst_param=" + worst_param +
                       " coords=" + std::to_string(coords));
    }));
  }
  return out;
}

std::vector<CheckResult> loss_identity_checks() {
  std::vector<CheckResult> out;
  out.push_back(guarded("loss.infonce_uniform", [] {
    double worst = 0.0;
    for (std::size_t b : {2, 4, 7, 16}) {
      const Tensor v({b, 4}, std::vector<float>(b * 4, 0.5f));
      const Tensor l = ops::l2_normalize(random({1, 4}, b));
      std::vector<float> rep;
      for (std::size_t i = 0; i < b; ++i) rep.insert(rep.end(), l.data().begin(), l.data().end());
      const double loss =
          infonce_total(v, Tensor({b, 4}, rep), Tensor::scalar(static_cast<float>(std::log(0.07)))).item();
      worst = std::max(worst, std::abs(loss - std::log(static_cast<double>(b))));
    }
    return check("loss.infonce_uniform", worst < 1e-6, "max_abs_error_vs_lnB=" + fmt("%.3g", worst));
  }));

  out.push_back(guarded("loss.recon_closed_forms", [] {
    const Tensor f = random({6, 8}, 1);
    const std::vector<std::size_t> offsets{0, 2, 6};
    const double same = recon_loss(f, f, offsets, SgSide::target).item();
    const double anti = recon_loss(f, ops::scale(f, -1.0f), offsets, SgSide::target).item();
    std::vector<float> a(12, 0.0f), b(12, 0.0f);
    for (int r = 0; r < 3; ++r) {
      a[r * 4 + r] = 1.0f + r;
      b[r * 4 + 3] = 2.0f;
    }
    const std::vector<std::size_t> off3{0, 3};
    const double orth = recon_loss(Tensor({3, 4}, a), Tensor({3, 4}, b), off3, SgSide::target).item();
    const bool ok = std::abs(same) < 1e-6 && std::abs(orth - 1.0) < 1e-6 && std::abs(anti - 2.0) < 1e-6;
    return check("loss.recon_closed_forms", ok,
                 "identical=" + fmt("%.3g", same) + " orthogonal=" + fmt("%.7g", orth) +
                     " antipodal=" + fmt("%.7g", anti));
  }));

  out.push_back(guarded("ensemble.collapses", [] {
    Rng rng(3);
    std::vector<float> p(6), z(6);
    for (auto& v : p) v = static_cast<float>(rng.uniform());
    for (auto& v : z) v = static_cast<float>(rng.uniform());
    const bool novel[] = {false, true, false, true, true, false};
    const auto a1 = ovd::ensemble_score(p, z, novel, 1.0, 1.0);
    const auto zp = ovd::ensemble_score(p, p, novel, 0.2, 0.65);
    const bool ok = a1 == p && zp == p;
    return check("ensemble.collapses", ok, std::string("alpha_beta_one_is_p=") + (a1 == p ? "1" : "0") +
                                               " z_equals_p_is_p=" + (zp == p ? "1" : "0"));
  }));
  return out;
}

std::vector<CheckResult> branch_parity_checks(std::size_t plans) {
  std::vector<CheckResult> out;
  out.push_back(guarded("mask.partition", [&] {
    std::size_t bad = 0, sampled = 0;
    const ModelConfig mcfg;
    const CfmModel model(mcfg, 1);
    CfmConfig excl;
    excl.mode = BranchMode::exclusive;
    excl.mask_ratio = 0.75;
    Rng rng(11);
    NoGradScope nograd;
    for (std::size_t step = 0; sampled < plans; ++step) {
      std::vector<synth::Scene> scenes;
      for (std::size_t i = 0; i < 8; ++i) scenes.push_back(synth::generate_pretrain_pair(mix_seed(5, step * 8 + i)));
      std::vector<const synth::Scene*> ptrs;
      TrainBatch batch;
      for (const auto& s : scenes) {
        ptrs.push_back(&s);
        batch.captions.push_back(s.caption);
      }
      batch.images = synth::to_image_batch(ptrs);
      const StepLoss s = cfm_step_loss(model, batch, excl, rng);
      for (std::size_t i = 0; i < s.plans.size() && sampled < plans; ++i, ++sampled) {
        std::vector<bool> seen(s.plans[i].total, false);
        std::size_t covered = 0;
        bool overlap = false;
        for (auto idx : s.contrastive_tokens[i]) {
          covered += !seen[idx];
          seen[idx] = true;
        }
        for (auto idx : s.plans[i].visible) {
          overlap |= seen[idx];
          covered += !seen[idx];
          seen[idx] = true;
        }
        if (overlap || covered != s.plans[i].total) ++bad;
      }
    }
    return check("mask.partition", bad == 0,
                 "plans=" + std::to_string(sampled) + " violations=" + std::to_string(bad));
  }));

  out.push_back(guarded("flop.exclusive_parity", [] {
    const ModelConfig mcfg;
    const CfmModel model(mcfg, 2);
    std::vector<synth::Scene> scenes;
    for (std::uint64_t i = 0; i < 8; ++i) scenes.push_back(synth::generate_pretrain_pair(i));
    std::vector<const synth::Scene*> ptrs;
    TrainBatch batch;
    for (const auto& s : scenes) {
      ptrs.push_back(&s);
      batch.captions.push_back(s.caption);
    }
    batch.images = synth::to_image_batch(ptrs);
    NoGradScope nograd;
    CfmConfig baseline;
    baseline.lambda_rec = 0.0;
    CfmConfig excl;
    excl.mode = BranchMode::exclusive;
    Rng r0(1), r1(1);
    const auto b = cfm_step_loss(model, batch, baseline, r0).diagnostics;
    const auto e = cfm_step_loss(model, batch, excl, r1).diagnostics;
    const std::size_t base_count = b.tokens_contrastive + b.tokens_recon;
    const std::size_t excl_count = e.tokens_contrastive + e.tokens_recon;
    return check("flop.exclusive_parity", base_count == excl_count,
                 "baseline_tokens=" + std::to_string(base_count) + " exclusive_tokens=" + std::to_string(excl_count));
  }));
  return out;
}

std::vector<CheckResult> stop_gradient_checks() {
  std::vector<CheckResult> out;
  for (SgSide side : {SgSide::target, SgSide::reconstruction}) {
    const std::string name = side == SgSide::target ? "sg.target_side" : "sg.reconstruction_side";
    out.push_back(guarded(name, [&] {
      // Loss level: the blocked operand gets an exactly zero gradient.
      const std::vector<std::size_t> offsets{0, 3};
      const Tensor f = random({3, 4}, 1, 1.0f, true);
      const Tensor g = random({3, 4}, 2, 1.0f, true);
      {
        Graph graph;
        GraphScope scope(graph);
        graph.backward(recon_loss(f, g, offsets, side));
      }
      const Tensor& blocked = side == SgSide::target ? f : g;
      double blocked_sum = 0.0;
      if (blocked.has_grad())
        for (float v : blocked.grad()) blocked_sum += std::abs(v);

      // Full step: decoder parameters receive nothing when the
      // reconstruction side is blocked.
      const ModelConfig mcfg = toy_model();
      const CfmModel model(mcfg, 3);
      CfmConfig cfg;
      cfg.sg_side = side;
      {
        Graph graph;
        GraphScope scope(graph);
        Rng rng(1);
        graph.backward(cfm_step_loss(model, toy_batch(2, 16, 8), cfg, rng).l_rec);
      }
      double decoder_sum = 0.0;
      for (const auto& [pname, p] : model.params())
        if (pname.rfind("decoder/", 0) == 0 && p.has_grad())
          for (float v : p.grad()) decoder_sum += std::abs(v);
      const bool ok = blocked_sum == 0.0 && (side == SgSide::target ? decoder_sum > 0.0 : decoder_sum == 0.0);
      return check(name, ok,
                   std::string(side == SgSide::target ? "target" : "reconstruction") +
                       "_grad_l1=" + fmt("%.3g", blocked_sum) + " decoder_grad_l1=" + fmt("%.3g", decoder_sum));
    }));
  }
  return out;
}

std::vector<CheckResult> ped_checks(std::size_t draws) {
  std::vector<CheckResult> out;
  const Tensor pe = sinusoidal_pe_2d(2, 2, 8);
  const Tensor tokens = random({4, 8}, 1);
  out.push_back(guarded("ped.frequency", [&] {
    Rng rng(2024);
    std::vector<bool> dropped;
    std::size_t count = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      apply_ped(tokens, pe, 0.5, Mode::train, rng, &dropped);
      count += dropped[0];
    }
    const double freq = static_cast<double>(count) / static_cast<double>(draws);
    return check("ped.frequency", freq >= 0.48 && freq <= 0.52,
                 "drop_frequency=" + fmt("%.4f", freq) + " draws=" + std::to_string(draws));
  }));
  std::vector<float> with_pe(tokens.data().begin(), tokens.data().end());
  for (std::size_t i = 0; i < with_pe.size(); ++i) with_pe[i] += pe.data()[i];
  out.push_back(guarded("ped.eval_adds_pe", [&] {
    bool ok = true;
    for (double p : {0.0, 0.5, 1.0}) {
      Rng rng(3);
      const Tensor r = apply_ped(tokens, pe, p, Mode::eval, rng);
      ok &= std::vector<float>(r.data().begin(), r.data().end()) == with_pe;
    }
    return check("ped.eval_adds_pe", ok, "probabilities=0,0.5,1");
  }));
  out.push_back(guarded("ped.p1_is_no_pe", [&] {
    Rng rng(4);
    const Tensor r = apply_ped(tokens, pe, 1.0, Mode::train, rng);
    const bool ok = std::vector<float>(r.data().begin(), r.data().end()) ==
                    std::vector<float>(tokens.data().begin(), tokens.data().end());
    return check("ped.p1_is_no_pe", ok, "bitwise");
  }));
  return out;
}

std::vector<CheckResult> pe_interpolation_checks() {
  std::vector<CheckResult> out;
  out.push_back(guarded("pe.interpolation_identity", [] {
    bool ok = true;
    for (std::size_t g : {2, 4, 7}) {
      const Tensor pe = sinusoidal_pe_2d(g, g, 16);
      const Tensor same = interpolate_pe(pe, g, g, g, g);
      ok &= std::vector<float>(same.data().begin(), same.data().end()) ==
            std::vector<float>(pe.data().begin(), pe.data().end());
    }
    const Tensor constant = Tensor::full({4, 8}, 0.3f);
    const Tensor up = interpolate_pe(constant, 2, 2, 8, 8);
    double worst = 0.0;
    for (float v : up.data()) worst = std::max(worst, std::abs(static_cast<double>(v) - 0.3f));
    ok &= worst < 1e-6;
    return check("pe.interpolation_identity", ok, "constant_max_dev=" + fmt("%.3g", worst));
  }));
  return out;
}

std::vector<CheckResult> roundtrip_checks(const std::filesystem::path& dir) {
  std::vector<CheckResult> out;
  std::filesystem::create_directories(dir);
  out.push_back(guarded("io.dataset_roundtrip", [&] {
    synth::Dataset ds;
    ds.kind = synth::DatasetKind::detect;
    for (std::uint64_t i = 0; i < 20; ++i)
      ds.records.push_back(synth::generate_detection_scene(i, synth::default_split(), synth::Phase::train));
    const auto a = dir / "verify_a.cfmd";
    const auto b = dir / "verify_b.cfmd";
    synth::write_dataset(a, ds);
    const synth::Dataset back = synth::read_dataset(a);
    synth::write_dataset(b, back);
    const bool ok = back.records == ds.records && back.kind == ds.kind && slurp(a) == slurp(b);
    return check("io.dataset_roundtrip", ok, "records=" + std::to_string(back.records.size()));
  }));
  out.push_back(guarded("io.checkpoint_roundtrip", [&] {
    const ModelConfig mcfg;
    const CfmModel a(mcfg, 1);
    const CfmModel b(mcfg, 2);
    const auto pa = dir / "verify_a.cfmw";
    const auto pb = dir / "verify_b.cfmw";
    write_checkpoint(pa, a.params());
    load_checkpoint(pa, b.params());
    write_checkpoint(pb, b.params());
    const std::vector<std::vector<int>> caption{{2, 3, 4}};
    NoGradScope nograd;
    const Tensor ea = a.text.encode(caption);
    const Tensor eb = b.text.encode(caption);
    const bool same_out = std::vector<float>(ea.data().begin(), ea.data().end()) ==
                          std::vector<float>(eb.data().begin(), eb.data().end());
    const bool ok = slurp(pa) == slurp(pb) && weight_hash(a.params()) == weight_hash(b.params()) && same_out;
    return check("io.checkpoint_roundtrip", ok, "bytes=" + std::to_string(std::filesystem::file_size(pa)));
  }));
  return out;
}

std::vector<CheckResult> run_all(const std::filesystem::path& scratch_dir) {
  std::vector<CheckResult> all;
  for (auto&& group : {gradient_checks(), loss_identity_checks(), branch_parity_checks(), stop_gradient_checks(),
                       ped_checks(), pe_interpolation_checks(), roundtrip_checks(scratch_dir)}) {
    all.insert(all.end(), group.begin(), group.end());
  }
  return all;
}

void print(std::ostream& out, const CheckResult& r) {
  out << "CHECK " << r.name << ' ' << (r.passed ? "PASS" : "FAIL") << ' ' << r.detail << '\n';
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.passed) return false;
  return true;
}

}  // namespace cfm::verify
