#include "cfm/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <ostream>
#include <thread>

#include "cfm/bounded_queue.hpp"
#include "cfm/error.hpp"
#include "cfm/ops.hpp"

namespace cfm::train {

double lr_at(std::size_t step, const Schedule& s) {
  if (s.total == 0 || s.warmup > s.total) throw ContractError("schedule: need 0 < total and warmup <= total");
  if (step > s.total) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total));
  }
  if (step < s.warmup) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup);
  if (s.total == s.warmup) return s.base_lr;
  return s.base_lr * static_cast<double>(s.total - step) / static_cast<double>(s.total - s.warmup);
}

void AdamW::add_group(const ParamSet& params, double lr_scale) {
  for (const auto& [name, tensor] : params) {
    slots_.push_back({name, tensor, std::vector<float>(tensor.numel(), 0.0f), std::vector<float>(tensor.numel(), 0.0f),
                      lr_scale, tensor.ndim() >= 2});
  }
}

void AdamW::step(double lr) {
  for (const auto& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    for (float g : slot.param.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + slot.name + "'");
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& slot : slots_) {
    const double rate = lr * slot.lr_scale;
    const double decay = slot.decay ? config_.weight_decay : 0.0;
    const bool has_grad = slot.param.has_grad();
    std::span<const float> grad = has_grad ? slot.param.grad() : std::span<const float>();
    auto p = slot.param.data_mut();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      const double m = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * g;
      const double v = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * g * g;
      slot.m[i] = static_cast<float>(m);
      slot.v[i] = static_cast<float>(v);
      if (rate == 0.0) continue;
      const double update = (m / c1) / (std::sqrt(v / c2) + config_.eps) + decay * p[i];
      p[i] = static_cast<float>(p[i] - rate * update);
    }
  }
}

std::uint64_t pretrain_pair_seed(std::uint64_t data_seed, std::uint64_t index) { return mix_seed(data_seed, index); }

std::uint64_t held_out_pair_seed(std::uint64_t data_seed, std::uint64_t index) {
  return mix_seed(data_seed, (std::uint64_t{1} << 48) + index);
}

std::vector<synth::Scene> held_out_pairs(std::uint64_t data_seed, std::size_t count) {
  std::vector<synth::Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth::generate_pretrain_pair(held_out_pair_seed(data_seed, i)));
  return out;
}

TrainBatch make_batch(const std::vector<const synth::Scene*>& scenes) {
  TrainBatch batch;
  batch.images = synth::to_image_batch(scenes);
  for (const auto* s : scenes) batch.captions.push_back(s->caption);
  return batch;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Feeds batches for steps 1..total from a producer thread through a bounded
// queue. Batch contents depend only on the step index.
class BatchFeed {
 public:
  BatchFeed(const PretrainConfig& config, const synth::Dataset* dataset)
      : queue_(std::max<std::size_t>(1, config.prefetch)) {
    thread_ = std::thread([this, config, dataset] {
      try {
        std::vector<std::size_t> order;
        for (std::size_t step = 1; step <= config.schedule.total; ++step) {
          std::vector<synth::Scene> owned;
          std::vector<const synth::Scene*> scenes;
          for (std::size_t i = 0; i < config.batch_size; ++i) {
            const std::uint64_t index = (step - 1) * config.batch_size + i;
            if (dataset) {
              const std::size_t n = dataset->records.size();
              const std::size_t epoch = index / n;
              if (order.empty() || index % n == 0) {
                order.resize(n);
                for (std::size_t k = 0; k < n; ++k) order[k] = k;
                Rng rng(mix_seed(config.data_seed, epoch));
                rng.shuffle(order);
              }
              scenes.push_back(&dataset->records[order[index % n]]);
            } else {
              owned.push_back(synth::generate_pretrain_pair(pretrain_pair_seed(config.data_seed, index)));
            }
          }
          for (const auto& s : owned) scenes.push_back(&s);
          if (!queue_.push(make_batch(scenes))) return;
        }
      } catch (...) {
        error_ = std::current_exception();
      }
      queue_.close();
    });
  }

  ~BatchFeed() {
    queue_.close();
    if (thread_.joinable()) thread_.join();
  }

  TrainBatch next() {
    auto item = queue_.pop();
    if (!item) {
      if (thread_.joinable()) thread_.join();
      if (error_) std::rethrow_exception(error_);
      throw ContractError("batch feed ended early");
    }
    return std::move(*item);
  }

 private:
  BoundedQueue<TrainBatch> queue_;
  std::thread thread_;
  std::exception_ptr error_;
};

double squared_distance(const ParamSet& params, const std::vector<std::vector<float>>& before) {
  double acc = 0.0;
  std::size_t i = 0;
  for (const auto& [name, t] : params) {
    auto now = t.data();
    for (std::size_t k = 0; k < now.size(); ++k) acc += std::pow(static_cast<double>(now[k]) - before[i][k], 2);
    ++i;
  }
  return acc;
}

std::vector<std::vector<float>> snapshot(const ParamSet& params) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

}  // namespace

PretrainResult pretrain(const PretrainConfig& config, std::ostream* progress) {
  if (config.batch_size < 2) throw ConfigError("pretraining batch_size must be at least 2");
  if (config.out_dir.empty()) throw ConfigError("pretraining needs an output directory");
  std::optional<synth::Dataset> dataset;
  if (!config.dataset.empty()) {
    dataset = synth::read_dataset(config.dataset);
    if (dataset->kind != synth::DatasetKind::pretrain || dataset->records.empty()) {
      throw DataError("'" + config.dataset.string() + "' is not a non-empty pretraining dataset");
    }
  }
  std::filesystem::create_directories(config.out_dir);

  CfmModel model(config.model, config.seed);
  const ParamSet params = model.params();
  AdamW optimizer(config.optimizer);
  optimizer.add_group(params, 1.0);
  Rng rng(mix_seed(config.seed, 10));

  PretrainResult result;
  result.metrics = config.out_dir / "pretrain_metrics.csv";
  result.checkpoint = config.out_dir / "pretrain.cfmw";
  result.frozen_checkpoint = config.out_dir / "frozen.cfmw";
  std::ofstream csv(result.metrics);
  if (!csv) throw IoError("cannot write '" + result.metrics.string() + "'");
  csv << "step,L_con,L_rec,total,tokens_contrastive,tokens_recon,ped_dropped_fraction\n";

  BatchFeed feed(config, dataset ? &*dataset : nullptr);
  for (std::size_t step = 1; step <= config.schedule.total; ++step) {
    const TrainBatch batch = feed.next();
    params.zero_grad();
    StepDiagnostics diag;
    try {
      Graph graph;
      GraphScope scope(graph);
      const StepLoss loss = cfm_step_loss(model, batch, config.objective, rng);
      diag = loss.diagnostics;
      if (!std::isfinite(diag.total)) throw NumericError("non-finite loss");
      graph.backward(loss.total);
      optimizer.step(lr_at(step, config.schedule));
    } catch (const NumericError& e) {
      throw NumericError("pretraining step " + std::to_string(step) + ": " + e.what());
    } catch (const DegenerateNormError& e) {
      throw NumericError("pretraining step " + std::to_string(step) + ": " + e.what());
    }
    model.clamp_temperature();
    result.history.push_back(diag);
    csv << step << ',' << fmt(diag.l_con) << ',' << fmt(diag.l_rec) << ',' << fmt(diag.total) << ','
        << diag.tokens_contrastive << ',' << diag.tokens_recon << ',' << fmt(diag.ped_dropped_fraction) << '\n';
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.schedule.total) {
      write_checkpoint(config.out_dir / ("pretrain_step" + std::to_string(step) + ".cfmw"), params);
    }
    if (progress && (step % 100 == 0 || step == config.schedule.total)) {
      *progress << "pretrain step " << step << " total=" << fmt(diag.total) << " L_con=" << fmt(diag.l_con)
                << " L_rec=" << fmt(diag.l_rec) << '\n';
    }
  }
  csv.close();
  if (!csv) throw IoError("failed writing '" + result.metrics.string() + "'");
  write_checkpoint(result.checkpoint, params);
  write_checkpoint(result.frozen_checkpoint, params);
  result.temperature = model.temperature();
  return result;
}

Detector::Detector(const ModelConfig& config, std::uint64_t seed) : model(config, seed), head(config.vit.width) {}

ParamSet Detector::params() const {
  ParamSet set = model.params();
  head.register_params(set);
  return set;
}

ParamSet Detector::backbone_params() const {
  ParamSet set;
  model.image.register_params(set);
  return set;
}

ParamSet Detector::head_params() const {
  ParamSet set;
  head.register_params(set);
  return set;
}

ovd::CategorySpace default_category_space(const TextEncoder& text) {
  const synth::Split& split = synth::default_split();
  return ovd::build_category_space(
      synth::category_names(), split.base, split.novel, synth::prompt_templates(), text,
      [](std::string_view s) { return synth::Vocabulary::instance().tokenize(s); });
}

std::vector<int> training_labels(const synth::Scene& scene, std::size_t negatives, const ovd::CategorySpace& space) {
  const int background = static_cast<int>(space.base.size());
  std::vector<int> labels;
  for (const auto& a : scene.annotations) {
    if (a.label < 0) {
      labels.push_back(background);
      continue;
    }
    if (space.is_novel(a.label)) {
      throw ContractError("category leakage: novel category '" + space.names[static_cast<std::size_t>(a.label)] +
                          "' reached the finetuning loss");
    }
    const auto it = std::find(space.base.begin(), space.base.end(), a.label);
    if (it == space.base.end()) throw ContractError("finetuning label outside the base categories");
    labels.push_back(static_cast<int>(it - space.base.begin()));
  }
  labels.insert(labels.end(), negatives, background);
  return labels;
}

FinetuneResult finetune(const FinetuneConfig& config, std::ostream* progress) {
  if (!(config.backbone_lr_ratio >= 0.0 && config.backbone_lr_ratio <= 1.0)) {
    throw ConfigError("backbone_lr_ratio must lie in [0, 1]");
  }
  if (config.out.empty()) throw ConfigError("finetuning needs an output checkpoint path");
  Detector det(config.model, config.seed);
  const ParamSet all = det.params();
  {
    const ParamSet pretrained = det.model.params();
    load_checkpoint(config.pretrained, pretrained);
  }
  det.model.image.set_resolution(config.image_size, config.pe_resize);
  const ovd::CategorySpace space = default_category_space(det.model.text);
  const float tau = det.model.temperature();

  const ParamSet backbone = det.backbone_params();
  const ParamSet head = det.head_params();
  AdamW optimizer(config.optimizer);
  if (config.backbone_lr_ratio > 0.0) optimizer.add_group(backbone, config.backbone_lr_ratio);
  optimizer.add_group(head, 1.0);

  FinetuneResult result;
  result.checkpoint = config.out;
  result.backbone_hash_before = weight_hash(backbone);
  const synth::Split& split = synth::default_split();

  for (std::size_t step = 1; step <= config.schedule.total; ++step) {
    std::vector<synth::Scene> scenes;
    std::vector<ovd::Region> regions;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      const std::uint64_t seed = mix_seed(config.data_seed, (step - 1) * config.batch_size + i);
      scenes.push_back(synth::generate_detection_scene(seed, split, synth::Phase::train));
      const synth::Scene& s = scenes.back();
      const auto negatives = synth::sample_negative_boxes(s, config.negatives_per_image, seed);
      for (const auto& a : s.annotations) regions.push_back({i, a.box});
      for (const auto& b : negatives) regions.push_back({i, b});
      for (int l : training_labels(s, negatives.size(), space)) labels.push_back(static_cast<std::size_t>(l));
    }
    std::vector<const synth::Scene*> ptrs;
    for (const auto& s : scenes) ptrs.push_back(&s);
    const ImageBatch images = synth::to_image_batch(ptrs);

    all.zero_grad();
    const bool first = step == 1;
    std::vector<std::vector<float>> backbone_before, head_before;
    if (first) {
      backbone_before = snapshot(backbone);
      head_before = snapshot(head);
    }
    double loss_value = 0.0;
    try {
      Graph graph;
      GraphScope scope(graph);
      const Tensor features = ovd::backbone_features(det.model.image, images);
      const Tensor emb = ovd::region_embeddings(features, regions, det.model.image, det.head);
      const Tensor logits = ovd::detection_logits(emb, space, ovd::Phase::train, tau);
      const Tensor loss = ops::scale(ops::mean(ops::pick(ops::log_softmax(logits, 1), labels)), -1.0f);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
      graph.backward(loss);
      optimizer.step(lr_at(step, config.schedule));
    } catch (const NumericError& e) {
      throw NumericError("finetuning step " + std::to_string(step) + ": " + e.what());
    } catch (const DegenerateNormError& e) {
      throw NumericError("finetuning step " + std::to_string(step) + ": " + e.what());
    }
    if (first) {
      result.first_backbone_update_norm = std::sqrt(squared_distance(backbone, backbone_before));
      result.first_head_update_norm = std::sqrt(squared_distance(head, head_before));
    }
    result.losses.push_back(loss_value);
    if (progress && (step % 100 == 0 || step == config.schedule.total)) {
      *progress << "finetune step " << step << " loss=" << fmt(loss_value) << '\n';
    }
  }
  result.backbone_hash_after = weight_hash(backbone);
  write_checkpoint(config.out, all);
  return result;
}

namespace {

Tensor image_embeddings(const ImageEncoder& encoder, const ImageBatch& images) {
  const ViTConfig& cfg = encoder.config();
  const Tensor tokens = encoder.embed(patchify_batch(images, cfg.patch_size));
  Rng unused(0);
  const Tensor with_pe = apply_ped(tokens, encoder.pe_table(), 0.0, Mode::eval, unused);
  std::vector<std::vector<std::size_t>> fed(images.count, std::vector<std::size_t>(cfg.tokens()));
  for (auto& f : fed)
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = i;
  return ops::l2_normalize(encoder.encode(with_pe, fed).pooled);
}

// Fraction of queries whose match ranks within each K, ranking rows of `sim`.
void recall_rows(const std::vector<double>& sim, std::size_t n, bool by_column, double out[3]) {
  std::size_t hits[3] = {0, 0, 0};
  for (std::size_t q = 0; q < n; ++q) {
    auto at = [&](std::size_t j) { return by_column ? sim[j * n + q] : sim[q * n + j]; };
    const double truth = at(q);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double s = at(j);
      if (s > truth || (s == truth && j < q)) ++rank;
    }
    for (std::size_t k = 0; k < 3; ++k)
      if (rank < kRecallKs[k]) ++hits[k];
  }
  for (std::size_t k = 0; k < 3; ++k) out[k] = static_cast<double>(hits[k]) / static_cast<double>(n);
}

}  // namespace

RetrievalResult recall_at_k(const Tensor& image_emb, const Tensor& text_emb) {
  if (image_emb.shape() != text_emb.shape()) throw ShapeError("recall_at_k: embedding shapes differ");
  const std::size_t n = image_emb.rows(), d = image_emb.cols();
  if (n < kRecallKs[2]) throw ContractError("recall_at_k: need at least 10 pairs");
  std::vector<double> sim(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(image_emb.at(i, c)) * text_emb.at(j, c);
      sim[i * n + j] = s;
    }
  RetrievalResult r;
  r.n = n;
  recall_rows(sim, n, false, r.image_to_text);
  recall_rows(sim, n, true, r.text_to_image);
  return r;
}

RetrievalResult eval_retrieval(const CfmModel& model, const std::vector<synth::Scene>& pairs) {
  NoGradScope nograd;
  constexpr std::size_t kChunk = 64;
  std::vector<float> img, txt;
  for (std::size_t begin = 0; begin < pairs.size(); begin += kChunk) {
    const std::size_t end = std::min(pairs.size(), begin + kChunk);
    std::vector<const synth::Scene*> chunk;
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(&pairs[i]);
    const TrainBatch batch = make_batch(chunk);
    const Tensor v = image_embeddings(model.image, batch.images);
    const Tensor l = ops::l2_normalize(model.text.encode(batch.captions));
    img.insert(img.end(), v.data().begin(), v.data().end());
    txt.insert(txt.end(), l.data().begin(), l.data().end());
  }
  if (pairs.empty()) throw ContractError("eval_retrieval: no pairs");
  const std::size_t d = img.size() / pairs.size();
  return recall_at_k(Tensor({pairs.size(), d}, std::move(img)), Tensor({pairs.size(), d}, std::move(txt)));
}

void accuracy_from_scores(const std::vector<ovd::RegionScore>& scores, RegionEvalResult& result) {
  std::size_t base_hits = 0, novel_hits = 0;
  result.base_regions = result.novel_regions = 0;
  for (const auto& s : scores) {
    if (s.true_category < 0) continue;
    const bool hit = s.argmax_category() == s.true_category;
    if (s.membership == synth::Membership::novel) {
      ++result.novel_regions;
      novel_hits += hit;
    } else {
      ++result.base_regions;
      base_hits += hit;
    }
  }
  result.base_accuracy = result.base_regions ? static_cast<double>(base_hits) / result.base_regions : 0.0;
  result.novel_accuracy = result.novel_regions ? static_cast<double>(novel_hits) / result.novel_regions : 0.0;
}

RegionEvalResult eval_regions(const RegionEvalConfig& config) {
  NoGradScope nograd;
  Detector det(config.model, 0);
  {
    const ParamSet params = det.params();
    load_checkpoint(config.detector, params);
  }
  det.model.image.set_resolution(config.image_size, config.pe_resize);
  const ovd::VlmBackbone vlm = ovd::VlmBackbone::select(config.frozen, det.model.image, config.source);
  const ovd::CategorySpace space = default_category_space(det.model.text);
  const float tau = det.model.temperature();
  const synth::Split& split = synth::default_split();

  RegionEvalResult result;
  constexpr std::size_t kChunk = 16;
  for (std::size_t begin = 0; begin < config.scenes; begin += kChunk) {
    const std::size_t end = std::min(config.scenes, begin + kChunk);
    std::vector<synth::Scene> scenes;
    std::vector<ovd::Region> regions;
    std::vector<float> objectness;
    std::vector<int> truth;
    std::vector<synth::Membership> membership;
    for (std::size_t i = begin; i < end; ++i) {
      const std::uint64_t seed = mix_seed(config.data_seed, i);
      scenes.push_back(synth::generate_detection_scene(seed, split, synth::Phase::eval));
      const synth::Scene& s = scenes.back();
      for (const auto& a : s.annotations) {
        regions.push_back({i - begin, a.box});
        objectness.push_back(1.0f);
        truth.push_back(a.label);
        membership.push_back(a.membership);
      }
      for (const auto& b : synth::sample_negative_boxes(s, config.negatives_per_image, seed)) {
        regions.push_back({i - begin, b});
        objectness.push_back(kNegativeObjectness);
        truth.push_back(-1);
        membership.push_back(synth::Membership::unlabeled);
      }
    }
    std::vector<const synth::Scene*> ptrs;
    for (const auto& s : scenes) ptrs.push_back(&s);
    const ImageBatch images = synth::to_image_batch(ptrs);
    const Tensor features = ovd::backbone_features(det.model.image, images);
    const Tensor emb = ovd::region_embeddings(features, regions, det.model.image, det.head);
    const Tensor vlm_features =
        config.source == ovd::VlmSource::finetuned ? features : ovd::backbone_features(vlm.encoder(), images);
    const ViTConfig& cfg = det.model.image.config();
    const Tensor pooled = ovd::roi_pool(vlm_features, regions, cfg.image_size, cfg.grid());
    auto scores = ovd::score_regions(emb, pooled, space, tau, config.alpha, config.beta, objectness);
    for (std::size_t r = 0; r < scores.size(); ++r) {
      scores[r].region_id = result.scores.size();
      scores[r].true_category = truth[r];
      scores[r].membership = membership[r];
      result.scores.push_back(std::move(scores[r]));
    }
  }
  accuracy_from_scores(result.scores, result);
  if (!config.scores_csv.empty()) ovd::write_scores_csv(config.scores_csv, result.scores, space);
  return result;
}

}  // namespace cfm::train
