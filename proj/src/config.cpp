#include "cfm/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "cfm/error.hpp"

namespace cfm {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    std::string(expected));
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

template <typename E>
E to_enum(std::string_view key, std::string_view v, std::initializer_list<std::pair<const char*, E>> choices) {
  std::string expected = "one of";
  for (const auto& [name, value] : choices) {
    if (v == name) return value;
    expected += std::string(" ") + name;
  }
  bad_value(key, v, expected);
}

template <typename E>
std::string from_enum(E value, std::initializer_list<std::pair<const char*, E>> choices) {
  for (const auto& [name, v] : choices)
    if (v == value) return name;
  return "?";
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const std::initializer_list<std::pair<const char*, BranchMode>> kModes = {{"full", BranchMode::full},
                                                                         {"exclusive", BranchMode::exclusive}};
const std::initializer_list<std::pair<const char*, SgSide>> kSgSides = {{"target", SgSide::target},
                                                                       {"reconstruction", SgSide::reconstruction}};
const std::initializer_list<std::pair<const char*, ReconTarget>> kTargets = {{"feature", ReconTarget::feature},
                                                                            {"pixel", ReconTarget::pixel}};
const std::initializer_list<std::pair<const char*, PeResize>> kPeResize = {{"interpolate", PeResize::interpolate},
                                                                          {"recompute", PeResize::recompute}};
const std::initializer_list<std::pair<const char*, ovd::VlmSource>> kSources = {
    {"frozen", ovd::VlmSource::frozen}, {"finetuned", ovd::VlmSource::finetuned}};

struct Entry {
  ConfigKey key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define CFM_SIZE(NAME, FIELD, DESC)                                                                        \
  Entry {                                                                                                  \
    {NAME, "integer", DESC}, [](ExperimentConfig& c, std::string_view v) { c.FIELD = to_u64(NAME, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.FIELD); }                                  \
  }
#define CFM_REAL(NAME, FIELD, DESC)                                                                          \
  Entry {                                                                                                    \
    {NAME, "real", DESC}, [](ExperimentConfig& c, std::string_view v) { c.FIELD = to_double(NAME, v); },    \
        [](const ExperimentConfig& c) { return num(static_cast<double>(c.FIELD)); }                          \
  }
#define CFM_PATH(NAME, FIELD, DESC)                                                                        \
  Entry {                                                                                                  \
    {NAME, "path", DESC}, [](ExperimentConfig& c, std::string_view v) { c.FIELD = std::string(v); },      \
        [](const ExperimentConfig& c) { return c.FIELD.string(); }                                         \
  }
#define CFM_ENUM(NAME, FIELD, CHOICES, DESC)                                                                 \
  Entry {                                                                                                    \
    {NAME, "enum", DESC}, [](ExperimentConfig& c, std::string_view v) { c.FIELD = to_enum(NAME, v, CHOICES); }, \
        [](const ExperimentConfig& c) { return from_enum(c.FIELD, CHOICES); }                                \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      CFM_SIZE("seed", seed, "initialization, PED and mask draws"),
      CFM_SIZE("data_seed", data_seed, "synthetic data streams"),
      CFM_SIZE("image_size", model.vit.image_size, "pretraining image side in pixels (pairs are 32)"),
      CFM_SIZE("patch_size", model.vit.patch_size, "ViT patch side in pixels"),
      Entry{{"width", "integer", "image and text encoder width (also the joint embedding width)"},
            [](ExperimentConfig& c, std::string_view v) { c.model.vit.width = c.model.text.width = to_u64("width", v); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.vit.width); }},
      CFM_SIZE("depth", model.vit.depth, "image encoder blocks"),
      CFM_SIZE("heads", model.vit.heads, "image encoder attention heads"),
      CFM_SIZE("text_depth", model.text.depth, "text encoder blocks"),
      CFM_SIZE("text_heads", model.text.heads, "text encoder attention heads"),
      CFM_SIZE("vocab_size", model.text.vocab_size, "text embedding rows"),
      CFM_SIZE("max_len", model.text.max_len, "text tokens including the end token"),
      CFM_SIZE("decoder_depth", model.decoder_depth, "reconstruction decoder blocks"),
      CFM_REAL("init_temperature", model.init_temperature, "initial contrastive temperature"),
      CFM_REAL("ped_prob", model.vit.ped_prob, "probability of withholding the PE table per image"),
      CFM_ENUM("recon_target", model.recon_target, kTargets, "feature | pixel"),
      CFM_ENUM("mode", objective.mode, kModes, "full | exclusive branch masking"),
      CFM_REAL("mask_ratio", objective.mask_ratio, "fraction of tokens masked for reconstruction"),
      CFM_REAL("lambda_rec", objective.lambda_rec, "reconstruction loss weight (0 disables the branch)"),
      CFM_ENUM("sg_side", objective.sg_side, kSgSides, "target | reconstruction"),
      CFM_REAL("lr", pretrain_schedule.base_lr, "pretraining peak learning rate"),
      CFM_SIZE("warmup_steps", pretrain_schedule.warmup, "pretraining warmup steps"),
      CFM_SIZE("steps", pretrain_schedule.total, "pretraining steps"),
      CFM_SIZE("batch_size", batch_size, "pretraining batch size"),
      CFM_REAL("weight_decay", weight_decay, "AdamW decoupled weight decay (matrices only)"),
      CFM_SIZE("checkpoint_every", checkpoint_every, "intermediate checkpoint period (0: final only)"),
      CFM_PATH("dataset", dataset, "optional .cfmd of pretraining pairs (empty: generate on the fly)"),
      CFM_REAL("finetune_lr", finetune_schedule.base_lr, "finetuning peak learning rate"),
      CFM_SIZE("finetune_warmup_steps", finetune_schedule.warmup, "finetuning warmup steps"),
      CFM_SIZE("finetune_steps", finetune_schedule.total, "finetuning steps"),
      CFM_SIZE("finetune_batch_size", finetune_batch_size, "detection scenes per finetuning step"),
      CFM_REAL("backbone_lr_ratio", backbone_lr_ratio, "backbone learning rate relative to the head, in [0, 1]"),
      CFM_SIZE("detect_image_size", detect_image_size, "detection scene side in pixels"),
      CFM_ENUM("pe_resize", pe_resize, kPeResize, "interpolate | recompute the PE table at detection size"),
      CFM_SIZE("negatives_per_image", negatives_per_image, "background boxes per finetuning scene"),
      CFM_REAL("alpha", alpha, "ensemble exponent on p for base categories"),
      CFM_REAL("beta", beta, "ensemble exponent on p for novel categories"),
      CFM_ENUM("vlm_source", vlm_source, kSources, "frozen | finetuned backbone for the VLM score"),
      CFM_SIZE("eval_scenes", eval_scenes, "evaluation detection scenes"),
      CFM_SIZE("eval_negatives", eval_negatives, "background boxes per evaluation scene"),
      CFM_SIZE("eval_pairs", eval_pairs, "held-out pairs for retrieval"),
      CFM_PATH("out_dir", out_dir, "run directory"),
      CFM_PATH("pretrained_checkpoint", pretrained_checkpoint, "default out_dir/pretrain.cfmw"),
      CFM_PATH("frozen_checkpoint", frozen_checkpoint, "default out_dir/frozen.cfmw"),
      CFM_PATH("detector_checkpoint", detector_checkpoint, "default out_dir/detector.cfmw"),
      CFM_PATH("scores_csv", scores_csv, "default out_dir/region_scores.csv"),
  };
  return table;
}

#undef CFM_SIZE
#undef CFM_REAL
#undef CFM_PATH
#undef CFM_ENUM

void require(bool ok, std::string_view key, const std::string& message) {
  if (!ok) throw ConfigError("key '" + std::string(key) + "': " + message);
}

std::filesystem::path or_default(const std::filesystem::path& set, const std::filesystem::path& dir,
                                 const char* name) {
  return set.empty() ? dir / name : set;
}

}  // namespace

std::filesystem::path ExperimentConfig::pretrained_path() const {
  return or_default(pretrained_checkpoint, out_dir, "pretrain.cfmw");
}
std::filesystem::path ExperimentConfig::frozen_path() const {
  return or_default(frozen_checkpoint, out_dir, "frozen.cfmw");
}
std::filesystem::path ExperimentConfig::detector_path() const {
  return or_default(detector_checkpoint, out_dir, "detector.cfmw");
}
std::filesystem::path ExperimentConfig::scores_path() const {
  return or_default(scores_csv, out_dir, "region_scores.csv");
}

void ExperimentConfig::validate() const {
  model.vit.validate();
  model.text.validate();
  require(model.vit.image_size == synth::kPretrainImageSize, "image_size",
          "pretraining pairs are " + std::to_string(synth::kPretrainImageSize) + " px");
  require(model.text.vocab_size >= synth::Vocabulary::instance().size(), "vocab_size",
          "must cover the " + std::to_string(synth::Vocabulary::instance().size()) + "-word vocabulary");
  require(model.decoder_depth > 0, "decoder_depth", "must be positive");
  require(model.init_temperature >= kMinTemperature, "init_temperature", "must be at least 1e-3");
  require(objective.mask_ratio > 0.0 && objective.mask_ratio < 1.0, "mask_ratio", "must lie in (0, 1)");
  require(objective.lambda_rec >= 0.0, "lambda_rec", "must be non-negative");
  require(pretrain_schedule.base_lr > 0.0, "lr", "must be positive");
  require(pretrain_schedule.total > 0, "steps", "must be positive");
  require(pretrain_schedule.warmup <= pretrain_schedule.total, "warmup_steps", "must not exceed steps");
  require(batch_size >= 2, "batch_size", "contrastive batches need at least 2 pairs");
  require(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  require(finetune_schedule.base_lr > 0.0, "finetune_lr", "must be positive");
  require(finetune_schedule.total > 0, "finetune_steps", "must be positive");
  require(finetune_schedule.warmup <= finetune_schedule.total, "finetune_warmup_steps",
          "must not exceed finetune_steps");
  require(finetune_batch_size > 0, "finetune_batch_size", "must be positive");
  require(backbone_lr_ratio >= 0.0 && backbone_lr_ratio <= 1.0, "backbone_lr_ratio", "must lie in [0, 1]");
  require(detect_image_size >= model.vit.patch_size && detect_image_size % model.vit.patch_size == 0,
          "detect_image_size", "must be a positive multiple of patch_size");
  require(alpha >= 0.0 && alpha <= 1.0, "alpha", "must lie in [0, 1]");
  require(beta >= 0.0 && beta <= 1.0, "beta", "must lie in [0, 1]");
  require(eval_scenes > 0, "eval_scenes", "must be positive");
  require(eval_pairs >= train::kRecallKs[2], "eval_pairs", "recall@10 needs at least 10 pairs");
  require(!out_dir.empty(), "out_dir", "must not be empty");
}

train::PretrainConfig ExperimentConfig::pretrain() const {
  train::PretrainConfig p;
  p.model = model;
  p.objective = objective;
  p.schedule = pretrain_schedule;
  p.optimizer.weight_decay = weight_decay;
  p.batch_size = batch_size;
  p.seed = seed;
  p.data_seed = data_seed;
  p.dataset = dataset;
  p.out_dir = out_dir;
  p.checkpoint_every = checkpoint_every;
  return p;
}

train::FinetuneConfig ExperimentConfig::finetune() const {
  train::FinetuneConfig f;
  f.model = model;
  f.pretrained = pretrained_path();
  f.out = detector_path();
  f.schedule = finetune_schedule;
  f.optimizer.weight_decay = weight_decay;
  f.backbone_lr_ratio = backbone_lr_ratio;
  f.image_size = detect_image_size;
  f.pe_resize = pe_resize;
  f.batch_size = finetune_batch_size;
  f.negatives_per_image = negatives_per_image;
  f.seed = seed;
  f.data_seed = mix_seed(data_seed, 0x4654);
  return f;
}

train::RegionEvalConfig ExperimentConfig::region_eval() const {
  train::RegionEvalConfig r;
  r.model = model;
  r.detector = detector_path();
  r.frozen = frozen_path();
  r.source = vlm_source;
  r.alpha = alpha;
  r.beta = beta;
  r.image_size = detect_image_size;
  r.pe_resize = pe_resize;
  r.scenes = eval_scenes;
  r.negatives_per_image = eval_negatives;
  r.data_seed = mix_seed(data_seed, 0x4556);
  r.scores_csv = scores_path();
  return r;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value) {
  for (const auto& e : entries()) {
    if (e.key.name == key) {
      e.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  ExperimentConfig config;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  ExperimentConfig config = parse_config(ss.str(), path.string());
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    apply_setting(config, trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
  config.validate();
  return config;
}

std::string dump_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(config) + "\n";
  return out;
}

}  // namespace cfm
