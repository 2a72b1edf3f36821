#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cfm/train_eval.hpp"

namespace cfm {

// Everything one experiment needs, loaded from a flat key=value file.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 1;
  ModelConfig model;
  CfmConfig objective;

  train::Schedule pretrain_schedule{1e-3, 100, 2000};
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  std::size_t checkpoint_every = 0;
  std::filesystem::path dataset;

  train::Schedule finetune_schedule{5e-4, 50, 500};
  std::size_t finetune_batch_size = 8;
  double backbone_lr_ratio = 0.5;
  std::size_t detect_image_size = synth::kDetectImageSize;
  PeResize pe_resize = PeResize::interpolate;
  std::size_t negatives_per_image = 4;

  double alpha = ovd::kDefaultAlpha;
  double beta = ovd::kDefaultBeta;
  ovd::VlmSource vlm_source = ovd::VlmSource::frozen;
  std::size_t eval_scenes = 1000;
  std::size_t eval_negatives = 2;
  std::size_t eval_pairs = 100;

  std::filesystem::path out_dir = "runs/default";
  // Empty paths derive from out_dir.
  std::filesystem::path pretrained_checkpoint;
  std::filesystem::path frozen_checkpoint;
  std::filesystem::path detector_checkpoint;
  std::filesystem::path scores_csv;

  std::filesystem::path pretrained_path() const;
  std::filesystem::path frozen_path() const;
  std::filesystem::path detector_path() const;
  std::filesystem::path scores_path() const;

  // Range and consistency checks; throws ConfigError naming the key.
  void validate() const;

  train::PretrainConfig pretrain() const;
  train::FinetuneConfig finetune() const;
  train::RegionEvalConfig region_eval() const;
};

struct ConfigKey {
  std::string name;
  std::string type;
  std::string description;
};

// Every accepted key, in documentation order.
const std::vector<ConfigKey>& config_keys();

// Sets one key from its textual value; unknown keys and malformed values throw
// ConfigError.
void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value);

// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
// Later assignments win.
ExperimentConfig parse_config(std::string_view text, std::string_view source = "<string>");

// Reads `path` (missing file: ConfigError naming it), applies each "key=value"
// override in order, then validates.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Canonical key=value rendering that parse_config reads back to the same config.
std::string dump_config(const ExperimentConfig& config);

}  // namespace cfm
