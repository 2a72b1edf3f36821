#include "cli.hpp"

#include <cstdio>
#include <filesystem>
#include <ostream>

#include "CLI11.hpp"
#include "cfm/config.hpp"
#include "cfm/error.hpp"
#include "cfm/train_eval.hpp"
#include "cfm/verify.hpp"

namespace cfm::cli {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.path, "key=value experiment config file")->required();
  cmd->add_option("--override", args.overrides, "key=value setting applied after the file (repeatable)");
}

int gen_data(const std::string& out_path, const std::string& kind, std::size_t count, std::uint64_t seed,
             const std::string& phase, std::ostream& out) {
  synth::Dataset ds;
  ds.kind = kind == "pretrain" ? synth::DatasetKind::pretrain : synth::DatasetKind::detect;
  const synth::Phase p = phase == "train" ? synth::Phase::train : synth::Phase::eval;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = mix_seed(seed, i);
    ds.records.push_back(ds.kind == synth::DatasetKind::pretrain
                             ? synth::generate_pretrain_pair(s)
                             : synth::generate_detection_scene(s, synth::default_split(), p));
  }
  synth::write_dataset(out_path, ds);
  out << "records=" << count << " kind=" << kind << " path=" << out_path << '\n';
  return ok;
}

int pretrain_cmd(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const train::PretrainResult r = train::pretrain(cfg.pretrain(), &err);
  const StepDiagnostics& last = r.history.back();
  out << "steps=" << r.history.size() << " total=" << fmt(last.total) << " L_con=" << fmt(last.l_con)
      << " L_rec=" << fmt(last.l_rec) << " temperature=" << fmt(r.temperature) << " checkpoint=" << r.checkpoint.string()
      << " frozen=" << r.frozen_checkpoint.string() << " metrics=" << r.metrics.string() << '\n';
  return ok;
}

int finetune_cmd(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const train::FinetuneResult r = train::finetune(cfg.finetune(), &err);
  char hash[2][20];
  std::snprintf(hash[0], sizeof hash[0], "%016llx", static_cast<unsigned long long>(r.backbone_hash_before));
  std::snprintf(hash[1], sizeof hash[1], "%016llx", static_cast<unsigned long long>(r.backbone_hash_after));
  out << "steps=" << r.losses.size() << " loss=" << fmt(r.losses.back()) << " backbone_hash_before=" << hash[0]
      << " backbone_hash_after=" << hash[1] << " checkpoint=" << r.checkpoint.string() << '\n';
  return ok;
}

int eval_retrieval_cmd(const ExperimentConfig& cfg, bool untrained, const std::string& dataset, std::ostream& out) {
  CfmModel model(cfg.model, cfg.seed);
  if (!untrained) load_checkpoint(cfg.pretrained_path(), model.params());
  std::vector<synth::Scene> pairs;
  if (dataset.empty()) {
    pairs = train::held_out_pairs(cfg.data_seed, cfg.eval_pairs);
  } else {
    synth::Dataset ds = synth::read_dataset(dataset);
    if (ds.kind != synth::DatasetKind::pretrain) throw DataError("'" + dataset + "' does not hold image-text pairs");
    pairs = std::move(ds.records);
  }
  const train::RetrievalResult r = train::eval_retrieval(model, pairs);
  out << "n=" << r.n;
  for (std::size_t k = 0; k < 3; ++k) out << " i2t_R@" << train::kRecallKs[k] << '=' << fmt(r.image_to_text[k]);
  for (std::size_t k = 0; k < 3; ++k) out << " t2i_R@" << train::kRecallKs[k] << '=' << fmt(r.text_to_image[k]);
  out << '\n';
  return ok;
}

int eval_regions_cmd(const ExperimentConfig& cfg, std::ostream& out) {
  const train::RegionEvalConfig rc = cfg.region_eval();
  const train::RegionEvalResult r = train::eval_regions(rc);
  out << "base_accuracy=" << fmt(r.base_accuracy) << " novel_accuracy=" << fmt(r.novel_accuracy)
      << " base_regions=" << r.base_regions << " novel_regions=" << r.novel_regions
      << " vlm_source=" << (rc.source == ovd::VlmSource::frozen ? "frozen" : "finetuned")
      << " scores=" << rc.scores_csv.string() << '\n';
  return ok;
}

int verify_cmd(const std::string& scratch, std::ostream& out) {
  const auto results = verify::run_all(scratch);
  std::size_t failed = 0;
  for (const auto& r : results) {
    verify::print(out, r);
    failed += !r.passed;
  }
  out << "checks=" << results.size() << " failed=" << failed << '\n';
  return failed == 0 ? ok : failure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive feature masking toolkit on a synthetic world"};
  app.require_subcommand(1);

  std::string out_path, kind = "pretrain", phase = "train";
  std::size_t count = 0;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic .cfmd dataset");
  gen->add_option("--out", out_path, "output file")->required();
  gen->add_option("--kind", kind, "pretrain | detect")->check(CLI::IsMember({"pretrain", "detect"}));
  gen->add_option("--count", count, "number of records")->required();
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--phase", phase, "train | eval (detect only)")->check(CLI::IsMember({"train", "eval"}));

  ConfigArgs pre, fine, ret, reg;
  auto* pre_cmd = app.add_subcommand("pretrain", "pretrain the dual encoder");
  add_config_flags(pre_cmd, pre);
  auto* fine_cmd = app.add_subcommand("finetune", "finetune the region classifier on base categories");
  add_config_flags(fine_cmd, fine);
  auto* ret_cmd = app.add_subcommand("eval-retrieval", "image-text recall@K on held-out pairs");
  add_config_flags(ret_cmd, ret);
  bool untrained = false;
  std::string retrieval_dataset;
  ret_cmd->add_flag("--untrained", untrained, "score freshly initialized encoders");
  ret_cmd->add_option("--dataset", retrieval_dataset, "pairs .cfmd (default: held-out stream)");
  auto* reg_cmd = app.add_subcommand("eval-regions", "open-vocabulary region classification accuracy");
  add_config_flags(reg_cmd, reg);

  std::string scratch = (std::filesystem::temp_directory_path() / "cfm_verify").string();
  auto* ver = app.add_subcommand("verify", "run the invariant suite");
  ver->add_option("--scratch", scratch, "directory for round-trip files");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return config_error;
  }

  try {
    if (gen->parsed()) return gen_data(out_path, kind, count, seed, phase, out);
    if (ver->parsed()) return verify_cmd(scratch, out);
    if (pre_cmd->parsed()) return pretrain_cmd(load_config(pre.path, pre.overrides), out, err);
    if (fine_cmd->parsed()) return finetune_cmd(load_config(fine.path, fine.overrides), out, err);
    if (ret_cmd->parsed())
      return eval_retrieval_cmd(load_config(ret.path, ret.overrides), untrained, retrieval_dataset, out);
    if (reg_cmd->parsed()) return eval_regions_cmd(load_config(reg.path, reg.overrides), out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return io_error;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return io_error;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return numeric_error;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return io_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return failure;
  }
  return failure;
}

}  // namespace cfm::cli
