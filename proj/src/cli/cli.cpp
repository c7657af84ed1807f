#include "vqat2i/cli/cli.hpp"

#include "vqat2i/data/synthetic.hpp"
#include "vqat2i/eval/evaluate.hpp"
#include "vqat2i/io/config.hpp"
#include "vqat2i/train/trainer.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>

namespace vqat2i::cli {

namespace fs = std::filesystem;

namespace {

/// One writer per output directory, released when the process exits.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    path_ = dir / ".lock";
    fd_ = ::open(path_.string().c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw std::invalid_argument("output directory " + dir.string() +
                                  " is locked by another process");
    }
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirLock(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string config_key_reference() {
  std::string out = "Config keys (config file or --set key=value):\n";
  for (const auto& f : io::config_fields()) {
    out += "  " + f.key;
    out += " (" + f.type + "): " + f.help + "\n";
  }
  return out;
}

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_dir;
  std::optional<std::string> out_dir;
  bool print_config = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "JSON config file");
  cmd->add_option("--set", args.overrides, "override a config key, key=value");
  cmd->add_option("--seed", args.seed, "master seed (shorthand for --set seed=N)");
  cmd->add_option("--data", args.data_dir, "dataset directory (shorthand for data_dir)");
  cmd->add_option("--out", args.out_dir, "output root (shorthand for out_dir)");
  cmd->add_flag("--print-config", args.print_config,
                "print the fully resolved configuration and exit");
  cmd->footer(config_key_reference());
}

io::TrainConfig resolve_config(const CommonArgs& args) {
  std::optional<fs::path> file;
  if (!args.config_file.empty()) file = args.config_file;
  std::vector<std::string> overrides = args.overrides;
  if (args.seed) overrides.push_back("seed=" + std::to_string(*args.seed));
  if (args.data_dir) overrides.push_back("data_dir=" + *args.data_dir);
  if (args.out_dir) overrides.push_back("out_dir=" + *args.out_dir);
  io::TrainConfig cfg = io::load_config(file, overrides);
  if (const char* root = std::getenv("VQAT2I_OUT_ROOT")) {
    fs::path out(cfg.out_dir);
    if (out.is_relative()) cfg.out_dir = (fs::path(root) / out).string();
  }
  return cfg;
}

fs::path resolve_checkpoint(const io::TrainConfig& cfg, const std::string& arg) {
  if (arg != "best" && arg != "last") return arg;
  train::Paths paths{cfg.out_dir};
  fs::path run_dir = paths.run_dir(cfg.variant);
  fs::path series = run_dir / "checkpoints.jsonl";
  if (!fs::exists(series))
    throw std::invalid_argument("no checkpoint series at " + series.string() +
                                "; run `train` first");
  auto metas = train::read_checkpoint_series(series);
  if (metas.empty()) throw std::invalid_argument("checkpoint series is empty");
  if (arg == "last") return metas.back().file;
  return train::select_best_checkpoint(metas).file;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"VQA-augmented text-to-image training and evaluation"};
  app.require_subcommand(1);
  app.footer(config_key_reference());

  CommonArgs common;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic scene dataset");
  index_t synth_n = 128;
  synth->add_option("--n", synth_n, "number of images");
  add_common(synth, common);

  auto* prepare = app.add_subcommand(
      "prepare-data", "convert caption/question/annotation files into a manifest");
  std::string captions_file, questions_file, annotations_file, split = "train";
  bool append = false;
  prepare->add_option("--captions", captions_file, "caption annotation JSON")->required();
  prepare->add_option("--questions", questions_file, "question JSON")->required();
  prepare->add_option("--annotations", annotations_file, "answer annotation JSON")->required();
  prepare->add_option("--split", split, "split label for the ingested records");
  prepare->add_flag("--append", append, "extend an existing manifest");
  add_common(prepare, common);

  auto* pre_damsm = app.add_subcommand("pretrain-damsm",
                                       "pretrain the text encoder and matching model");
  add_common(pre_damsm, common);

  auto* pre_vqa = app.add_subcommand("pretrain-vqa", "pretrain the answering model");
  add_common(pre_vqa, common);

  auto* train_cmd = app.add_subcommand("train", "adversarial training");
  std::string variant_flag, resume_arg;
  train_cmd->add_option("--variant", variant_flag,
                        "baseline | naive_end_to_end | naive_pretrained | adapted");
  train_cmd->add_option("--resume", resume_arg, "checkpoint to continue from");
  add_common(train_cmd, common);

  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint");
  std::string eval_ckpt = "best", eval_split = "test", report_file;
  std::optional<index_t> eval_samples;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path, or best/last");
  eval_cmd->add_option("--split", eval_split, "dataset split to score against");
  eval_cmd->add_option("--samples", eval_samples, "generated sample count");
  eval_cmd->add_option("--report", report_file, "report output file");
  add_common(eval_cmd, common);

  auto* sample_cmd = app.add_subcommand("sample", "write a grid of generated images");
  std::string sample_ckpt = "best", sample_split = "test", sample_out;
  sample_cmd->add_option("--checkpoint", sample_ckpt, "checkpoint path, or best/last");
  sample_cmd->add_option("--split", sample_split, "caption source split");
  sample_cmd->add_option("--out-png", sample_out, "grid image path");
  add_common(sample_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    io::TrainConfig cfg = resolve_config(common);
    if (!variant_flag.empty()) cfg.variant = variant_flag;
    train::VariantSpec::parse(cfg.variant);  // validate early
    if (common.print_config) {
      std::cout << io::config_to_json(cfg) << "\n";
      return 0;
    }

    if (synth->parsed()) {
      DirLock lock(cfg.data_dir);
      auto spec = data::SyntheticSceneSpec::defaults();
      auto summary = data::generate_synthetic_dataset(spec, synth_n, cfg.seed, cfg.data_dir);
      std::cout << "wrote " << summary.n_images << " images, " << summary.n_captions
                << " captions, " << summary.n_qa << " qa records ("
                << summary.n_complementary << " complementary pairs) to " << cfg.data_dir
                << "\n";
      return 0;
    }
    if (prepare->parsed()) {
      DirLock lock(cfg.data_dir);
      fs::path manifest = fs::path(cfg.data_dir) / "manifest.jsonl";
      fs::path staging = manifest;
      std::vector<data::ManifestEntry> existing;
      if (append && fs::exists(manifest)) existing = data::read_manifest(manifest);
      index_t added = data::ingest_annotations(captions_file, questions_file,
                                               annotations_file, manifest, split);
      if (!existing.empty()) {
        auto fresh = data::read_manifest(manifest);
        existing.insert(existing.end(), fresh.begin(), fresh.end());
        data::write_manifest(manifest, existing);
      }
      auto all = data::read_manifest(manifest);
      std::vector<std::string> train_texts;
      index_t n_captions = 0, n_qa = 0;
      std::set<std::string> images;
      for (const auto& e : all) {
        images.insert(e.image_id);
        (e.type == "caption" ? n_captions : n_qa)++;
        if (e.split == "train") train_texts.push_back(e.text);
      }
      data::DatasetMeta meta;
      meta.seed = cfg.seed;
      meta.n_images = static_cast<index_t>(images.size());
      meta.n_captions = n_captions;
      meta.n_qa = n_qa;
      meta.vocab_hash = data::build_vocabulary(train_texts, cfg.min_frequency).hash();
      data::write_dataset_meta(fs::path(cfg.data_dir) / "dataset.meta", meta);
      std::cout << "ingested " << added << " records into " << manifest << "\n";
      return 0;
    }
    if (pre_damsm->parsed()) {
      DirLock lock(cfg.out_dir);
      auto result = train::pretrain_damsm(cfg);
      std::cout << "matching pretraining: held-out loss " << result.heldout_curve.front()
                << " -> " << result.heldout_curve.back() << "; wrote " << result.checkpoint
                << "\n";
      return 0;
    }
    if (pre_vqa->parsed()) {
      DirLock lock(cfg.out_dir);
      auto result = train::pretrain_vqa(cfg);
      std::cout << "vqa pretraining: held-out accuracy " << result.final_accuracy
                << " (chance " << result.chance << "); wrote " << result.checkpoint << "\n";
      return 0;
    }
    if (train_cmd->parsed()) {
      DirLock lock(cfg.out_dir);
      std::optional<fs::path> resume;
      if (!resume_arg.empty()) resume = resume_arg;
      auto result = train::train(cfg, resume);
      std::cout << "trained " << cfg.variant << "; best checkpoint epoch "
                << result.best.epoch << " (score " << result.best.is_mean << ") at "
                << result.best_checkpoint.string() << "\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      DirLock lock(cfg.out_dir);
      fs::path ckpt = resolve_checkpoint(cfg, eval_ckpt);
      index_t n = eval_samples.value_or(cfg.eval_samples);
      auto report = eval::evaluate_checkpoint(cfg, ckpt, eval_split, n, cfg.seed);
      fs::path out = report_file.empty()
                         ? train::Paths{cfg.out_dir}.run_dir(cfg.variant) / "eval_report.json"
                         : fs::path(report_file);
      fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
      report.save(out);
      std::cout << report.to_json() << "\n";
      std::cout << "wrote " << out << "\n";
      return 0;
    }
    if (sample_cmd->parsed()) {
      DirLock lock(cfg.out_dir);
      fs::path ckpt = resolve_checkpoint(cfg, sample_ckpt);
      fs::path out = sample_out.empty()
                         ? train::Paths{cfg.out_dir}.run_dir(cfg.variant) / "samples.png"
                         : fs::path(sample_out);
      if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
      eval::write_sample_grid(cfg, ckpt, sample_split, out, cfg.seed);
      std::cout << "wrote " << out << " and " << out.string() + ".txt" << "\n";
      return 0;
    }
    std::cerr << "no subcommand\n";
    return 1;
  } catch (const train::MissingPretraining& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const train::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace vqat2i::cli
