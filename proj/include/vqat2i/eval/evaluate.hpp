#pragma once

#include "vqat2i/io/config.hpp"
#include "vqat2i/train/trainer.hpp"

#include <filesystem>
#include <string>

namespace vqat2i::eval {

struct EvalReport {
  Scalar is_mean = 0, is_std = 0;
  Scalar fid = 0;
  Scalar r_precision = 0;
  Scalar vqa_acc_consensus = 0, vqa_acc_top1_any = 0;
  index_t n_samples = 0;
  std::uint64_t seed = 0;
  bool sampled_with_replacement = false;
  std::string checkpoint;
  std::string split;

  std::string to_json() const;
  static EvalReport from_json_text(const std::string& text);
  void save(const std::filesystem::path& file) const;
  static EvalReport load(const std::filesystem::path& file);
};

/// Full protocol over one checkpoint: images generated from sampled split
/// captions are scored for IS/FID/R-precision; images generated from the
/// split's QA pairs are answered by the frozen pretrained VQA model.
EvalReport evaluate_checkpoint(const io::TrainConfig& cfg,
                               const std::filesystem::path& gan_checkpoint,
                               const std::string& split, index_t n_samples,
                               std::uint64_t seed);

/// Writes an 8x8 grid of generated images plus a sidecar text file with the
/// conditioning captions, one per line.
void write_sample_grid(const io::TrainConfig& cfg, const std::filesystem::path& gan_checkpoint,
                       const std::string& split, const std::filesystem::path& out_png,
                       std::uint64_t seed);

}  // namespace vqat2i::eval
