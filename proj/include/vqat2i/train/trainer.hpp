#pragma once

#include "vqat2i/data/batcher.hpp"
#include "vqat2i/io/config.hpp"
#include "vqat2i/models/damsm.hpp"
#include "vqat2i/models/discriminator.hpp"
#include "vqat2i/models/generator.hpp"
#include "vqat2i/models/text_encoder.hpp"
#include "vqat2i/models/vqa.hpp"
#include "vqat2i/train/checkpoint.hpp"
#include "vqat2i/train/objectives.hpp"

#include <filesystem>
#include <memory>
#include <optional>

namespace vqat2i::train {

namespace fs = std::filesystem;

/// Raised when a loss turns non-finite; state is preserved on disk first.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a required pretraining checkpoint is absent; the message names
/// the command that produces it.
struct MissingPretraining : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Paths {
  fs::path out;
  fs::path damsm_checkpoint() const { return out / "damsm.ckpt"; }
  fs::path vqa_checkpoint() const { return out / "vqa.ckpt"; }
  fs::path run_dir(const std::string& variant) const { return out / ("gan_" + variant); }
};

/// All models of one pipeline, built deterministically from the config and
/// the dataset's vocabulary.
struct ModelBundle {
  models::TextEncoderConfig text_cfg;
  std::unique_ptr<models::TextEncoder> text_encoder;
  std::unique_ptr<models::DamsmImageEncoder> damsm_image;
  std::unique_ptr<models::Generator> generator;
  std::vector<std::unique_ptr<models::StageDiscriminator>> discriminators;
  std::unique_ptr<models::VqaModel> vqa;
  models::AnswerVocabulary answers;
};

ModelBundle build_models(const io::TrainConfig& cfg, const data::Dataset& train_split,
                         bool with_vqa);

struct PretrainDamsmResult {
  std::vector<Scalar> train_curve;
  std::vector<Scalar> heldout_curve;  // first entry measured before training
  fs::path checkpoint;
};
PretrainDamsmResult pretrain_damsm(const io::TrainConfig& cfg);

struct PretrainVqaResult {
  std::vector<Scalar> heldout_accuracy;  // consensus accuracy per epoch
  std::vector<Scalar> heldout_loss;      // first entry measured before training
  Scalar chance = 0;                     // 1 / answer count
  Scalar final_accuracy = 0;
  fs::path checkpoint;
};
PretrainVqaResult pretrain_vqa(const io::TrainConfig& cfg);

struct TrainResult {
  std::vector<CheckpointMeta> checkpoints;
  fs::path metrics_log;
  fs::path series_file;
  fs::path best_checkpoint;
  CheckpointMeta best;
  // counters for the variant contracts
  index_t vqa_forward_calls = 0;
  index_t qa_discriminator_batches = 0;
  std::uint64_t vqa_digest_before = 0;
  std::uint64_t vqa_digest_after = 0;
};
TrainResult train(const io::TrainConfig& cfg, std::optional<fs::path> resume_from = {});

}  // namespace vqat2i::train
