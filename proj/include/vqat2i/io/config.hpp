#pragma once

#include "vqat2i/core/tensor.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vqat2i::io {

/// Every knob of the pipeline. `desk` runs on a laptop CPU against synthetic
/// scenes; `full` carries the documented large-scale defaults.
struct TrainConfig {
  std::string preset = "desk";
  std::string variant = "adapted";
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string out_dir = "runs";

  // data
  index_t min_frequency = 1;
  index_t max_text_length = 20;
  Scalar qa_ratio = 1.0;

  // text encoder
  index_t embedding_dim = 64;
  index_t hidden_dim = 64;
  Scalar dropout = 0.0;
  std::string rnn_cell = "lstm";
  bool pretrain_with_qa = true;

  // generator
  index_t noise_dim = 100;
  index_t condition_dim = 32;
  index_t base_channels = 32;
  index_t stage_count = 3;
  index_t base_resolution = 16;
  Scalar kl_weight = 1.0;

  // discriminators
  index_t disc_channels = 32;
  index_t disc_condition_channels = 32;
  std::string stages_in_loss = "all";

  // damsm
  index_t damsm_channels = 32;
  Scalar gamma1 = 4.0;
  Scalar gamma2 = 5.0;
  Scalar gamma3 = 10.0;
  Scalar lambda_damsm = 5.0;

  // vqa
  index_t vqa_channels = 32;
  index_t vqa_attention_hidden = 32;
  index_t vqa_glimpses = 2;
  index_t answer_top_n = 0;  // 0 keeps every training answer
  Scalar lambda_vqa = 1.0;

  // strict mode: exactly the published generator objective, unweighted and
  // without the conditioning divergence
  bool strict_eq2 = false;

  // optimization
  index_t epochs = 30;
  index_t batch_size = 16;
  Scalar lr_g = 2e-4;
  Scalar lr_d = 2e-4;
  Scalar beta1 = 0.5;
  Scalar beta2 = 0.999;
  index_t d_steps_per_g = 1;
  index_t checkpoint_every = 5;
  index_t eval_every = 5;
  index_t damsm_epochs = 12;
  index_t vqa_epochs = 12;

  // evaluation
  index_t eval_samples = 256;
  index_t eval_samples_train = 128;  // quick score during training
  index_t is_splits = 10;
  index_t r_distractors = 99;

  index_t text_feature_dim() const { return 2 * hidden_dim; }
  index_t final_resolution() const { return base_resolution << (stage_count - 1); }
  std::uint64_t hash() const;
};

struct ConfigField {
  std::string key;
  std::string type;  // int | float | bool | string
  std::string help;
  std::string (*get)(const TrainConfig&);
  void (*set)(TrainConfig&, const std::string&);
};

const std::vector<ConfigField>& config_fields();

/// desk (default) or full; applied before file/flag overrides.
void apply_preset(TrainConfig& cfg, const std::string& preset);

/// Loads JSON config (optional), then applies key=value overrides. Unknown
/// keys are rejected naming the offending key. strict_eq2 resolves last.
TrainConfig load_config(const std::optional<std::filesystem::path>& file,
                        const std::vector<std::string>& overrides);

std::string config_to_json(const TrainConfig& cfg);
void save_config(const TrainConfig& cfg, const std::filesystem::path& file);

}  // namespace vqat2i::io
