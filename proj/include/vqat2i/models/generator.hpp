#pragma once

#include "vqat2i/core/nn.hpp"

#include <vector>

namespace vqat2i::models {

using ag::Var;

struct GeneratorConfig {
  index_t noise_dim = 100;
  index_t condition_dim = 32;
  index_t base_channels = 32;  // hidden channels per stage
  index_t stage_count = 3;     // 1..3
  index_t base_resolution = 16;
  index_t text_feature_dim = 128;  // D of the text encoder
  index_t final_resolution() const { return base_resolution << (stage_count - 1); }
};

struct ConditioningLatent {
  Var mean;          // [n, c]
  Var log_variance;  // [n, c]
  Var sample;        // [n, c]
  Var kl;            // scalar: batch mean of per-sample 0.5*sum(e^lv + mu^2 - 1 - lv)
};

struct ImagePyramid {
  std::vector<Var> images;     // per stage, [n, 3, r_i, r_i] in [-1, 1]
  std::vector<Var> attention;  // per refinement stage, [n, locations, T]
};

/// Word attention for one refinement stage: projected word features are
/// scored against every spatial location; weights are softmax over the valid
/// words; the context is their weighted sum.
std::pair<Var, Var> word_attention(const Var& hidden, const Var& words, const Var& projection,
                                   const std::vector<index_t>& valid_lengths);

class Generator {
 public:
  Generator(GeneratorConfig cfg, Rng& rng);

  ConditioningLatent condition_augment(const Var& sentence_embedding, const Tensor& eps) const;

  /// noise [n, noise_dim]; condition = ConditioningLatent sample (or any
  /// [n, condition_dim] vector); words [n, D, T] masked by valid_lengths.
  ImagePyramid generate(const Var& noise, const Var& condition, const Var& words,
                        const std::vector<index_t>& valid_lengths) const;

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  GeneratorConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear ca_fc_;    // sentence -> [mean, log variance]
  nn::Linear base_fc_;  // [noise, condition] -> 4x4 feature map
  index_t base_ups_ = 0;
  std::vector<nn::Conv> base_convs_;
  std::vector<nn::InstanceNorm> base_norms_;
  struct Stage {
    Var attn_proj;  // [C, D]
    nn::Conv combine;
    nn::InstanceNorm combine_norm;
    nn::Conv up_conv;
    nn::InstanceNorm up_norm;
  };
  std::vector<Stage> stages_;
  std::vector<nn::Conv> image_heads_;  // one per stage
};

}  // namespace vqat2i::models
