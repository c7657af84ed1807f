#pragma once

#include "vqat2i/core/nn.hpp"

#include <vector>

namespace vqat2i::models {

using ag::Var;

struct DiscriminatorConfig {
  index_t resolution = 64;       // stage input resolution
  index_t base_channels = 32;
  index_t text_feature_dim = 128;
  index_t condition_channels = 32;  // compressed sentence embedding
};

struct DiscriminatorOutput {
  Var uncond_logit;  // [n]
  Var cond_logit;    // [n]
  Tensor uncond_prob() const;
  Tensor cond_prob() const;
};

/// One stage discriminator: strided conv stack down to 4x4, then an
/// unconditional head and a conditional head fed the tiled sentence embedding.
class StageDiscriminator {
 public:
  StageDiscriminator(DiscriminatorConfig cfg, Rng& rng);

  DiscriminatorOutput discriminate(const Var& images, const Var& sentence_embedding) const;

  const DiscriminatorConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  DiscriminatorConfig cfg_;
  nn::ParamStore ps_;
  std::vector<nn::Conv> downs_;
  nn::Conv uncond_head_;
  nn::Linear text_compress_;
  nn::Conv cond_mix_;
  nn::Conv cond_head_;
  index_t final_channels_ = 0;
};

}  // namespace vqat2i::models
