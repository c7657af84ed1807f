#pragma once

#include "vqat2i/core/nn.hpp"
#include "vqat2i/models/text_encoder.hpp"

#include <vector>

namespace vqat2i::models {

using ag::Var;

struct DamsmConfig {
  index_t resolution = 64;
  index_t base_channels = 32;
  index_t feature_dim = 128;  // must equal the text feature dim
  Scalar gamma1 = 4.0;
  Scalar gamma2 = 5.0;
  Scalar gamma3 = 10.0;
};

struct RegionFeatures {
  Var regions;  // [n, D, R]
  Var global;   // [n, D]
};

/// Region-level image encoder used by the matching loss, evaluation features
/// and R-precision retrieval.
class DamsmImageEncoder {
 public:
  DamsmImageEncoder(DamsmConfig cfg, Rng& rng);
  RegionFeatures encode(const Var& images) const;

  const DamsmConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  DamsmConfig cfg_;
  nn::ParamStore ps_;
  std::vector<nn::Conv> downs_;
  nn::Conv region_head_;  // 1x1 to feature_dim
  nn::Linear global_head_;
  index_t tower_channels_ = 0;
};

/// Attention-smoothed word/region relevance for one (text, image) pair.
/// `words` is [D, T_valid] (already limited to real tokens), `regions` [D, R].
Var matching_score(const Var& regions, const Var& words, Scalar gamma1, Scalar gamma2);

/// Cosine similarity of the global image feature and sentence embedding.
Var sentence_score(const Var& global_feature, const Var& sentence_embedding);

struct DamsmBatch {
  RegionFeatures images;
  TextEncoding texts;  // word features masked by lengths
};

struct DamsmLossParts {
  Var total;  // scalar, >= 0
  Scalar word_text_to_image = 0, word_image_to_text = 0;
  Scalar sent_text_to_image = 0, sent_image_to_text = 0;
};

/// Bidirectional word- and sentence-level contrastive matching loss over a
/// batch of aligned (image, text) pairs. Throws for batch size < 2.
DamsmLossParts damsm_loss(const DamsmBatch& batch, const DamsmConfig& cfg);

}  // namespace vqat2i::models
