#pragma once

#include "vqat2i/core/nn.hpp"
#include "vqat2i/data/batcher.hpp"

namespace vqat2i::models {

using ag::Var;

struct TextEncoderConfig {
  index_t vocab_size = 0;
  index_t embedding_dim = 64;
  index_t hidden_dim = 64;  // per direction
  Scalar dropout_rate = 0.0;
  nn::RecurrentCell cell = nn::RecurrentCell::lstm;
  index_t feature_dim() const { return 2 * hidden_dim; }
};

struct TextEncoding {
  Var word_features;       // [n, D, T]; columns past each length are zero
  Var sentence_embedding;  // [n, D]
  std::vector<index_t> lengths;
};

/// Bidirectional recurrent encoder over token ids. Word features concatenate
/// the two directions per position; the sentence embedding concatenates the
/// final state of each direction, so padding never contributes.
class TextEncoder {
 public:
  TextEncoder(TextEncoderConfig cfg, Rng& rng);

  TextEncoding encode(const data::TextBatch& batch, Rng* dropout_rng = nullptr) const;
  TextEncoding encode_ids(const std::vector<index_t>& flat_ids, index_t n, index_t max_len,
                          const std::vector<index_t>& lengths,
                          Rng* dropout_rng = nullptr) const;

  const TextEncoderConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  TextEncoderConfig cfg_;
  nn::ParamStore ps_;
  Var embedding_;  // [V, E]
  nn::RnnCell fwd_, bwd_;
};

}  // namespace vqat2i::models
