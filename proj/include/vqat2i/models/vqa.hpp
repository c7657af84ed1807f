#pragma once

#include "vqat2i/core/nn.hpp"
#include "vqat2i/data/records.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace vqat2i::models {

using ag::Var;

/// Fixed answer set built from training-split answers only.
class AnswerVocabulary {
 public:
  static AnswerVocabulary build(const std::vector<data::QARecord>& train_records,
                                index_t top_n);  // top_n = 0 keeps every answer
  static AnswerVocabulary from_answers(std::vector<std::string> answers);

  index_t size() const { return static_cast<index_t>(answers_.size()); }
  index_t id_of(const std::string& answer) const;  // -1 when unknown
  const std::string& answer_of(index_t id) const { return answers_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& answers() const { return answers_; }
  std::uint64_t hash() const;

 private:
  std::vector<std::string> answers_;
  std::unordered_map<std::string, index_t> to_id_;
};

struct VqaConfig {
  index_t vocab_size = 0;  // question token vocabulary
  index_t answer_count = 0;
  index_t resolution = 64;
  index_t channels = 32;          // tower width; pooled feature dim = 2*channels
  index_t question_embed = 32;
  index_t question_hidden = 64;   // must equal 2*channels
  index_t attention_hidden = 32;
  index_t glimpses = 2;
  index_t scene_classes = 0;      // auxiliary classifier head (0 disables)
  nn::RecurrentCell cell = nn::RecurrentCell::lstm;
  index_t feature_dim() const { return 2 * channels; }
};

struct VqaForward {
  Var answer_logits;           // [n, A]
  Var answer_log_probs;        // [n, A]
  std::vector<Var> attention;  // per glimpse, [n, locations] each summing to 1
};

/// Image tower + recurrent question encoding + stacked attention + classifier.
class VqaModel {
 public:
  VqaModel(VqaConfig cfg, Rng& rng);

  VqaForward answer_probs(const Var& images, const std::vector<index_t>& question_ids,
                          index_t n, index_t max_len,
                          const std::vector<index_t>& lengths) const;

  /// Pooled tower features (the evaluation feature extractor).
  Var image_features(const Var& images) const;
  /// Scene classifier logits over image_features (the evaluation scorer).
  Var scene_logits(const Var& images) const;

  const VqaConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  Var tower(const Var& images) const;  // [n, 2C, 8, 8]
  VqaConfig cfg_;
  nn::ParamStore ps_;
  std::vector<nn::Conv> downs_;
  Var question_embedding_;
  nn::RnnCell question_rnn_;
  struct Glimpse {
    Var w_features;  // [A, F]
    nn::Linear w_query;
    Var w_score;  // [1, A]
  };
  std::vector<Glimpse> glimpses_;
  nn::Linear classify1_, classify2_;
  nn::Linear scene_head_;
};

/// Eq-style scalar loss on one answer distribution: mean of -log P(a_k).
Scalar vqa_loss(const std::vector<Scalar>& answer_probs, const std::vector<index_t>& answer_ids);

struct VqaBatchLoss {
  Var loss;             // scalar Var (mean over counted samples)
  index_t counted = 0;  // samples with at least one in-vocabulary answer
  index_t skipped = 0;  // samples whose answers were all out-of-vocabulary
};

/// Batched loss from log-probabilities [n, A]; samples with every answer
/// out-of-vocabulary are skipped and counted, not raised.
VqaBatchLoss vqa_loss_batch(const Var& answer_log_probs,
                            const std::vector<std::vector<index_t>>& answer_ids);

/// Standard consensus VQA accuracy: mean over samples of min(#matches/3, 1),
/// plus the fraction whose prediction appears in the answer set at all.
struct VqaAccuracy {
  Scalar consensus = 0;
  Scalar top1_any = 0;
  index_t n = 0;
};
VqaAccuracy vqa_accuracy(const std::vector<std::string>& predictions,
                         const std::vector<data::QARecord>& records);

}  // namespace vqat2i::models
