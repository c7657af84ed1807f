#include "vqat2i/models/vqa.hpp"

#include "vqat2i/data/text.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace vqat2i::models {

using namespace ag;

AnswerVocabulary AnswerVocabulary::build(const std::vector<data::QARecord>& train_records,
                                         index_t top_n) {
  std::map<std::string, index_t> freq;
  for (const auto& rec : train_records)
    for (const auto& a : rec.answers) ++freq[data::lowercase(data::trim(a))];
  std::vector<std::pair<std::string, index_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> answers;
  for (const auto& [ans, n] : items) {
    if (top_n > 0 && static_cast<index_t>(answers.size()) >= top_n) break;
    answers.push_back(ans);
  }
  return from_answers(std::move(answers));
}

AnswerVocabulary AnswerVocabulary::from_answers(std::vector<std::string> answers) {
  AnswerVocabulary v;
  v.answers_ = std::move(answers);
  for (size_t i = 0; i < v.answers_.size(); ++i)
    v.to_id_[v.answers_[i]] = static_cast<index_t>(i);
  if (v.to_id_.size() != v.answers_.size())
    throw std::invalid_argument("duplicate answers in answer vocabulary");
  return v;
}

index_t AnswerVocabulary::id_of(const std::string& answer) const {
  auto it = to_id_.find(data::lowercase(data::trim(answer)));
  return it == to_id_.end() ? -1 : it->second;
}

std::uint64_t AnswerVocabulary::hash() const {
  std::uint64_t h = kFnvBasis;
  const char sep = '\x1f';
  for (const auto& a : answers_) {
    h = fnv1a64(a, h);
    h = fnv1a64(&sep, 1, h);
  }
  return h;
}

VqaModel::VqaModel(VqaConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.answer_count < 1) throw std::invalid_argument("answer_count must be >= 1");
  if (cfg_.question_hidden != 2 * cfg_.channels)
    throw std::invalid_argument("question_hidden must equal the pooled feature dim");
  index_t c = cfg_.channels;
  index_t in = 3;
  for (index_t r = cfg_.resolution; r > 8; r /= 2) {
    index_t out = downs_.empty() ? c : 2 * c;
    downs_.push_back(nn::Conv::make(ps_, "down" + std::to_string(downs_.size()), in, out, 4,
                                    2, 1, rng));
    in = out;
  }
  // keep the tower output at 2C channels regardless of depth
  if (in != 2 * c) {
    downs_.push_back(nn::Conv::make(ps_, "proj", in, 2 * c, 1, 1, 0, rng));
  }
  question_embedding_ =
      ps_.param("q_embedding", nn::uniform_init({cfg_.vocab_size, cfg_.question_embed}, rng, 0.1));
  question_rnn_ = nn::RnnCell::make(ps_, "q_rnn", cfg_.cell, cfg_.question_embed,
                                    cfg_.question_hidden, rng);
  for (index_t g = 0; g < cfg_.glimpses; ++g) {
    Glimpse gl;
    std::string p = "glimpse" + std::to_string(g);
    gl.w_features = ps_.param(p + ".features",
                              nn::normal_init({cfg_.attention_hidden, cfg_.feature_dim()}, rng));
    gl.w_query = nn::Linear::make(ps_, p + ".query", cfg_.question_hidden,
                                  cfg_.attention_hidden, rng);
    gl.w_score = ps_.param(p + ".score", nn::normal_init({1, cfg_.attention_hidden}, rng));
    glimpses_.push_back(std::move(gl));
  }
  classify1_ = nn::Linear::make(ps_, "classify1", cfg_.question_hidden, cfg_.question_hidden,
                                rng);
  classify2_ = nn::Linear::make(ps_, "classify2", cfg_.question_hidden, cfg_.answer_count, rng);
  if (cfg_.scene_classes > 0)
    scene_head_ = nn::Linear::make(ps_, "scene_head", cfg_.feature_dim(), cfg_.scene_classes,
                                   rng);
}

Var VqaModel::tower(const Var& images) const {
  const auto& s = images.value().shape();
  if (s.size() != 4 || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
    throw std::invalid_argument("vqa model expects resolution " +
                                std::to_string(cfg_.resolution));
  Var h = images;
  for (const auto& conv : downs_) h = leaky_relu(conv(h), 0.2);
  return h;  // [n, 2C, 8, 8]
}

Var VqaModel::image_features(const Var& images) const {
  return global_avg_pool(tower(images));
}

Var VqaModel::scene_logits(const Var& images) const {
  if (cfg_.scene_classes < 1) throw std::logic_error("scene head disabled");
  return scene_head_(image_features(images));
}

VqaForward VqaModel::answer_probs(const Var& images, const std::vector<index_t>& question_ids,
                                  index_t n, index_t max_len,
                                  const std::vector<index_t>& lengths) const {
  if (n < 1 || max_len < 1) throw std::invalid_argument("empty question");
  for (index_t len : lengths)
    if (len < 1) throw std::invalid_argument("empty question");

  Var feats = tower(images);  // [n, F, 8, 8]
  index_t F = cfg_.feature_dim();
  index_t L = 64;
  Var v = reshape(feats, {n, F, L});

  // question encoding: final recurrent state at each sequence's length
  Var h = constant(Tensor({n, cfg_.question_hidden}));
  Var c = constant(Tensor({n, cfg_.question_hidden}));
  for (index_t t = 0; t < max_len; ++t) {
    std::vector<index_t> ids(static_cast<size_t>(n));
    for (index_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = question_ids[i * max_len + t];
    Var x = embedding(question_embedding_, ids);
    auto [hn, cn] = question_rnn_.step(x, h, c);
    Tensor m({n}), inv({n});
    for (index_t i = 0; i < n; ++i) {
      m[i] = t < lengths[static_cast<size_t>(i)] ? 1.0 : 0.0;
      inv[i] = 1.0 - m[i];
    }
    h = add(mul_colvec(hn, constant(m)), mul_colvec(h, constant(inv)));
    c = add(mul_colvec(cn, constant(m)), mul_colvec(c, constant(inv)));
  }

  VqaForward out;
  Var u = h;  // query, refined per glimpse
  for (const auto& gl : glimpses_) {
    Var proj_v = proj3(gl.w_features, v);                    // [n, A, L]
    Var proj_u = gl.w_query(u);                              // [n, A]
    Var scores3 = proj3(gl.w_score, tanh(add_cols3(proj_v, proj_u)));  // [n, 1, L]
    Var alpha = softmax_rows(reshape(scores3, {n, L}));      // [n, L]
    Var attended = reshape(bmm(v, reshape(alpha, {n, L, 1})), {n, F});
    u = add(u, attended);
    out.attention.push_back(alpha);
  }
  out.answer_logits = classify2_(relu(classify1_(u)));
  out.answer_log_probs = log_softmax_rows(out.answer_logits);
  return out;
}

Scalar vqa_loss(const std::vector<Scalar>& answer_probs, const std::vector<index_t>& answer_ids) {
  if (answer_ids.empty()) throw std::invalid_argument("vqa_loss: no answers");
  Scalar total = 0;
  for (index_t id : answer_ids) {
    if (id < 0 || id >= static_cast<index_t>(answer_probs.size()))
      throw std::out_of_range("vqa_loss: answer id out of range");
    total += -std::log(answer_probs[static_cast<size_t>(id)]);
  }
  return total / static_cast<Scalar>(answer_ids.size());
}

VqaBatchLoss vqa_loss_batch(const Var& answer_log_probs,
                            const std::vector<std::vector<index_t>>& answer_ids) {
  index_t n = answer_log_probs.value().dim(0);
  if (static_cast<index_t>(answer_ids.size()) != n)
    throw std::invalid_argument("vqa_loss_batch: size mismatch");
  VqaBatchLoss out;
  index_t A = answer_log_probs.value().dim(1);
  std::vector<Var> per_sample;
  for (index_t i = 0; i < n; ++i) {
    std::vector<index_t> ids;
    for (index_t id : answer_ids[static_cast<size_t>(i)])
      if (id >= 0) ids.push_back(id);
    if (ids.empty()) {
      ++out.skipped;
      continue;
    }
    ++out.counted;
    // mean_k -log p(a_k) as a weighted sum; repeated answers keep their weight
    Tensor weights({A});
    for (index_t id : ids) {
      if (id >= A) throw std::out_of_range("vqa_loss_batch: answer id out of range");
      weights[id] += 1.0 / static_cast<Scalar>(ids.size());
    }
    Var row = select0(answer_log_probs, i);  // [A]
    per_sample.push_back(neg(sum_all(mul(row, constant(weights)))));
  }
  if (per_sample.empty()) {
    out.loss = constant(Tensor::scalar(0.0));
    return out;
  }
  Var total = per_sample[0];
  for (size_t i = 1; i < per_sample.size(); ++i) total = add(total, per_sample[i]);
  out.loss = mul_scalar(total, 1.0 / static_cast<Scalar>(per_sample.size()));
  return out;
}

VqaAccuracy vqa_accuracy(const std::vector<std::string>& predictions,
                         const std::vector<data::QARecord>& records) {
  if (predictions.size() != records.size())
    throw std::invalid_argument("vqa_accuracy: misaligned predictions and records");
  VqaAccuracy acc;
  acc.n = static_cast<index_t>(records.size());
  if (records.empty()) return acc;
  Scalar consensus = 0, top1 = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    std::string pred = data::lowercase(data::trim(predictions[i]));
    index_t matches = 0;
    for (const auto& a : records[i].answers)
      if (data::lowercase(data::trim(a)) == pred) ++matches;
    consensus += std::min(static_cast<Scalar>(matches) / 3.0, 1.0);
    top1 += matches > 0 ? 1.0 : 0.0;
  }
  acc.consensus = consensus / static_cast<Scalar>(records.size());
  acc.top1_any = top1 / static_cast<Scalar>(records.size());
  return acc;
}

}  // namespace vqat2i::models
