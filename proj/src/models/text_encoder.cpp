#include "vqat2i/models/text_encoder.hpp"

#include <stdexcept>

namespace vqat2i::models {

using namespace ag;

TextEncoder::TextEncoder(TextEncoderConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.vocab_size < 1 || cfg_.embedding_dim < 1 || cfg_.hidden_dim < 1)
    throw std::invalid_argument("text encoder dims must be >= 1");
  embedding_ = ps_.param("embedding", nn::uniform_init({cfg_.vocab_size, cfg_.embedding_dim},
                                                       rng, 0.1));
  fwd_ = nn::RnnCell::make(ps_, "fwd", cfg_.cell, cfg_.embedding_dim, cfg_.hidden_dim, rng);
  bwd_ = nn::RnnCell::make(ps_, "bwd", cfg_.cell, cfg_.embedding_dim, cfg_.hidden_dim, rng);
}

TextEncoding TextEncoder::encode(const data::TextBatch& batch, Rng* dropout_rng) const {
  return encode_ids(batch.token_ids, batch.n, batch.max_len, batch.lengths, dropout_rng);
}

TextEncoding TextEncoder::encode_ids(const std::vector<index_t>& flat_ids, index_t n,
                                     index_t max_len, const std::vector<index_t>& lengths,
                                     Rng* dropout_rng) const {
  if (n < 1 || max_len < 1) throw std::invalid_argument("empty text batch");
  if (static_cast<index_t>(lengths.size()) != n)
    throw std::invalid_argument("lengths size mismatch");
  for (index_t len : lengths)
    if (len < 1 || len > max_len) throw std::invalid_argument("invalid sequence length");

  index_t H = cfg_.hidden_dim;
  // per-position embeddings, with optional dropout during pretraining
  std::vector<Var> inputs(static_cast<size_t>(max_len));
  for (index_t t = 0; t < max_len; ++t) {
    std::vector<index_t> ids(static_cast<size_t>(n));
    for (index_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = flat_ids[i * max_len + t];
    Var x = embedding(embedding_, ids);
    if (dropout_rng && cfg_.dropout_rate > 0) x = dropout(x, cfg_.dropout_rate, *dropout_rng);
    inputs[static_cast<size_t>(t)] = x;
  }

  // position masks: 1 while t < length
  std::vector<Var> masks(static_cast<size_t>(max_len));
  for (index_t t = 0; t < max_len; ++t) {
    Tensor m({n});
    for (index_t i = 0; i < n; ++i) m[i] = t < lengths[static_cast<size_t>(i)] ? 1.0 : 0.0;
    masks[static_cast<size_t>(t)] = constant(m);
  }
  auto masked_update = [&](const Var& fresh, const Var& kept, index_t t) {
    Tensor inv({n});
    for (index_t i = 0; i < n; ++i) inv[i] = t < lengths[static_cast<size_t>(i)] ? 0.0 : 1.0;
    return add(mul_colvec(fresh, masks[static_cast<size_t>(t)]),
               mul_colvec(kept, constant(inv)));
  };

  std::vector<Var> fwd_states(static_cast<size_t>(max_len));
  Var h = constant(Tensor({n, H}));
  Var c = constant(Tensor({n, H}));
  for (index_t t = 0; t < max_len; ++t) {
    auto [hn, cn] = fwd_.step(inputs[static_cast<size_t>(t)], h, c);
    fwd_states[static_cast<size_t>(t)] = mul_colvec(hn, masks[static_cast<size_t>(t)]);
    h = masked_update(hn, h, t);
    c = masked_update(cn, c, t);
  }
  Var fwd_final = h;

  std::vector<Var> bwd_states(static_cast<size_t>(max_len));
  h = constant(Tensor({n, H}));
  c = constant(Tensor({n, H}));
  for (index_t t = max_len - 1; t >= 0; --t) {
    auto [hn, cn] = bwd_.step(inputs[static_cast<size_t>(t)], h, c);
    bwd_states[static_cast<size_t>(t)] = mul_colvec(hn, masks[static_cast<size_t>(t)]);
    h = masked_update(hn, h, t);
    c = masked_update(cn, c, t);
  }
  Var bwd_final = h;

  std::vector<Var> per_position(static_cast<size_t>(max_len));
  for (index_t t = 0; t < max_len; ++t)
    per_position[static_cast<size_t>(t)] = concat_cols(fwd_states[static_cast<size_t>(t)],
                                                       bwd_states[static_cast<size_t>(t)]);
  TextEncoding enc;
  enc.word_features = stack_lastdim(per_position);          // [n, D, T]
  enc.sentence_embedding = concat_cols(fwd_final, bwd_final);  // [n, D]
  enc.lengths = lengths;
  return enc;
}

}  // namespace vqat2i::models
