#include "vqat2i/models/generator.hpp"

#include <cmath>
#include <stdexcept>

namespace vqat2i::models {

using namespace ag;

std::pair<Var, Var> word_attention(const Var& hidden, const Var& words, const Var& projection,
                                   const std::vector<index_t>& valid_lengths) {
  const auto& hs = hidden.value().shape();
  if (hs.size() != 4) throw std::invalid_argument("word_attention: hidden must be NCHW");
  index_t n = hs[0], C = hs[1], L = hs[2] * hs[3];
  for (index_t len : valid_lengths)
    if (len < 1) throw std::invalid_argument("word_attention: all-masked sequence");

  Var wproj = proj3(projection, words);             // [n, C, T]
  Var h_flat = reshape(hidden, {n, C, L});          // [n, C, L]
  Var scores = bmm(h_flat, wproj, true, false);     // [n, L, T]
  Var alpha = softmax_lastdim_masked(scores, valid_lengths);
  Var context = bmm(wproj, alpha, false, true);     // [n, C, L]
  return {reshape(context, {n, C, hs[2], hs[3]}), alpha};
}

Generator::Generator(GeneratorConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.stage_count < 1 || cfg_.stage_count > 3)
    throw std::invalid_argument("stage_count must be in {1,2,3}");
  if (cfg_.base_resolution < 8 || (cfg_.base_resolution & (cfg_.base_resolution - 1)))
    throw std::invalid_argument("base_resolution must be a power of two >= 8");

  index_t C = cfg_.base_channels;
  ca_fc_ = nn::Linear::make(ps_, "ca", cfg_.text_feature_dim, 2 * cfg_.condition_dim, rng);

  base_ups_ = 0;
  for (index_t r = 4; r < cfg_.base_resolution; r *= 2) ++base_ups_;
  index_t c0 = C << base_ups_;
  base_fc_ = nn::Linear::make(ps_, "base_fc", cfg_.noise_dim + cfg_.condition_dim,
                              c0 * 4 * 4, rng);
  base_norms_.push_back(nn::InstanceNorm::make(ps_, "base_norm0", c0));
  for (index_t u = 0; u < base_ups_; ++u) {
    index_t cin = C << (base_ups_ - u);
    base_convs_.push_back(nn::Conv::make(ps_, "base_up" + std::to_string(u), cin, cin / 2,
                                         3, 1, 1, rng));
    base_norms_.push_back(nn::InstanceNorm::make(ps_, "base_norm" + std::to_string(u + 1),
                                                 cin / 2));
  }

  for (index_t s = 1; s < cfg_.stage_count; ++s) {
    Stage st;
    std::string p = "stage" + std::to_string(s);
    st.attn_proj = ps_.param(p + ".attn_proj", nn::normal_init({C, cfg_.text_feature_dim}, rng));
    st.combine = nn::Conv::make(ps_, p + ".combine", 2 * C, C, 3, 1, 1, rng);
    st.combine_norm = nn::InstanceNorm::make(ps_, p + ".combine_norm", C);
    st.up_conv = nn::Conv::make(ps_, p + ".up", C, C, 3, 1, 1, rng);
    st.up_norm = nn::InstanceNorm::make(ps_, p + ".up_norm", C);
    stages_.push_back(std::move(st));
  }
  for (index_t s = 0; s < cfg_.stage_count; ++s)
    image_heads_.push_back(nn::Conv::make(ps_, "head" + std::to_string(s), C, 3, 3, 1, 1, rng));
}

ConditioningLatent Generator::condition_augment(const Var& sentence_embedding,
                                                const Tensor& eps) const {
  if (!sentence_embedding.value().all_finite())
    throw std::invalid_argument("condition_augment: non-finite sentence embedding");
  index_t n = sentence_embedding.value().dim(0);
  index_t c = cfg_.condition_dim;
  if (eps.dim(0) != n || eps.dim(1) != c)
    throw std::invalid_argument("condition_augment: eps shape mismatch");

  Var packed = ca_fc_(sentence_embedding);  // [n, 2c]
  ConditioningLatent lat;
  lat.mean = slice_cols(packed, 0, c);
  lat.log_variance = slice_cols(packed, c, 2 * c);
  Var stddev = exp(mul_scalar(lat.log_variance, 0.5));
  lat.sample = add(lat.mean, mul(stddev, constant(eps)));
  // 0.5 * sum(e^lv + mu^2 - 1 - lv) per sample, averaged over the batch
  Var inner = sub(add(exp(lat.log_variance), square(lat.mean)),
                  add_scalar(lat.log_variance, 1.0));
  lat.kl = mul_scalar(mean_all(row_sums(inner)), 0.5);
  return lat;
}

ImagePyramid Generator::generate(const Var& noise, const Var& condition, const Var& words,
                                 const std::vector<index_t>& valid_lengths) const {
  index_t n = noise.value().dim(0);
  if (noise.value().dim(1) != cfg_.noise_dim)
    throw std::invalid_argument("generate: noise dim mismatch, expected " +
                                std::to_string(cfg_.noise_dim));
  if (condition.value().dim(0) != n || condition.value().dim(1) != cfg_.condition_dim)
    throw std::invalid_argument("generate: condition shape mismatch");
  if (cfg_.stage_count > 1 &&
      (words.value().rank() != 3 || words.value().dim(1) != cfg_.text_feature_dim))
    throw std::invalid_argument("generate: word feature shape mismatch");

  index_t C = cfg_.base_channels;
  Var z = concat_cols(noise, condition);
  index_t c0 = C << base_ups_;
  Var h = reshape(base_fc_(z), {n, c0, 4, 4});
  h = relu(base_norms_[0](h));
  for (index_t u = 0; u < base_ups_; ++u) {
    h = upsample_nearest2(h);
    h = relu(base_norms_[static_cast<size_t>(u + 1)](base_convs_[static_cast<size_t>(u)](h)));
  }

  ImagePyramid pyramid;
  pyramid.images.push_back(tanh(image_heads_[0](h)));

  for (size_t s = 0; s < stages_.size(); ++s) {
    const Stage& st = stages_[s];
    auto [context, alpha] = word_attention(h, words, st.attn_proj, valid_lengths);
    Var joined = concat_channels(h, context);
    Var y = st.combine_norm(st.combine(joined));
    h = relu(add(y, h));  // residual on the running hidden state
    h = upsample_nearest2(h);
    h = relu(st.up_norm(st.up_conv(h)));
    pyramid.attention.push_back(alpha);
    pyramid.images.push_back(tanh(image_heads_[s + 1](h)));
  }
  return pyramid;
}

}  // namespace vqat2i::models
