#include "vqat2i/models/discriminator.hpp"

#include <stdexcept>

namespace vqat2i::models {

using namespace ag;

namespace {
constexpr Scalar kLeakSlope = 0.2;
constexpr index_t kChannelCap = 128;
}  // namespace

Tensor DiscriminatorOutput::uncond_prob() const {
  Tensor p(uncond_logit.value().shape());
  for (index_t i = 0; i < p.size(); ++i)
    p[i] = 1.0 / (1.0 + std::exp(-uncond_logit.value()[i]));
  return p;
}

Tensor DiscriminatorOutput::cond_prob() const {
  Tensor p(cond_logit.value().shape());
  for (index_t i = 0; i < p.size(); ++i)
    p[i] = 1.0 / (1.0 + std::exp(-cond_logit.value()[i]));
  return p;
}

StageDiscriminator::StageDiscriminator(DiscriminatorConfig cfg, Rng& rng) : cfg_(cfg) {
  if (cfg_.resolution < 8 || (cfg_.resolution & (cfg_.resolution - 1)))
    throw std::invalid_argument("discriminator resolution must be a power of two >= 8");
  index_t c = cfg_.base_channels;
  index_t in = 3;
  for (index_t r = cfg_.resolution; r > 4; r /= 2) {
    downs_.push_back(nn::Conv::make(ps_, "down" + std::to_string(downs_.size()), in, c, 4, 2,
                                    1, rng));
    in = c;
    c = std::min(c * 2, kChannelCap);
  }
  final_channels_ = in;
  uncond_head_ = nn::Conv::make(ps_, "uncond_head", final_channels_, 1, 4, 1, 0, rng);
  text_compress_ = nn::Linear::make(ps_, "text_compress", cfg_.text_feature_dim,
                                    cfg_.condition_channels, rng);
  cond_mix_ = nn::Conv::make(ps_, "cond_mix", final_channels_ + cfg_.condition_channels,
                             final_channels_, 1, 1, 0, rng);
  cond_head_ = nn::Conv::make(ps_, "cond_head", final_channels_, 1, 4, 1, 0, rng);
}

DiscriminatorOutput StageDiscriminator::discriminate(const Var& images,
                                                     const Var& sentence_embedding) const {
  const auto& s = images.value().shape();
  if (s.size() != 4 || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
    throw std::invalid_argument(
        "discriminator stage expects resolution " + std::to_string(cfg_.resolution) + ", got " +
        (s.size() == 4 ? std::to_string(s[2]) : std::string("non-image input")));
  index_t n = s[0];

  Var h = images;
  for (const auto& conv : downs_) h = leaky_relu(conv(h), kLeakSlope);
  // h: [n, final_channels, 4, 4]

  DiscriminatorOutput out;
  out.uncond_logit = reshape(uncond_head_(h), {n});

  Var t = text_compress_(sentence_embedding);  // [n, cc]
  // tile over the 4x4 grid
  Var t3 = reshape(t, {n, cfg_.condition_channels, 1});
  Var ones = constant(Tensor::full({n, 1, 16}, 1.0));
  Var tiled = reshape(bmm(t3, ones), {n, cfg_.condition_channels, 4, 4});
  Var mixed = leaky_relu(cond_mix_(concat_channels(h, tiled)), kLeakSlope);
  out.cond_logit = reshape(cond_head_(mixed), {n});
  return out;
}

}  // namespace vqat2i::models
