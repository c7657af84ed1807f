#include "vqat2i/models/discriminator.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

using namespace vqat2i;
using namespace vqat2i::models;
using namespace vqat2i::ag;
using vqat2i::testing::gradcheck;

namespace {

DiscriminatorConfig tiny_config() {
  DiscriminatorConfig cfg;
  cfg.resolution = 16;
  cfg.base_channels = 6;
  cfg.text_feature_dim = 10;
  cfg.condition_channels = 4;
  return cfg;
}

Var randn(std::vector<index_t> shape, Rng& rng, bool rg = false) {
  Tensor t(std::move(shape));
  rng.fill_normal(t);
  return Var(t, rg);
}

}  // namespace

TEST_CASE("zero-initialized heads give probability one half") {
  Rng rng(1);
  StageDiscriminator d(tiny_config(), rng);
  for (auto [name, p] : d.params().entries())  // Var copies share the node
    if (name.find("head") != std::string::npos) p.value().fill(0);
  Var img = randn({3, 3, 16, 16}, rng);
  Var sent = randn({3, 10}, rng);
  auto out = d.discriminate(img, sent);
  for (index_t i = 0; i < 3; ++i) {
    CHECK(out.uncond_prob()[i] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.cond_prob()[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("unconditional path ignores the text while the conditional path uses it") {
  Rng rng(2);
  StageDiscriminator d(tiny_config(), rng);
  Var img = randn({2, 3, 16, 16}, rng);
  Var sent_a = randn({2, 10}, rng);
  Var sent_b = randn({2, 10}, rng);
  auto oa = d.discriminate(img, sent_a);
  auto ob = d.discriminate(img, sent_b);
  for (index_t i = 0; i < 2; ++i) {
    CHECK(oa.uncond_logit.value()[i] == ob.uncond_logit.value()[i]);  // bit identical
    CHECK(oa.cond_logit.value()[i] != ob.cond_logit.value()[i]);
  }
  // conditional path receives gradient w.r.t. the embedding
  Var sent_g = randn({2, 10}, rng, true);
  auto og = d.discriminate(img, sent_g);
  backward(mean_all(og.cond_logit));
  bool nonzero = false;
  for (index_t i = 0; i < sent_g.grad().size(); ++i) nonzero |= sent_g.grad()[i] != 0;
  CHECK(nonzero);
}

TEST_CASE("probability equals sigmoid of the retained logit") {
  Rng rng(3);
  StageDiscriminator d(tiny_config(), rng);
  Var img = randn({2, 3, 16, 16}, rng);
  Var sent = randn({2, 10}, rng);
  auto out = d.discriminate(img, sent);
  for (index_t i = 0; i < 2; ++i) {
    Scalar expect = 1.0 / (1.0 + std::exp(-out.uncond_logit.value()[i]));
    CHECK(std::abs(out.uncond_prob()[i] - expect) < 1e-7);
    CHECK(out.uncond_prob()[i] > 0.0);
    CHECK(out.uncond_prob()[i] < 1.0);
    CHECK(out.cond_prob()[i] > 0.0);
    CHECK(out.cond_prob()[i] < 1.0);
  }
}

TEST_CASE("resolution mismatch names the expected stage size") {
  Rng rng(4);
  StageDiscriminator d(tiny_config(), rng);
  Var img = randn({1, 3, 8, 8}, rng);
  Var sent = randn({1, 10}, rng);
  CHECK_THROWS_WITH_AS(d.discriminate(img, sent),
                       doctest::Contains("expects resolution 16"), std::invalid_argument);
}

TEST_CASE("head gradients match central differences") {
  Rng rng(5);
  DiscriminatorConfig cfg = tiny_config();
  cfg.resolution = 8;
  cfg.base_channels = 4;
  StageDiscriminator d(cfg, rng);
  Var img = randn({2, 3, 8, 8}, rng, true);
  Var sent = randn({2, 10}, rng, true);
  auto fn = [&] {
    auto out = d.discriminate(img, sent);
    return add(mean_all(softplus(out.uncond_logit)), mean_all(softplus(out.cond_logit)));
  };
  std::vector<Var> probes{img, sent};
  for (auto& p : d.params().params()) probes.push_back(p);
  CHECK(gradcheck(fn, probes, 1e-5, 16) < 1e-6);
}
