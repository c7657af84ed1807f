#include "vqat2i/models/generator.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <cmath>

using namespace vqat2i;
using namespace vqat2i::models;
using namespace vqat2i::ag;
using vqat2i::testing::gradcheck;

namespace {

GeneratorConfig tiny_config() {
  GeneratorConfig cfg;
  cfg.noise_dim = 6;
  cfg.condition_dim = 5;
  cfg.base_channels = 8;
  cfg.stage_count = 2;
  cfg.base_resolution = 8;
  cfg.text_feature_dim = 10;
  return cfg;
}

Var randn(std::vector<index_t> shape, Rng& rng, bool rg = false) {
  Tensor t(std::move(shape));
  rng.fill_normal(t);
  return Var(t, rg);
}

}  // namespace

TEST_CASE("condition_augment closed-form cases") {
  Rng rng(1);
  GeneratorConfig cfg = tiny_config();
  Generator gen(cfg, rng);
  index_t d = cfg.condition_dim;

  // force mean and log variance by zeroing the producing layer
  Var w = gen.params().params()[0];  // ca.w
  Var b = gen.params().params()[1];  // ca.b
  w.value().fill(0);
  b.value().fill(0);

  Var sentence = randn({2, cfg.text_feature_dim}, rng);
  Tensor eps({2, d});

  SUBCASE("standard normal against itself has zero divergence") {
    auto lat = gen.condition_augment(sentence, eps);
    CHECK(lat.kl.item() == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("unit means with zero log variance give d/2") {
    for (index_t i = 0; i < d; ++i) b.value()[i] = 1.0;  // mean = 1-vector
    auto lat = gen.condition_augment(sentence, eps);
    CHECK(lat.kl.item() == doctest::Approx(d / 2.0).epsilon(1e-12));
  }

  SUBCASE("random latent matches the closed form") {
    Rng r2(9);
    r2.fill_normal(w.value(), 0, 0.3);
    r2.fill_normal(b.value(), 0, 0.3);
    r2.fill_normal(eps);
    auto lat = gen.condition_augment(sentence, eps);
    Scalar expect = 0;
    for (index_t i = 0; i < 2; ++i)
      for (index_t j = 0; j < d; ++j) {
        Scalar mu = lat.mean.value().at(i, j), lv = lat.log_variance.value().at(i, j);
        expect += 0.5 * (std::exp(lv) + mu * mu - 1.0 - lv);
      }
    expect /= 2.0;  // batch mean
    CHECK(std::abs(lat.kl.item() - expect) < 1e-9);
    // sample = mean + exp(lv/2) * eps
    for (index_t i = 0; i < 2; ++i)
      for (index_t j = 0; j < d; ++j) {
        Scalar want = lat.mean.value().at(i, j) +
                      std::exp(0.5 * lat.log_variance.value().at(i, j)) * eps.at(i, j);
        CHECK(lat.sample.value().at(i, j) == doctest::Approx(want).epsilon(1e-12));
      }
  }

  SUBCASE("KL stays non-negative over random inputs") {
    Rng r3(11);
    r3.fill_normal(w.value(), 0, 0.5);
    r3.fill_normal(b.value(), 0, 0.5);
    for (int trial = 0; trial < 10000; ++trial) {
      Tensor s({1, cfg.text_feature_dim});
      r3.fill_normal(s, 0, 2.0);
      Tensor e({1, d});
      r3.fill_normal(e);
      auto lat = gen.condition_augment(Var(s, false), e);
      CHECK(lat.kl.item() >= 0.0);
    }
  }

  SUBCASE("non-finite input raises") {
    Tensor bad({1, cfg.text_feature_dim});
    bad[0] = std::numeric_limits<Scalar>::quiet_NaN();
    Tensor e({1, d});
    CHECK_THROWS_AS(gen.condition_augment(Var(bad, false), e), std::invalid_argument);
  }
}

TEST_CASE("word attention weight structure") {
  Rng rng(2);
  index_t n = 2, C = 4, D = 6, T = 3;
  Var hidden = randn({n, C, 2, 2}, rng);
  Var proj = randn({C, D}, rng);

  SUBCASE("single valid word takes all the weight") {
    Var words = randn({n, D, T}, rng);
    auto [ctx, alpha] = word_attention(hidden, words, proj, {1, 1});
    for (index_t i = 0; i < n; ++i)
      for (index_t l = 0; l < 4; ++l) {
        CHECK(alpha.value()[(i * 4 + l) * T + 0] == doctest::Approx(1.0));
        CHECK(alpha.value()[(i * 4 + l) * T + 1] == 0.0);
      }
  }

  SUBCASE("identical word columns share weight equally") {
    Tensor w({n, D, T});
    Rng r(3);
    for (index_t i = 0; i < n; ++i)
      for (index_t d = 0; d < D; ++d) {
        Scalar v = r.normal();
        w[(i * D + d) * T + 0] = v;
        w[(i * D + d) * T + 1] = v;
        w[(i * D + d) * T + 2] = r.normal();
      }
    auto [ctx, alpha] = word_attention(hidden, Var(w, false), proj, {2, 2});
    for (index_t i = 0; i < n; ++i)
      for (index_t l = 0; l < 4; ++l) {
        CHECK(alpha.value()[(i * 4 + l) * T + 0] ==
              doctest::Approx(alpha.value()[(i * 4 + l) * T + 1]).epsilon(1e-12));
        CHECK(alpha.value()[(i * 4 + l) * T + 0] == doctest::Approx(0.5).epsilon(1e-9));
      }
  }

  SUBCASE("three-word weights match a direct softmax oracle") {
    Var words = randn({n, D, T}, rng);
    auto [ctx, alpha] = word_attention(hidden, words, proj, {3, 3});
    // oracle: score(l,t) = h_l . (P w_t), softmax over t
    for (index_t i = 0; i < n; ++i)
      for (index_t l = 0; l < 4; ++l) {
        Scalar scores[3];
        for (index_t t = 0; t < T; ++t) {
          Scalar s = 0;
          for (index_t c = 0; c < C; ++c) {
            Scalar pw = 0;
            for (index_t d = 0; d < D; ++d)
              pw += proj.value().at(c, d) * words.value()[(i * D + d) * T + t];
            s += hidden.value()[(i * C + c) * 4 + l] * pw;
          }
          scores[t] = s;
        }
        Scalar mx = std::max({scores[0], scores[1], scores[2]});
        Scalar z = 0;
        for (auto s : scores) z += std::exp(s - mx);
        for (index_t t = 0; t < T; ++t)
          CHECK(std::abs(alpha.value()[(i * 4 + l) * T + t] - std::exp(scores[t] - mx) / z) <
                1e-6);
        // context equals the weighted sum of projected words
        for (index_t c = 0; c < C; ++c) {
          Scalar want = 0;
          for (index_t t = 0; t < T; ++t) {
            Scalar pw = 0;
            for (index_t d = 0; d < D; ++d)
              pw += proj.value().at(c, d) * words.value()[(i * D + d) * T + t];
            want += alpha.value()[(i * 4 + l) * T + t] * pw;
          }
          CHECK(ctx.value()[(i * C + c) * 4 + l] == doctest::Approx(want).epsilon(1e-9));
        }
      }
  }

  SUBCASE("all-masked sequence raises") {
    Var words = randn({n, D, T}, rng);
    CHECK_THROWS_AS(word_attention(hidden, words, proj, {0, 2}), std::invalid_argument);
  }
}

TEST_CASE("generate is deterministic and respects the stage contract") {
  Rng rng(4);
  GeneratorConfig cfg = tiny_config();
  Generator gen(cfg, rng);
  index_t n = 2, T = 3;
  Var noise = randn({n, cfg.noise_dim}, rng);
  Var cond = randn({n, cfg.condition_dim}, rng);
  Var words = randn({n, cfg.text_feature_dim, T}, rng);

  auto a = gen.generate(noise, cond, words, {3, 2});
  auto b = gen.generate(noise, cond, words, {3, 2});
  REQUIRE(a.images.size() == 2);
  CHECK(a.images[0].value().shape() == std::vector<index_t>{n, 3, 8, 8});
  CHECK(a.images[1].value().shape() == std::vector<index_t>{n, 3, 16, 16});
  for (size_t s = 0; s < a.images.size(); ++s)
    for (index_t i = 0; i < a.images[s].value().size(); ++i) {
      CHECK(a.images[s].value()[i] == b.images[s].value()[i]);
      CHECK(a.images[s].value()[i] >= -1.0);
      CHECK(a.images[s].value()[i] <= 1.0);
    }
  // attention rows sum to one at every refinement stage
  REQUIRE(a.attention.size() == 1);
  const Tensor& alpha = a.attention[0].value();
  for (index_t i = 0; i < n; ++i)
    for (index_t l = 0; l < 64; ++l) {
      Scalar s = 0;
      for (index_t t = 0; t < T; ++t) s += alpha[(i * 64 + l) * T + t];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("single-stage pyramid has one image at the base resolution") {
  Rng rng(5);
  GeneratorConfig cfg = tiny_config();
  cfg.stage_count = 1;
  Generator gen(cfg, rng);
  Var noise = randn({1, cfg.noise_dim}, rng);
  Var cond = randn({1, cfg.condition_dim}, rng);
  Var words = randn({1, cfg.text_feature_dim, 2}, rng);
  auto p = gen.generate(noise, cond, words, {2});
  CHECK(p.images.size() == 1);
  CHECK(p.attention.empty());
  CHECK(p.images[0].value().shape() == std::vector<index_t>{1, 3, 8, 8});
}

TEST_CASE("gradients flow from every stage image to noise and both text inputs") {
  Rng rng(6);
  GeneratorConfig cfg = tiny_config();
  Generator gen(cfg, rng);
  Var noise = randn({1, cfg.noise_dim}, rng, true);
  Var sentence = randn({1, cfg.text_feature_dim}, rng, true);
  Tensor eps({1, cfg.condition_dim});
  Rng(7).fill_normal(eps);
  Var words = randn({1, cfg.text_feature_dim, 3}, rng, true);

  for (size_t stage = 0; stage < 2; ++stage) {
    noise.node()->grad = Tensor();
    sentence.node()->grad = Tensor();
    words.node()->grad = Tensor();
    auto lat = gen.condition_augment(sentence, eps);
    auto pyr = gen.generate(noise, lat.sample, words, {3});
    backward(mean_all(pyr.images[stage]));
    auto nonzero = [](const Tensor& g) {
      if (!g.defined()) return false;
      for (index_t i = 0; i < g.size(); ++i)
        if (g[i] != 0) return true;
      return false;
    };
    CHECK(nonzero(noise.grad()));
    CHECK(nonzero(sentence.grad()));
    if (stage > 0) CHECK(nonzero(words.grad()));
  }
}

TEST_CASE("tiny-config pixel gradients match central differences") {
  Rng rng(8);
  GeneratorConfig cfg = tiny_config();
  cfg.base_channels = 4;
  Generator gen(cfg, rng);
  Var noise = randn({1, cfg.noise_dim}, rng, true);
  Var cond = randn({1, cfg.condition_dim}, rng, true);
  Var words = randn({1, cfg.text_feature_dim, 3}, rng, true);

  auto fn = [&] {
    auto pyr = gen.generate(noise, cond, words, {3});
    Var total = mean_all(pyr.images[0]);
    for (size_t s = 1; s < pyr.images.size(); ++s)
      total = add(total, mean_all(pyr.images[s]));
    return total;
  };
  // selected weights across the pipeline plus all inputs
  std::vector<Var> probes{noise, cond, words};
  auto params = gen.params().params();
  for (size_t i = 0; i < params.size(); i += 5) probes.push_back(params[i]);
  CHECK(gradcheck(fn, probes, 1e-5, 24) < 1e-6);
}
