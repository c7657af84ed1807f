#include "vqat2i/models/text_encoder.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

using namespace vqat2i;
using namespace vqat2i::models;
using vqat2i::testing::gradcheck;

namespace {

TextEncoderConfig tiny_config() {
  TextEncoderConfig cfg;
  cfg.vocab_size = 12;
  cfg.embedding_dim = 4;
  cfg.hidden_dim = 4;  // D = 8
  return cfg;
}

}  // namespace

TEST_CASE("length-1 sequence: one valid column equal to the sentence embedding") {
  Rng rng(1);
  TextEncoder enc(tiny_config(), rng);
  std::vector<index_t> ids{5, 0, 0};  // padded to T=3
  auto out = enc.encode_ids(ids, 1, 3, {1});
  CHECK(out.word_features.value().shape() == std::vector<index_t>{1, 8, 3});
  CHECK(out.sentence_embedding.value().shape() == std::vector<index_t>{1, 8});
  for (index_t d = 0; d < 8; ++d) {
    // single valid column equals the sentence embedding entry-wise
    CHECK(out.word_features.value()[d * 3 + 0] ==
          doctest::Approx(out.sentence_embedding.value()[d]).epsilon(1e-12));
    CHECK(out.word_features.value()[d * 3 + 1] == 0.0);
    CHECK(out.word_features.value()[d * 3 + 2] == 0.0);
  }
}

TEST_CASE("padding beyond valid length leaves outputs bit-unchanged") {
  Rng rng(2);
  TextEncoder enc(tiny_config(), rng);
  std::vector<index_t> short_ids{4, 7, 9};
  auto a = enc.encode_ids(short_ids, 1, 3, {3});
  std::vector<index_t> padded{4, 7, 9, 0, 0};
  auto b = enc.encode_ids(padded, 1, 5, {3});
  for (index_t d = 0; d < 8; ++d) {
    CHECK(a.sentence_embedding.value()[d] == b.sentence_embedding.value()[d]);
    for (index_t t = 0; t < 3; ++t)
      CHECK(a.word_features.value()[d * 3 + t] == b.word_features.value()[d * 5 + t]);
    for (index_t t = 3; t < 5; ++t) CHECK(b.word_features.value()[d * 5 + t] == 0.0);
  }
}

TEST_CASE("batch order permutation leaves per-sequence outputs unchanged") {
  Rng rng(3);
  TextEncoder enc(tiny_config(), rng);
  // two sequences of different lengths, in both orders
  std::vector<index_t> batch_a{3, 6, 8, 2, 0, 0};  // seq0 len 3, seq1 len 1
  auto a = enc.encode_ids(batch_a, 2, 3, {3, 1});
  std::vector<index_t> batch_b{2, 0, 0, 3, 6, 8};
  auto b = enc.encode_ids(batch_b, 2, 3, {1, 3});
  for (index_t d = 0; d < 8; ++d) {
    CHECK(a.sentence_embedding.value().at(0, d) == b.sentence_embedding.value().at(1, d));
    CHECK(a.sentence_embedding.value().at(1, d) == b.sentence_embedding.value().at(0, d));
    for (index_t t = 0; t < 3; ++t) {
      CHECK(a.word_features.value()[(0 * 8 + d) * 3 + t] ==
            b.word_features.value()[(1 * 8 + d) * 3 + t]);
      CHECK(a.word_features.value()[(1 * 8 + d) * 3 + t] ==
            b.word_features.value()[(0 * 8 + d) * 3 + t]);
    }
  }
}

TEST_CASE("deterministic outputs for fixed parameters") {
  Rng rng(4);
  TextEncoder enc(tiny_config(), rng);
  std::vector<index_t> ids{1, 2, 3, 4};
  auto a = enc.encode_ids(ids, 1, 4, {4});
  auto b = enc.encode_ids(ids, 1, 4, {4});
  for (index_t i = 0; i < a.word_features.value().size(); ++i)
    CHECK(a.word_features.value()[i] == b.word_features.value()[i]);
}

TEST_CASE("token id out of range raises") {
  Rng rng(5);
  TextEncoder enc(tiny_config(), rng);
  std::vector<index_t> ids{99};
  CHECK_THROWS_AS(enc.encode_ids(ids, 1, 1, {1}), std::out_of_range);
  CHECK_THROWS_AS(enc.encode_ids({1, 1}, 1, 2, {0}), std::invalid_argument);
}

TEST_CASE("gradient of a scalar probe w.r.t. embedding weights matches central differences") {
  Rng rng(6);
  TextEncoder enc(tiny_config(), rng);  // D=8, T=4 probe below
  std::vector<index_t> ids{5, 2, 7, 1, 3, 3, 0, 0};
  auto fn = [&] {
    auto out = enc.encode_ids(ids, 2, 4, {4, 2});
    return ag::add(ag::sum_all(ag::square(out.word_features)),
                   ag::sum_all(ag::square(out.sentence_embedding)));
  };
  Var table = enc.params().params()[0];
  CHECK(gradcheck(fn, {table}, 1e-5) < 1e-9);
  // the full parameter set, both cells included
  CHECK(gradcheck(fn, enc.params().params(), 1e-5) < 1e-9);
}

TEST_CASE("gru cell variant encodes and gradchecks") {
  Rng rng(7);
  TextEncoderConfig cfg = tiny_config();
  cfg.cell = nn::RecurrentCell::gru;
  TextEncoder enc(cfg, rng);
  std::vector<index_t> ids{5, 2, 7, 1};
  auto fn = [&] {
    auto out = enc.encode_ids(ids, 1, 4, {3});
    return ag::sum_all(ag::square(out.sentence_embedding));
  };
  CHECK(gradcheck(fn, enc.params().params(), 1e-5) < 1e-9);
}
