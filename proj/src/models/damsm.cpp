#include "vqat2i/models/damsm.hpp"

#include <stdexcept>

namespace vqat2i::models {

using namespace ag;

namespace {
constexpr Scalar kLeakSlope = 0.2;
constexpr Scalar kNormEps = 1e-8;
}  // namespace

DamsmImageEncoder::DamsmImageEncoder(DamsmConfig cfg, Rng& rng) : cfg_(cfg) {
  index_t c = cfg_.base_channels;
  index_t in = 3;
  // patch convs (k2 s2, no padding) keep constant inputs exactly constant
  // across regions
  for (index_t r = cfg_.resolution; r > 8; r /= 2) {
    downs_.push_back(nn::Conv::make(ps_, "down" + std::to_string(downs_.size()), in, c, 2, 2,
                                    0, rng));
    in = c;
    c = std::min(c * 2, index_t(256));
  }
  tower_channels_ = in;
  region_head_ = nn::Conv::make(ps_, "region_head", tower_channels_, cfg_.feature_dim, 1, 1,
                                0, rng);
  global_head_ = nn::Linear::make(ps_, "global_head", tower_channels_, cfg_.feature_dim, rng);
}

RegionFeatures DamsmImageEncoder::encode(const Var& images) const {
  const auto& s = images.value().shape();
  if (s.size() != 4 || s[2] != cfg_.resolution || s[3] != cfg_.resolution)
    throw std::invalid_argument("damsm image encoder expects resolution " +
                                std::to_string(cfg_.resolution));
  index_t n = s[0];
  Var h = images;
  for (const auto& conv : downs_) h = leaky_relu(conv(h), kLeakSlope);
  RegionFeatures out;
  Var r = region_head_(h);  // [n, D, 8, 8]
  out.regions = reshape(r, {n, cfg_.feature_dim, 64});
  out.global = global_head_(global_avg_pool(h));
  return out;
}

namespace {

// columns of m [d, k] scaled to unit norm
Var normalize_cols(const Var& m) {
  Var norms = sqrt(add_scalar(col_sums(square(m)), kNormEps));  // [k]
  index_t d = m.value().dim(0), k = m.value().dim(1);
  Var inv = div(constant(Tensor::full({k}, 1.0)), norms);
  // scale column j by inv[j]: transpose trick via mul_colvec on the transpose
  return transpose(mul_colvec(transpose(m), inv));
}

Var rows_cosine(const Var& a, const Var& b) {  // [m,d] x [m,d] -> [m]
  Var dots = row_sums(mul(a, b));
  Var na = sqrt(add_scalar(row_sums(square(a)), kNormEps));
  Var nb = sqrt(add_scalar(row_sums(square(b)), kNormEps));
  return div(dots, mul(na, nb));
}

}  // namespace

Var matching_score(const Var& regions, const Var& words, Scalar gamma1, Scalar gamma2) {
  if (regions.value().dim(0) != words.value().dim(0))
    throw std::invalid_argument("matching_score: feature dim mismatch");
  Var v = normalize_cols(regions);  // [D, R]
  Var e = normalize_cols(words);    // [D, T]
  Var sim = matmul(transpose(e), v);  // [T, R]
  // normalize over words for each region, then attend over regions per word
  Var sim_words = transpose(softmax_rows(transpose(sim)));
  Var alpha = softmax_rows(mul_scalar(sim_words, gamma1));  // [T, R]
  Var context = matmul(alpha, transpose(v));                // [T, D]
  Var relevance = rows_cosine(context, transpose(e));       // [T]
  // smooth maximum over words
  Var lse = log(sum_all(exp(mul_scalar(relevance, gamma2))));
  return mul_scalar(lse, 1.0 / gamma2);
}

Var sentence_score(const Var& global_feature, const Var& sentence_embedding) {
  Var a = reshape(global_feature, {1, global_feature.value().size()});
  Var b = reshape(sentence_embedding, {1, sentence_embedding.value().size()});
  return rows_cosine(a, b);
}

DamsmLossParts damsm_loss(const DamsmBatch& batch, const DamsmConfig& cfg) {
  index_t n = batch.images.global.value().dim(0);
  if (n < 2) throw std::invalid_argument("contrastive loss undefined");
  index_t D = cfg.feature_dim;
  index_t T = batch.texts.word_features.value().dim(2);
  index_t R = batch.images.regions.value().dim(2);

  // normalize every region column once: [n, D, R]
  Var sq_sums = reshape(bmm(constant(Tensor::full({n, 1, D}, 1.0)),
                            square(batch.images.regions)),
                        {n, R});
  Var inv_norms = div(constant(Tensor::full({n, R}, 1.0)),
                      sqrt(add_scalar(sq_sums, kNormEps)));
  Var regions_unit = scale_lastdim(batch.images.regions, inv_norms);

  // word-level scores, one batched pass per text against every image
  std::vector<Var> word_rows;
  for (index_t i = 0; i < n; ++i) {
    index_t len = batch.texts.lengths[static_cast<size_t>(i)];
    Var words_i = slice_cols(reshape(select0(batch.texts.word_features, i), {D, T}), 0, len);
    Var e = normalize_cols(words_i);            // [D, len]
    Var eT = transpose(e);                      // [len, D]
    Var sim = proj3(eT, regions_unit);          // [n, len, R]
    // normalize over words for each region, then attend over regions
    std::vector<index_t> all_len(static_cast<size_t>(n), len);
    std::vector<index_t> all_r(static_cast<size_t>(n), R);
    Var sim_words = transpose12(
        softmax_lastdim_masked(transpose12(sim), all_len));   // [n, len, R]
    Var alpha = softmax_lastdim_masked(mul_scalar(sim_words, cfg.gamma1), all_r);
    Var context = bmm(alpha, regions_unit, false, true);      // [n, len, D]
    Var flat = reshape(context, {n * len, D});
    Var e_rep = reshape(expand0(eT, n), {n * len, D});
    Var dots = row_sums(mul(flat, e_rep));
    Var ctx_norm = sqrt(add_scalar(row_sums(square(flat)), kNormEps));
    Var e_norm = sqrt(add_scalar(row_sums(square(e_rep)), kNormEps));
    Var relevance = reshape(div(dots, mul(ctx_norm, e_norm)), {n, len});
    Var lse = log(row_sums(exp(mul_scalar(relevance, cfg.gamma2))));  // [n]
    word_rows.push_back(reshape(mul_scalar(lse, 1.0 / cfg.gamma2), {1, n}));
  }
  Var word_scores = word_rows[0];
  for (index_t i = 1; i < n; ++i)
    word_scores = concat_rows(word_scores, word_rows[static_cast<size_t>(i)]);

  // sentence-level scores: row-normalized dot products
  auto normalize_rows = [&](const Var& m) {
    Var inv = div(constant(Tensor::full({n}, 1.0)),
                  sqrt(add_scalar(row_sums(square(m)), kNormEps)));
    return mul_colvec(m, inv);
  };
  Var sent_scores = matmul(normalize_rows(batch.texts.sentence_embedding),
                           transpose(normalize_rows(batch.images.global)));

  std::vector<index_t> diag(static_cast<size_t>(n));
  for (index_t i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i;
  auto contrastive = [&](const Var& scores) {  // -mean diag log softmax rows
    Var logp = log_softmax_rows(scores);
    return neg(mean_all(pick(logp, diag)));
  };

  Var ws = mul_scalar(word_scores, cfg.gamma3);
  Var ss = mul_scalar(sent_scores, cfg.gamma3);
  Var w_t2i = contrastive(ws);              // match image given text
  Var w_i2t = contrastive(transpose(ws));   // match text given image
  Var s_t2i = contrastive(ss);
  Var s_i2t = contrastive(transpose(ss));

  DamsmLossParts parts;
  parts.total = add(add(w_t2i, w_i2t), add(s_t2i, s_i2t));
  parts.word_text_to_image = w_t2i.item();
  parts.word_image_to_text = w_i2t.item();
  parts.sent_text_to_image = s_t2i.item();
  parts.sent_image_to_text = s_i2t.item();
  return parts;
}

}  // namespace vqat2i::models
