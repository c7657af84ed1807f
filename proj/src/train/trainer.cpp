#include "vqat2i/train/trainer.hpp"

#include "vqat2i/eval/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <cmath>
#include <fstream>
#include <iostream>

namespace vqat2i::train {

using namespace ag;
using nlohmann::json;

namespace {

struct PaddedText {
  std::vector<index_t> ids;  // [n, max_len]
  std::vector<index_t> lengths;
  index_t n = 0, max_len = 0;
};

PaddedText pad_sequences(const std::vector<const std::vector<index_t>*>& seqs) {
  PaddedText out;
  out.n = static_cast<index_t>(seqs.size());
  for (const auto* s : seqs)
    out.max_len = std::max(out.max_len, static_cast<index_t>(s->size()));
  out.max_len = std::max<index_t>(out.max_len, 1);
  out.ids.assign(static_cast<size_t>(out.n * out.max_len), data::Vocabulary::kPadId);
  for (index_t i = 0; i < out.n; ++i) {
    const auto& s = *seqs[static_cast<size_t>(i)];
    std::copy(s.begin(), s.end(), out.ids.begin() + i * out.max_len);
    out.lengths.push_back(std::max<index_t>(1, static_cast<index_t>(s.size())));
  }
  return out;
}

Tensor fit_resolution(const Tensor& images, index_t res) {
  if (images.dim(2) == res) return images;
  if (images.dim(2) < res)
    throw std::runtime_error("dataset images are smaller than the model resolution");
  return downscale_to(images, res);
}

Tensor gather_images(const Tensor& images, const std::vector<index_t>& rows) {
  index_t per = images.size() / images.dim(0);
  Tensor out({static_cast<index_t>(rows.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + static_cast<index_t>(i) * per, images.data() + rows[i] * per,
                sizeof(Scalar) * static_cast<size_t>(per));
  return out;
}

Tensor sample_noise(index_t n, index_t dim, std::uint64_t seed) {
  Tensor z({n, dim});
  Rng rng(seed);
  rng.fill_normal(z);
  return z;
}

void require_finite(Scalar v, const std::string& what, const std::function<void()>& preserve) {
  if (!std::isfinite(v)) {
    preserve();
    throw TrainingDiverged(what + " became non-finite; state preserved");
  }
}

json base_meta(const io::TrainConfig& cfg, const data::Dataset& ds) {
  return json{{"config_hash", cfg.hash()},
              {"vocab_hash", ds.vocab.hash()},
              {"preset", cfg.preset},
              {"seed", cfg.seed}};
}

void check_vocab_hash(const json& meta, const data::Dataset& ds, const std::string& what) {
  if (meta.at("vocab_hash").get<std::uint64_t>() != ds.vocab.hash())
    throw std::runtime_error(what + ": vocabulary hash mismatch with the dataset (rebuild the "
                                    "checkpoint or regenerate the data)");
}

}  // namespace

ModelBundle build_models(const io::TrainConfig& cfg, const data::Dataset& train_split,
                         bool with_vqa) {
  ModelBundle m;
  m.text_cfg.vocab_size = train_split.vocab.size();
  m.text_cfg.embedding_dim = cfg.embedding_dim;
  m.text_cfg.hidden_dim = cfg.hidden_dim;
  m.text_cfg.dropout_rate = cfg.dropout;
  m.text_cfg.cell = nn::recurrent_cell_from_string(cfg.rnn_cell);
  {
    Rng rng(Rng::derive(cfg.seed, "init_text_encoder"));
    m.text_encoder = std::make_unique<models::TextEncoder>(m.text_cfg, rng);
  }
  {
    models::DamsmConfig dc;
    dc.resolution = cfg.final_resolution();
    dc.base_channels = cfg.damsm_channels;
    dc.feature_dim = cfg.text_feature_dim();
    dc.gamma1 = cfg.gamma1;
    dc.gamma2 = cfg.gamma2;
    dc.gamma3 = cfg.gamma3;
    Rng rng(Rng::derive(cfg.seed, "init_damsm_image"));
    m.damsm_image = std::make_unique<models::DamsmImageEncoder>(dc, rng);
  }
  {
    models::GeneratorConfig gc;
    gc.noise_dim = cfg.noise_dim;
    gc.condition_dim = cfg.condition_dim;
    gc.base_channels = cfg.base_channels;
    gc.stage_count = cfg.stage_count;
    gc.base_resolution = cfg.base_resolution;
    gc.text_feature_dim = cfg.text_feature_dim();
    Rng rng(Rng::derive(cfg.seed, "init_generator"));
    m.generator = std::make_unique<models::Generator>(gc, rng);
  }
  for (index_t s = 0; s < cfg.stage_count; ++s) {
    models::DiscriminatorConfig dc;
    dc.resolution = cfg.base_resolution << s;
    dc.base_channels = cfg.disc_channels;
    dc.text_feature_dim = cfg.text_feature_dim();
    dc.condition_channels = cfg.disc_condition_channels;
    Rng rng(Rng::derive(cfg.seed, "init_discriminator", static_cast<std::uint64_t>(s)));
    m.discriminators.push_back(std::make_unique<models::StageDiscriminator>(dc, rng));
  }
  if (with_vqa) {
    m.answers = models::AnswerVocabulary::build(train_split.qas, cfg.answer_top_n);
    models::VqaConfig vc;
    vc.vocab_size = train_split.vocab.size();
    vc.answer_count = std::max<index_t>(1, m.answers.size());
    vc.resolution = cfg.final_resolution();
    vc.channels = cfg.vqa_channels;
    vc.question_embed = 32;
    vc.question_hidden = 2 * cfg.vqa_channels;
    vc.attention_hidden = cfg.vqa_attention_hidden;
    vc.glimpses = cfg.vqa_glimpses;
    vc.scene_classes =
        train_split.has_scenes ? data::scene_class_count(train_split.scene_spec) : 0;
    vc.cell = nn::recurrent_cell_from_string(cfg.rnn_cell);
    Rng rng(Rng::derive(cfg.seed, "init_vqa"));
    m.vqa = std::make_unique<models::VqaModel>(vc, rng);
  }
  return m;
}

// ---------------------------------------------------------------- pretraining

PretrainDamsmResult pretrain_damsm(const io::TrainConfig& cfg) {
  Paths paths{cfg.out_dir};
  std::filesystem::create_directories(paths.out);
  data::Dataset train = data::load_dataset(cfg.data_dir, "train", cfg.min_frequency,
                                           cfg.max_text_length);
  data::Dataset heldout = data::load_dataset(cfg.data_dir, "test", cfg.min_frequency,
                                             cfg.max_text_length);
  ModelBundle m = build_models(cfg, train, false);
  models::DamsmConfig dcfg = m.damsm_image->config();

  struct Pair {
    index_t image_row;
    const std::vector<index_t>* tokens;
  };
  auto collect = [&](const data::Dataset& ds) {
    std::vector<Pair> pairs;
    for (const auto& c : ds.captions) pairs.push_back({ds.image_row.at(c.image_id), &c.token_ids});
    if (cfg.pretrain_with_qa)
      for (const auto& q : ds.qas) pairs.push_back({ds.image_row.at(q.image_id), &q.qa_token_ids});
    return pairs;
  };
  std::vector<Pair> train_pairs = collect(train);
  std::vector<Pair> heldout_pairs = collect(heldout);

  auto batch_loss = [&](const data::Dataset& ds, const std::vector<Pair>& pairs,
                        const std::vector<index_t>& take) {
    std::vector<const std::vector<index_t>*> seqs;
    std::vector<index_t> rows;
    for (index_t i : take) {
      seqs.push_back(pairs[static_cast<size_t>(i)].tokens);
      rows.push_back(pairs[static_cast<size_t>(i)].image_row);
    }
    PaddedText text = pad_sequences(seqs);
    models::DamsmBatch batch;
    batch.texts = m.text_encoder->encode_ids(text.ids, text.n, text.max_len, text.lengths);
    batch.images = m.damsm_image->encode(
        Var(fit_resolution(gather_images(ds.images, rows), dcfg.resolution), false));
    return models::damsm_loss(batch, dcfg).total;
  };

  auto heldout_loss = [&]() {
    NoGrad ng;
    Scalar total = 0;
    index_t batches = 0;
    index_t n = static_cast<index_t>(heldout_pairs.size());
    for (index_t start = 0; start + 2 <= n && batches < 8; start += cfg.batch_size) {
      index_t take_n = std::min(cfg.batch_size, n - start);
      if (take_n < 2) break;
      std::vector<index_t> take;
      for (index_t i = start; i < start + take_n; ++i) take.push_back(i);
      total += batch_loss(heldout, heldout_pairs, take).item();
      ++batches;
    }
    return total / std::max<index_t>(1, batches);
  };

  std::vector<Var> trained = m.text_encoder->params().params();
  for (auto& p : m.damsm_image->params().params()) trained.push_back(p);
  nn::Adam opt(trained, cfg.lr_g, cfg.beta1, cfg.beta2);

  PretrainDamsmResult result;
  result.heldout_curve.push_back(heldout_loss());

  // snapshots let a divergent epoch fall back to the last finite state
  auto snapshot = [&]() {
    std::vector<Tensor> s;
    for (auto& p : trained) s.push_back(p.value().clone());
    return s;
  };
  auto restore = [&](const std::vector<Tensor>& s) {
    for (size_t i = 0; i < trained.size(); ++i)
      std::memcpy(trained[i].value().data(), s[i].data(),
                  sizeof(Scalar) * static_cast<size_t>(s[i].size()));
  };
  std::vector<Tensor> last_good = snapshot();

  index_t n = static_cast<index_t>(train_pairs.size());
  Rng dropout_rng(Rng::derive(cfg.seed, "damsm_dropout"));
  for (index_t epoch = 0; epoch < cfg.damsm_epochs; ++epoch) {
    Rng perm_rng(Rng::derive(cfg.seed, "damsm_perm", static_cast<std::uint64_t>(epoch)));
    auto order = perm_rng.permutation(n);
    Scalar epoch_loss = 0;
    index_t steps = 0;
    for (index_t start = 0; start + 2 <= n; start += cfg.batch_size) {
      index_t take_n = std::min(cfg.batch_size, n - start);
      if (take_n < 2) break;
      std::vector<index_t> take(order.begin() + start, order.begin() + start + take_n);
      m.text_encoder->params().zero_grad();
      m.damsm_image->params().zero_grad();
      Var loss = batch_loss(train, train_pairs, take);
      Scalar v = loss.item();
      require_finite(v, "matching pretraining loss", [&] { restore(last_good); });
      backward(loss);
      opt.step();
      epoch_loss += v;
      ++steps;
    }
    result.train_curve.push_back(epoch_loss / std::max<index_t>(1, steps));
    result.heldout_curve.push_back(heldout_loss());
    last_good = snapshot();
  }

  CheckpointData data;
  data.components = {{"text_encoder", &m.text_encoder->params()},
                     {"damsm_image", &m.damsm_image->params()}};
  json meta = base_meta(cfg, train);
  meta["kind"] = "damsm";
  meta["heldout_initial"] = result.heldout_curve.front();
  meta["heldout_final"] = result.heldout_curve.back();
  save_checkpoint(paths.damsm_checkpoint(), data, meta);
  result.checkpoint = paths.damsm_checkpoint();
  return result;
}

PretrainVqaResult pretrain_vqa(const io::TrainConfig& cfg) {
  Paths paths{cfg.out_dir};
  std::filesystem::create_directories(paths.out);
  data::Dataset train = data::load_dataset(cfg.data_dir, "train", cfg.min_frequency,
                                           cfg.max_text_length);
  data::Dataset heldout = data::load_dataset(cfg.data_dir, "test", cfg.min_frequency,
                                             cfg.max_text_length);
  ModelBundle m = build_models(cfg, train, true);
  if (m.answers.size() < 2) throw std::runtime_error("answer vocabulary is degenerate");

  auto answer_ids = [&](const data::QARecord& rec) {
    std::vector<index_t> ids;
    for (const auto& a : rec.answers) ids.push_back(m.answers.id_of(a));
    return ids;
  };

  bool with_scenes = train.has_scenes;
  auto forward_batch = [&](const data::Dataset& ds, const std::vector<index_t>& take) {
    std::vector<const std::vector<index_t>*> seqs;
    std::vector<index_t> rows;
    for (index_t i : take) {
      seqs.push_back(&ds.qas[static_cast<size_t>(i)].question_token_ids);
      rows.push_back(ds.image_row.at(ds.qas[static_cast<size_t>(i)].image_id));
    }
    PaddedText text = pad_sequences(seqs);
    Var images(fit_resolution(gather_images(ds.images, rows), m.vqa->config().resolution),
               false);
    auto fwd = m.vqa->answer_probs(images, text.ids, text.n, text.max_len, text.lengths);
    return std::make_tuple(std::move(fwd), std::move(images), std::move(rows));
  };

  auto heldout_metrics = [&]() {
    NoGrad ng;
    std::vector<std::string> preds;
    std::vector<data::QARecord> recs;
    Scalar loss_sum = 0;
    index_t loss_batches = 0;
    index_t n = static_cast<index_t>(heldout.qas.size());
    for (index_t start = 0; start < n; start += cfg.batch_size) {
      index_t take_n = std::min(cfg.batch_size, n - start);
      std::vector<index_t> take;
      for (index_t i = start; i < start + take_n; ++i) take.push_back(i);
      auto [fwd, images, rows] = forward_batch(heldout, take);
      std::vector<std::vector<index_t>> ids;
      for (index_t i : take) ids.push_back(answer_ids(heldout.qas[static_cast<size_t>(i)]));
      loss_sum += models::vqa_loss_batch(fwd.answer_log_probs, ids).loss.item();
      ++loss_batches;
      for (index_t i = 0; i < take_n; ++i) {
        index_t best = 0;
        for (index_t a = 1; a < m.answers.size(); ++a)
          if (fwd.answer_logits.value().at(i, a) > fwd.answer_logits.value().at(i, best))
            best = a;
        preds.push_back(m.answers.answer_of(best));
        recs.push_back(heldout.qas[static_cast<size_t>(take[static_cast<size_t>(i)])]);
      }
    }
    return std::make_pair(models::vqa_accuracy(preds, recs).consensus,
                          loss_sum / std::max<index_t>(1, loss_batches));
  };

  nn::Adam opt(m.vqa->params().params(), cfg.lr_g, cfg.beta1, cfg.beta2);
  PretrainVqaResult result;
  result.chance = 1.0 / static_cast<Scalar>(m.answers.size());
  result.heldout_loss.push_back(heldout_metrics().second);

  auto snapshot = [&]() {
    std::vector<Tensor> s;
    for (auto& p : m.vqa->params().params()) s.push_back(p.value().clone());
    return s;
  };
  std::vector<Tensor> last_good = snapshot();

  index_t n = static_cast<index_t>(train.qas.size());
  for (index_t epoch = 0; epoch < cfg.vqa_epochs; ++epoch) {
    Rng perm_rng(Rng::derive(cfg.seed, "vqa_perm", static_cast<std::uint64_t>(epoch)));
    auto order = perm_rng.permutation(n);
    for (index_t start = 0; start < n; start += cfg.batch_size) {
      index_t take_n = std::min(cfg.batch_size, n - start);
      std::vector<index_t> take(order.begin() + start, order.begin() + start + take_n);
      m.vqa->params().zero_grad();
      auto [fwd, images, rows] = forward_batch(train, take);
      std::vector<std::vector<index_t>> ids;
      for (index_t i : take) ids.push_back(answer_ids(train.qas[static_cast<size_t>(i)]));
      auto batch_loss = models::vqa_loss_batch(fwd.answer_log_probs, ids);
      Var loss = batch_loss.loss;
      if (with_scenes) {
        std::vector<index_t> classes;
        for (index_t row : rows)
          classes.push_back(data::scene_class(train.scene_spec, train.scene_of(row)));
        Var scene_lp = log_softmax_rows(m.vqa->scene_logits(Var(
            fit_resolution(gather_images(train.images, rows), m.vqa->config().resolution),
            false)));
        loss = add(loss, neg(mean_all(pick(scene_lp, classes))));
      }
      Scalar v = loss.item();
      require_finite(v, "vqa pretraining loss", [&] {
        for (size_t i = 0; i < last_good.size(); ++i)
          std::memcpy(m.vqa->params().params()[i].value().data(), last_good[i].data(),
                      sizeof(Scalar) * static_cast<size_t>(last_good[i].size()));
      });
      backward(loss);
      opt.step();
    }
    auto [acc, loss] = heldout_metrics();
    result.heldout_accuracy.push_back(acc);
    result.heldout_loss.push_back(loss);
    last_good = snapshot();
  }
  result.final_accuracy =
      result.heldout_accuracy.empty() ? heldout_metrics().first
                                      : result.heldout_accuracy.back();

  CheckpointData data;
  data.components = {{"vqa", &m.vqa->params()}};
  json meta = base_meta(cfg, train);
  meta["kind"] = "vqa";
  meta["answers"] = m.answers.answers();
  meta["answer_hash"] = m.answers.hash();
  meta["scene_classes"] = m.vqa->config().scene_classes;
  meta["heldout_accuracy"] = result.final_accuracy;
  save_checkpoint(paths.vqa_checkpoint(), data, meta);
  result.checkpoint = paths.vqa_checkpoint();
  return result;
}

// ------------------------------------------------------------------- training

namespace {

struct QuickScorer {
  std::unique_ptr<models::VqaModel> model;
  models::AnswerVocabulary answers;
};

QuickScorer load_scorer(const io::TrainConfig& cfg, const data::Dataset& train,
                        const Paths& paths) {
  if (!std::filesystem::exists(paths.vqa_checkpoint()))
    throw MissingPretraining("missing VQA checkpoint " + paths.vqa_checkpoint().string() +
                             "; run `pretrain-vqa` first");
  QuickScorer scorer;
  json meta = peek_checkpoint(paths.vqa_checkpoint());
  scorer.answers =
      models::AnswerVocabulary::from_answers(meta.at("answers").get<std::vector<std::string>>());
  models::VqaConfig vc;
  vc.vocab_size = train.vocab.size();
  vc.answer_count = scorer.answers.size();
  vc.resolution = cfg.final_resolution();
  vc.channels = cfg.vqa_channels;
  vc.question_embed = 32;
  vc.question_hidden = 2 * cfg.vqa_channels;
  vc.attention_hidden = cfg.vqa_attention_hidden;
  vc.glimpses = cfg.vqa_glimpses;
  vc.scene_classes = meta.at("scene_classes").get<index_t>();
  vc.cell = nn::recurrent_cell_from_string(cfg.rnn_cell);
  Rng rng(Rng::derive(cfg.seed, "init_vqa_scorer"));
  scorer.model = std::make_unique<models::VqaModel>(vc, rng);
  CheckpointData data;
  data.components = {{"vqa", &scorer.model->params()}};
  json loaded = load_checkpoint(paths.vqa_checkpoint(), data);
  check_vocab_hash(loaded, train, "vqa checkpoint");
  scorer.model->params().set_trainable(false);
  return scorer;
}

// quick in-training score: generate from train captions, classify with the
// frozen scorer head
Scalar quick_inception_score(const io::TrainConfig& cfg, const data::Dataset& ds,
                             ModelBundle& m, QuickScorer& scorer, index_t epoch) {
  NoGrad ng;
  index_t want = std::min<index_t>(cfg.eval_samples_train,
                                   static_cast<index_t>(ds.captions.size()));
  if (want < cfg.is_splits) want = cfg.is_splits;
  Rng pick_rng(Rng::derive(cfg.seed, "quick_eval_pick", static_cast<std::uint64_t>(epoch)));
  data::BatchStream stream(ds, std::min<index_t>(cfg.batch_size, want), cfg.seed, 0.0);

  Tensor probs({want, scorer.model->config().scene_classes});
  index_t row = 0;
  index_t batch_index = 0;
  while (row < want) {
    index_t take = std::min<index_t>(cfg.batch_size, want - row);
    std::vector<index_t> recs;
    for (index_t i = 0; i < take; ++i)
      recs.push_back(pick_rng.uniform_int(static_cast<index_t>(ds.captions.size())));
    data::TextBatch batch = stream.caption_batch(recs);
    auto enc = m.text_encoder->encode(batch);
    Tensor eps({take, cfg.condition_dim});
    Rng(Rng::derive(cfg.seed, "quick_eval_eps", static_cast<std::uint64_t>(epoch),
                    static_cast<std::uint64_t>(batch_index)))
        .fill_normal(eps);
    auto lat = m.generator->condition_augment(enc.sentence_embedding, eps);
    Var z(sample_noise(take, cfg.noise_dim,
                       Rng::derive(cfg.seed, "quick_eval_noise",
                                   static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(batch_index))),
          false);
    auto pyr = m.generator->generate(z, lat.sample, enc.word_features, enc.lengths);
    Var sm = softmax_rows(scorer.model->scene_logits(pyr.images.back()));
    std::memcpy(probs.data() + row * probs.dim(1), sm.value().data(),
                sizeof(Scalar) * static_cast<size_t>(sm.value().size()));
    row += take;
    ++batch_index;
  }
  auto [mean, stddev] = eval::inception_score(probs, std::min(cfg.is_splits, want));
  return mean;
}

}  // namespace

TrainResult train(const io::TrainConfig& cfg, std::optional<fs::path> resume_from) {
  Paths paths{cfg.out_dir};
  VariantSpec variant = VariantSpec::parse(cfg.variant);
  data::Dataset ds = data::load_dataset(cfg.data_dir, "train", cfg.min_frequency,
                                        cfg.max_text_length);

  bool need_qa_pipeline = variant.vqa_loss_enabled || variant.discriminator_sees_qa;
  ModelBundle m = build_models(cfg, ds, variant.vqa_loss_enabled);

  // pretrained matching checkpoint is always required (frozen text encoder)
  if (!std::filesystem::exists(paths.damsm_checkpoint()))
    throw MissingPretraining("missing DAMSM checkpoint " + paths.damsm_checkpoint().string() +
                             "; run `pretrain-damsm` first");
  {
    CheckpointData data;
    data.components = {{"text_encoder", &m.text_encoder->params()},
                       {"damsm_image", &m.damsm_image->params()}};
    json meta = load_checkpoint(paths.damsm_checkpoint(), data);
    check_vocab_hash(meta, ds, "damsm checkpoint");
  }
  m.text_encoder->params().set_trainable(false);
  m.damsm_image->params().set_trainable(false);

  // pipeline VQA: pretrained weights unless the variant trains it end to end
  if (variant.vqa_loss_enabled && !variant.vqa_model_trainable) {
    if (!std::filesystem::exists(paths.vqa_checkpoint()))
      throw MissingPretraining("missing VQA checkpoint " + paths.vqa_checkpoint().string() +
                               "; run `pretrain-vqa` first");
    CheckpointData data;
    data.components = {{"vqa", &m.vqa->params()}};
    json meta = load_checkpoint(paths.vqa_checkpoint(), data);
    check_vocab_hash(meta, ds, "vqa checkpoint");
    auto stored = models::AnswerVocabulary::from_answers(
        meta.at("answers").get<std::vector<std::string>>());
    if (stored.hash() != m.answers.hash())
      throw std::runtime_error("answer vocabulary mismatch between checkpoint and dataset");
    m.vqa->params().set_trainable(false);
  }

  // frozen scorer for checkpoint selection (any variant)
  std::optional<QuickScorer> scorer;
  if (cfg.eval_every > 0) scorer = load_scorer(cfg, ds, paths);

  fs::path run_dir = paths.run_dir(variant.to_string());
  std::filesystem::create_directories(run_dir);

  nn::Adam opt_g(m.generator->params().params(), cfg.lr_g, cfg.beta1, cfg.beta2);
  std::vector<nn::Adam> opt_d;
  for (auto& d : m.discriminators)
    opt_d.emplace_back(d->params().params(), cfg.lr_d, cfg.beta1, cfg.beta2);
  std::optional<nn::Adam> opt_vqa;
  if (variant.vqa_loss_enabled && variant.vqa_model_trainable)
    opt_vqa.emplace(m.vqa->params().params(), cfg.lr_g, cfg.beta1, cfg.beta2);

  auto checkpoint_data = [&]() {
    CheckpointData data;
    data.components = {{"text_encoder", &m.text_encoder->params()},
                       {"damsm_image", &m.damsm_image->params()},
                       {"generator", &m.generator->params()}};
    for (size_t s = 0; s < m.discriminators.size(); ++s)
      data.components.emplace_back("discriminator" + std::to_string(s),
                                   &m.discriminators[s]->params());
    if (m.vqa) data.components.emplace_back("vqa", &m.vqa->params());
    return data;
  };

  // optimizer state lives beside the parameters for exact resume
  std::vector<std::vector<Scalar>> extra_blobs;
  auto fill_extras = [&](CheckpointData& data) {
    extra_blobs.clear();
    extra_blobs.push_back(opt_g.state());
    for (auto& o : opt_d) extra_blobs.push_back(o.state());
    if (opt_vqa) extra_blobs.push_back(opt_vqa->state());
    data.extras.clear();
    data.extras.emplace_back("adam_g", &extra_blobs[0]);
    for (size_t s = 0; s < opt_d.size(); ++s)
      data.extras.emplace_back("adam_d" + std::to_string(s), &extra_blobs[1 + s]);
    if (opt_vqa) data.extras.emplace_back("adam_vqa", &extra_blobs.back());
  };

  index_t start_epoch = 0;
  if (resume_from) {
    CheckpointData data = checkpoint_data();
    std::vector<std::vector<Scalar>> blobs(1 + opt_d.size() + (opt_vqa ? 1 : 0));
    data.extras.emplace_back("adam_g", &blobs[0]);
    for (size_t s = 0; s < opt_d.size(); ++s)
      data.extras.emplace_back("adam_d" + std::to_string(s), &blobs[1 + s]);
    if (opt_vqa) data.extras.emplace_back("adam_vqa", &blobs.back());
    json meta = load_checkpoint(*resume_from, data);
    check_vocab_hash(meta, ds, "resume checkpoint");
    if (meta.at("config_hash").get<std::uint64_t>() != cfg.hash())
      throw std::runtime_error("resume checkpoint was produced by a different configuration");
    opt_g.load_state(blobs[0]);
    for (size_t s = 0; s < opt_d.size(); ++s) opt_d[s].load_state(blobs[1 + s]);
    if (opt_vqa) opt_vqa->load_state(blobs.back());
    start_epoch = meta.at("epochs_completed").get<index_t>();
  }

  TrainResult result;
  result.metrics_log = run_dir / "metrics.jsonl";
  result.series_file = run_dir / "checkpoints.jsonl";
  result.vqa_digest_before = m.vqa ? m.vqa->params().digest() : 0;

  std::ofstream metrics(result.metrics_log,
                        resume_from ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + result.metrics_log.string());
  if (!resume_from) std::ofstream(result.series_file, std::ios::trunc);

  data::BatchStream stream(ds, cfg.batch_size, cfg.seed,
                           need_qa_pipeline ? cfg.qa_ratio : 0.0);

  auto preserve_state = [&]() {
    CheckpointData data = checkpoint_data();
    fill_extras(data);
    json meta = base_meta(cfg, ds);
    meta["kind"] = "gan_abort";
    meta["variant"] = variant.to_string();
    meta["epochs_completed"] = -1;
    if (m.vqa) meta["answer_hash"] = m.answers.hash();
    save_checkpoint(run_dir / "abort.ckpt", data, meta);
  };

  index_t global_step = start_epoch * stream.steps_per_epoch();
  for (index_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    stream.start_epoch(epoch);
    data::BatchStep step;
    index_t step_in_epoch = 0;
    while (stream.next(step)) {
      if (step.captions.n < 2) {  // contrastive terms need at least two
        ++step_in_epoch;
        continue;
      }
      auto enc_cap = m.text_encoder->encode(step.captions);
      std::optional<models::TextEncoding> enc_qa;
      if (need_qa_pipeline && step.qa.n >= 2) enc_qa = m.text_encoder->encode(step.qa);

      auto eps_for = [&](const char* label, index_t n) {
        Tensor eps({n, cfg.condition_dim});
        Rng(Rng::derive(cfg.seed, label, static_cast<std::uint64_t>(epoch),
                        static_cast<std::uint64_t>(step_in_epoch)))
            .fill_normal(eps);
        return eps;
      };
      auto lat_cap = m.generator->condition_augment(enc_cap.sentence_embedding,
                                                    eps_for("ca_eps_cap", step.captions.n));
      Var z_cap(sample_noise(step.captions.n, cfg.noise_dim,
                             Rng::derive(cfg.seed, "noise_cap",
                                         static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(step_in_epoch))),
                false);
      auto pyr_cap = m.generator->generate(z_cap, lat_cap.sample, enc_cap.word_features,
                                           enc_cap.lengths);

      std::optional<models::ConditioningLatent> lat_qa;
      std::optional<models::ImagePyramid> pyr_qa;
      if (enc_qa) {
        lat_qa = m.generator->condition_augment(enc_qa->sentence_embedding,
                                                eps_for("ca_eps_qa", step.qa.n));
        Var z_qa(sample_noise(step.qa.n, cfg.noise_dim,
                              Rng::derive(cfg.seed, "noise_qa",
                                          static_cast<std::uint64_t>(epoch),
                                          static_cast<std::uint64_t>(step_in_epoch))),
                 false);
        pyr_qa = m.generator->generate(z_qa, lat_qa->sample, enc_qa->word_features,
                                       enc_qa->lengths);
      }

      // ---------------- discriminator updates ----------------
      LossReport d_report;
      Scalar d_acc_real = 0, d_acc_fake = 0;
      for (index_t dstep = 0; dstep < cfg.d_steps_per_g; ++dstep) {
        std::vector<DiscriminatorStageInputs> din;
        for (size_t s = 0; s < m.discriminators.size(); ++s) {
          index_t res = m.discriminators[s]->config().resolution;
          Var real(downscale_to(step.captions.images, res), false);
          DiscriminatorStageInputs in;
          auto real_out = m.discriminators[s]->discriminate(real, enc_cap.sentence_embedding);
          in.real = {real_out.uncond_logit, real_out.cond_logit};
          auto fake_out = m.discriminators[s]->discriminate(detach(pyr_cap.images[s]),
                                                            enc_cap.sentence_embedding);
          in.caption_fake = {fake_out.uncond_logit, fake_out.cond_logit};
          if (variant.discriminator_sees_qa && pyr_qa) {
            auto qa_out = m.discriminators[s]->discriminate(detach(pyr_qa->images[s]),
                                                            enc_qa->sentence_embedding);
            in.qa_fake = StageLogits{qa_out.uncond_logit, qa_out.cond_logit};
            if (s == 0) ++result.qa_discriminator_batches;
          }
          din.push_back(std::move(in));
        }
        auto [stage_losses, report] = discriminator_loss(din, variant);
        d_report = report;
        // real/fake classification rates on the unconditional heads
        index_t real_hits = 0, real_total = 0, fake_hits = 0, fake_total = 0;
        for (const auto& in : din) {
          for (index_t i = 0; i < in.real.uncond.value().size(); ++i, ++real_total)
            real_hits += in.real.uncond.value()[i] > 0 ? 1 : 0;
          for (index_t i = 0; i < in.caption_fake.uncond.value().size(); ++i, ++fake_total)
            fake_hits += in.caption_fake.uncond.value()[i] < 0 ? 1 : 0;
          if (in.qa_fake)
            for (index_t i = 0; i < in.qa_fake->uncond.value().size(); ++i, ++fake_total)
              fake_hits += in.qa_fake->uncond.value()[i] < 0 ? 1 : 0;
        }
        d_acc_real = static_cast<Scalar>(real_hits) / std::max<index_t>(1, real_total);
        d_acc_fake = static_cast<Scalar>(fake_hits) / std::max<index_t>(1, fake_total);
        require_finite(report.total_d, "discriminator loss", preserve_state);
        for (size_t s = 0; s < stage_losses.size(); ++s) backward(stage_losses[s]);
        for (size_t s = 0; s < opt_d.size(); ++s) {
          opt_d[s].step();
          m.discriminators[s]->params().zero_grad();
        }
      }

      // ---------------- generator update ----------------
      for (auto& d : m.discriminators) d->params().set_trainable(false);
      GeneratorLossInputs gin;
      for (size_t s = 0; s < m.discriminators.size(); ++s) {
        auto out = m.discriminators[s]->discriminate(pyr_cap.images[s],
                                                     enc_cap.sentence_embedding);
        gin.caption_fake.push_back({out.uncond_logit, out.cond_logit});
        if (variant.discriminator_sees_qa && pyr_qa) {
          auto qa_out = m.discriminators[s]->discriminate(pyr_qa->images[s],
                                                          enc_qa->sentence_embedding);
          gin.qa_fake.push_back({qa_out.uncond_logit, qa_out.cond_logit});
        }
      }
      {
        models::DamsmBatch dmb;
        dmb.images = m.damsm_image->encode(pyr_cap.images.back());
        dmb.texts = enc_cap;
        gin.damsm_caption = models::damsm_loss(dmb, m.damsm_image->config()).total;
      }
      if (variant.damsm_on_qa && pyr_qa) {
        models::DamsmBatch dmb;
        dmb.images = m.damsm_image->encode(pyr_qa->images.back());
        dmb.texts = *enc_qa;
        gin.damsm_qa = models::damsm_loss(dmb, m.damsm_image->config()).total;
      }
      if (variant.vqa_loss_enabled && pyr_qa) {
        std::vector<const std::vector<index_t>*> qseqs;
        std::vector<std::vector<index_t>> answer_ids;
        for (index_t r : step.qa.record_indices) {
          const auto& rec = ds.qas[static_cast<size_t>(r)];
          qseqs.push_back(&rec.question_token_ids);
          std::vector<index_t> ids;
          for (const auto& a : rec.answers) ids.push_back(m.answers.id_of(a));
          answer_ids.push_back(std::move(ids));
        }
        PaddedText qtext = pad_sequences(qseqs);
        auto fwd = m.vqa->answer_probs(pyr_qa->images.back(), qtext.ids, qtext.n,
                                       qtext.max_len, qtext.lengths);
        ++result.vqa_forward_calls;
        gin.vqa = models::vqa_loss_batch(fwd.answer_log_probs, answer_ids).loss;
      }
      {
        Var kl = lat_cap.kl;
        if (lat_qa) kl = add(kl, lat_qa->kl);
        gin.kl = kl;
      }
      LossWeights weights{cfg.lambda_damsm, cfg.lambda_vqa, cfg.kl_weight};
      auto [g_total, g_report] = generator_loss(gin, variant, weights);
      require_finite(g_report.total_g, "generator loss", preserve_state);
      backward(g_total);
      opt_g.step();
      m.generator->params().zero_grad();
      if (opt_vqa) {
        opt_vqa->step();
        m.vqa->params().zero_grad();
      }
      for (auto& d : m.discriminators) d->params().set_trainable(true);

      LossReport report = g_report;
      report.d_real_uncond = d_report.d_real_uncond;
      report.d_fake_uncond_caption = d_report.d_fake_uncond_caption;
      report.d_fake_uncond_qa = d_report.d_fake_uncond_qa;
      report.d_real_cond = d_report.d_real_cond;
      report.d_fake_cond_caption = d_report.d_fake_cond_caption;
      report.d_fake_cond_qa = d_report.d_fake_cond_qa;
      report.total_d = d_report.total_d;
      json line = json::parse(report.to_json_line());
      line["epoch"] = epoch;
      line["step"] = global_step;
      line["d_acc_real"] = d_acc_real;
      line["d_acc_fake"] = d_acc_fake;
      metrics << line.dump() << "\n";
      ++global_step;
      ++step_in_epoch;
    }
    metrics.flush();

    bool last_epoch = epoch + 1 == cfg.epochs;
    bool want_ckpt = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
    bool want_eval = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
    if (want_ckpt || want_eval || last_epoch) {
      Scalar is_mean = -1;
      if (scorer && (want_eval || last_epoch))
        is_mean = quick_inception_score(cfg, ds, m, *scorer, epoch);
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04lld.ckpt",
                    static_cast<long long>(epoch + 1));
      CheckpointData data = checkpoint_data();
      fill_extras(data);
      json meta = base_meta(cfg, ds);
      meta["kind"] = "gan";
      meta["variant"] = variant.to_string();
      meta["epochs_completed"] = epoch + 1;
      meta["step"] = global_step;
      meta["is_mean"] = is_mean;
      if (m.vqa) meta["answer_hash"] = m.answers.hash();
      save_checkpoint(run_dir / name, data, meta);

      CheckpointMeta cm;
      cm.epoch = epoch + 1;
      cm.step = global_step;
      cm.is_mean = is_mean;
      cm.config_hash = cfg.hash();
      cm.file = (run_dir / name).string();
      append_checkpoint_series(result.series_file, cm);
      result.checkpoints.push_back(cm);
    }
  }

  result.vqa_digest_after = m.vqa ? m.vqa->params().digest() : 0;
  bool any_scored = false;
  for (const auto& c : result.checkpoints) any_scored |= c.is_mean >= 0;
  result.best = any_scored ? select_best_checkpoint(result.checkpoints)
                           : result.checkpoints.back();
  result.best_checkpoint = result.best.file;
  std::error_code ec;
  fs::copy_file(result.best.file, run_dir / "best.ckpt",
                fs::copy_options::overwrite_existing, ec);
  return result;
}

}  // namespace vqat2i::train
