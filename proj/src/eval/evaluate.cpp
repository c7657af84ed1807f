#include "vqat2i/eval/evaluate.hpp"

#include "vqat2i/eval/metrics.hpp"
#include "vqat2i/io/image_io.hpp"

#include <json.hpp>

#include <fstream>
#include <iostream>
#include <map>

namespace vqat2i::eval {

using namespace ag;
using nlohmann::json;
using train::CheckpointData;
using train::MissingPretraining;

std::string EvalReport::to_json() const {
  json j{{"is_mean", is_mean},
         {"is_std", is_std},
         {"fid", fid},
         {"r_precision", r_precision},
         {"vqa_acc_consensus", vqa_acc_consensus},
         {"vqa_acc_top1_any", vqa_acc_top1_any},
         {"n_samples", n_samples},
         {"seed", seed},
         {"sampled_with_replacement", sampled_with_replacement},
         {"checkpoint", checkpoint},
         {"split", split}};
  return j.dump(2);
}

EvalReport EvalReport::from_json_text(const std::string& text) {
  json j = json::parse(text);
  EvalReport r;
  r.is_mean = j.at("is_mean").get<Scalar>();
  r.is_std = j.at("is_std").get<Scalar>();
  r.fid = j.at("fid").get<Scalar>();
  r.r_precision = j.at("r_precision").get<Scalar>();
  r.vqa_acc_consensus = j.at("vqa_acc_consensus").get<Scalar>();
  r.vqa_acc_top1_any = j.at("vqa_acc_top1_any").get<Scalar>();
  r.n_samples = j.at("n_samples").get<index_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.sampled_with_replacement = j.at("sampled_with_replacement").get<bool>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.split = j.at("split").get<std::string>();
  return r;
}

void EvalReport::save(const std::filesystem::path& file) const {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write report: " + file.string());
  out << to_json() << "\n";
}

EvalReport EvalReport::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read report: " + file.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

namespace {

struct LoadedPipeline {
  train::ModelBundle models;            // from the GAN checkpoint
  train::ModelBundle scorer;            // frozen pretrained VQA (+ answers)
  data::Dataset split_data;
  data::Dataset train_data;  // vocabulary source
};

LoadedPipeline load_pipeline(const io::TrainConfig& cfg,
                             const std::filesystem::path& gan_checkpoint,
                             const std::string& split) {
  LoadedPipeline p;
  p.train_data = data::load_dataset(cfg.data_dir, "train", cfg.min_frequency,
                                    cfg.max_text_length);
  p.split_data = data::load_dataset(cfg.data_dir, split, cfg.min_frequency,
                                    cfg.max_text_length);

  json meta = train::peek_checkpoint(gan_checkpoint);
  bool has_vqa = false;
  {
    // component list tells us whether the pipeline carried a vqa model
    std::ifstream in(gan_checkpoint, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hstr);
    for (const auto& c : header.at("components"))
      if (c.at("name").get<std::string>() == "vqa") has_vqa = true;
  }

  p.models = train::build_models(cfg, p.train_data, has_vqa);
  CheckpointData data;
  data.components = {{"text_encoder", &p.models.text_encoder->params()},
                     {"damsm_image", &p.models.damsm_image->params()},
                     {"generator", &p.models.generator->params()}};
  for (size_t s = 0; s < p.models.discriminators.size(); ++s)
    data.components.emplace_back("discriminator" + std::to_string(s),
                                 &p.models.discriminators[s]->params());
  if (has_vqa) data.components.emplace_back("vqa", &p.models.vqa->params());
  // optimizer blobs may be present; load ignores extras only if declared, so
  // declare matching placeholders
  std::vector<std::vector<Scalar>> blobs;
  {
    std::ifstream in(gan_checkpoint, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hstr);
    blobs.resize(header.at("extras").size());
    size_t i = 0;
    for (const auto& e : header.at("extras"))
      data.extras.emplace_back(e.at("name").get<std::string>(), &blobs[i++]);
  }
  json loaded = train::load_checkpoint(gan_checkpoint, data);
  if (loaded.at("vocab_hash").get<std::uint64_t>() != p.train_data.vocab.hash())
    throw std::runtime_error("evaluation vocabulary hash mismatch with checkpoint " +
                             gan_checkpoint.string());
  for (auto& [name, store] : data.components) store->set_trainable(false);

  // frozen scorer
  train::Paths paths{cfg.out_dir};
  if (!std::filesystem::exists(paths.vqa_checkpoint()))
    throw MissingPretraining("missing VQA checkpoint " + paths.vqa_checkpoint().string() +
                             "; run `pretrain-vqa` first");
  json smeta = train::peek_checkpoint(paths.vqa_checkpoint());
  p.scorer.answers = models::AnswerVocabulary::from_answers(
      smeta.at("answers").get<std::vector<std::string>>());
  models::VqaConfig vc;
  vc.vocab_size = p.train_data.vocab.size();
  vc.answer_count = p.scorer.answers.size();
  vc.resolution = cfg.final_resolution();
  vc.channels = cfg.vqa_channels;
  vc.question_embed = 32;
  vc.question_hidden = 2 * cfg.vqa_channels;
  vc.attention_hidden = cfg.vqa_attention_hidden;
  vc.glimpses = cfg.vqa_glimpses;
  vc.scene_classes = smeta.at("scene_classes").get<index_t>();
  vc.cell = nn::recurrent_cell_from_string(cfg.rnn_cell);
  Rng rng(Rng::derive(cfg.seed, "init_vqa_scorer"));
  p.scorer.vqa = std::make_unique<models::VqaModel>(vc, rng);
  CheckpointData sdata;
  sdata.components = {{"vqa", &p.scorer.vqa->params()}};
  json sloaded = train::load_checkpoint(paths.vqa_checkpoint(), sdata);
  if (sloaded.at("vocab_hash").get<std::uint64_t>() != p.train_data.vocab.hash())
    throw std::runtime_error("scorer vocabulary hash mismatch");
  p.scorer.vqa->params().set_trainable(false);
  return p;
}

// generate images for arbitrary token batches, in fixed-size chunks
Tensor generate_from_records(const io::TrainConfig& cfg, LoadedPipeline& p,
                             const std::vector<index_t>& record_rows, bool qa,
                             std::uint64_t seed) {
  NoGrad ng;
  index_t n = static_cast<index_t>(record_rows.size());
  index_t res = cfg.final_resolution();
  Tensor out({n, 3, res, res});
  data::BatchStream stream(p.split_data, std::min<index_t>(cfg.batch_size, n), cfg.seed, 0.0);
  index_t done = 0, chunk_index = 0;
  while (done < n) {
    index_t take = std::min<index_t>(cfg.batch_size, n - done);
    std::vector<index_t> recs(record_rows.begin() + done, record_rows.begin() + done + take);
    data::TextBatch batch = qa ? stream.qa_batch(recs) : stream.caption_batch(recs);
    auto enc = p.models.text_encoder->encode(batch);
    Tensor eps({take, cfg.condition_dim});
    Rng(Rng::derive(seed, "eval_eps", chunk_index)).fill_normal(eps);
    auto lat = p.models.generator->condition_augment(enc.sentence_embedding, eps);
    Tensor z({take, cfg.noise_dim});
    Rng(Rng::derive(seed, "eval_noise", chunk_index)).fill_normal(z);
    auto pyr = p.models.generator->generate(Var(z, false), lat.sample, enc.word_features,
                                            enc.lengths);
    const Tensor& img = pyr.images.back().value();
    // rows follow the batch's sorted order; map back to the requested order,
    // consuming one slot per occurrence (replacement sampling may repeat)
    std::map<index_t, std::vector<index_t>> slots;
    for (index_t k = take - 1; k >= 0; --k)
      slots[recs[static_cast<size_t>(k)]].push_back(k);
    for (index_t i = 0; i < take; ++i) {
      index_t rec = batch.record_indices[static_cast<size_t>(i)];
      index_t pos = slots.at(rec).back();
      slots.at(rec).pop_back();
      std::memcpy(out.data() + (done + pos) * 3 * res * res, img.data() + i * 3 * res * res,
                  sizeof(Scalar) * static_cast<size_t>(3 * res * res));
    }
    done += take;
    ++chunk_index;
  }
  return out;
}

}  // namespace

EvalReport evaluate_checkpoint(const io::TrainConfig& cfg,
                               const std::filesystem::path& gan_checkpoint,
                               const std::string& split, index_t n_samples,
                               std::uint64_t seed) {
  LoadedPipeline p = load_pipeline(cfg, gan_checkpoint, split);
  NoGrad ng;
  EvalReport report;
  report.checkpoint = gan_checkpoint.string();
  report.split = split;
  report.seed = seed;

  index_t caption_count = static_cast<index_t>(p.split_data.captions.size());
  if (caption_count == 0) throw std::runtime_error("split has no captions");
  report.n_samples = n_samples;
  report.sampled_with_replacement = n_samples > caption_count;

  // sampled caption records (with replacement only when needed)
  std::vector<index_t> caption_rows;
  Rng pick(Rng::derive(seed, "eval_captions"));
  if (report.sampled_with_replacement) {
    for (index_t i = 0; i < n_samples; ++i) caption_rows.push_back(pick.uniform_int(caption_count));
  } else {
    auto perm = pick.permutation(caption_count);
    caption_rows.assign(perm.begin(), perm.begin() + n_samples);
  }

  Tensor fake_images = generate_from_records(cfg, p, caption_rows, false, seed);

  // class posteriors and pooled features from the frozen scorer tower
  index_t C = p.scorer.vqa->config().scene_classes;
  if (C < 2)
    throw std::runtime_error("the pretrained VQA scorer carries no scene classifier head; "
                             "desk-scale scoring requires synthetic scene data");
  index_t F = p.scorer.vqa->config().feature_dim();
  Tensor class_probs({n_samples, C});
  Tensor fake_acts({n_samples, F});
  for (index_t start = 0; start < n_samples; start += cfg.batch_size) {
    index_t take = std::min<index_t>(cfg.batch_size, n_samples - start);
    Tensor chunk({take, 3, cfg.final_resolution(), cfg.final_resolution()});
    std::memcpy(chunk.data(), fake_images.data() + start * chunk.size() / take,
                sizeof(Scalar) * static_cast<size_t>(chunk.size()));
    Var imgs(chunk, false);
    Var sm = softmax_rows(p.scorer.vqa->scene_logits(imgs));
    Var feats = p.scorer.vqa->image_features(imgs);
    std::memcpy(class_probs.data() + start * C, sm.value().data(),
                sizeof(Scalar) * static_cast<size_t>(sm.value().size()));
    std::memcpy(fake_acts.data() + start * F, feats.value().data(),
                sizeof(Scalar) * static_cast<size_t>(feats.value().size()));
  }
  auto [is_mean, is_std] = inception_score(class_probs, std::min(cfg.is_splits, n_samples));
  report.is_mean = is_mean;
  report.is_std = is_std;

  // real activations over the whole split
  index_t n_real = static_cast<index_t>(p.split_data.image_ids.size());
  Tensor real_acts({n_real, F});
  for (index_t start = 0; start < n_real; start += cfg.batch_size) {
    index_t take = std::min<index_t>(cfg.batch_size, n_real - start);
    Tensor chunk({take, 3, p.split_data.resolution, p.split_data.resolution});
    std::memcpy(chunk.data(), p.split_data.images.data() + start * chunk.size() / take,
                sizeof(Scalar) * static_cast<size_t>(chunk.size()));
    if (chunk.dim(2) > cfg.final_resolution())
      chunk = downscale_to(chunk, cfg.final_resolution());
    Var feats = p.scorer.vqa->image_features(Var(chunk, false));
    std::memcpy(real_acts.data() + start * F, feats.value().data(),
                sizeof(Scalar) * static_cast<size_t>(feats.value().size()));
  }
  if (n_real < F)
    std::cerr << "warning: only " << n_real << " real images for " << F
              << "-dimensional activations; covariance is rank-deficient\n";
  report.fid = fid(ActivationSet::from(real_acts), ActivationSet::from(fake_acts));

  // retrieval: DAMSM global feature of each generated image against its true
  // caption plus sampled mismatched captions
  {
    index_t D = p.models.damsm_image->config().feature_dim;
    Tensor image_feats({n_samples, D});
    for (index_t start = 0; start < n_samples; start += cfg.batch_size) {
      index_t take = std::min<index_t>(cfg.batch_size, n_samples - start);
      Tensor chunk({take, 3, cfg.final_resolution(), cfg.final_resolution()});
      std::memcpy(chunk.data(), fake_images.data() + start * chunk.size() / take,
                  sizeof(Scalar) * static_cast<size_t>(chunk.size()));
      auto feats = p.models.damsm_image->encode(Var(chunk, false));
      std::memcpy(image_feats.data() + start * D, feats.global.value().data(),
                  sizeof(Scalar) * static_cast<size_t>(feats.global.value().size()));
    }
    // caption pool embeddings (whole split), grouped by identical text
    Tensor caption_embs({caption_count, D});
    std::map<std::string, index_t> text_groups;
    std::vector<index_t> group(static_cast<size_t>(caption_count));
    data::BatchStream stream(p.split_data, std::min<index_t>(cfg.batch_size, caption_count),
                             cfg.seed, 0.0);
    for (index_t start = 0; start < caption_count; start += cfg.batch_size) {
      index_t take = std::min<index_t>(cfg.batch_size, caption_count - start);
      std::vector<index_t> recs;
      for (index_t i = start; i < start + take; ++i) recs.push_back(i);
      data::TextBatch batch = stream.caption_batch(recs);
      auto enc = p.models.text_encoder->encode(batch);
      for (index_t i = 0; i < take; ++i) {
        index_t rec = batch.record_indices[static_cast<size_t>(i)];
        std::memcpy(caption_embs.data() + rec * D,
                    enc.sentence_embedding.value().data() + i * D,
                    sizeof(Scalar) * static_cast<size_t>(D));
      }
    }
    for (index_t ci = 0; ci < caption_count; ++ci) {
      const std::string& text = p.split_data.captions[static_cast<size_t>(ci)].text;
      auto [it, inserted] = text_groups.try_emplace(text, static_cast<index_t>(text_groups.size()));
      group[static_cast<size_t>(ci)] = it->second;
    }
    report.r_precision = r_precision(image_feats, caption_embs, caption_rows, group,
                                     cfg.r_distractors, Rng::derive(seed, "eval_rprec"));
  }

  // answering accuracy on images generated from the split's QA pairs
  {
    index_t qa_count = static_cast<index_t>(p.split_data.qas.size());
    std::vector<index_t> qa_rows;
    for (index_t i = 0; i < qa_count; ++i) qa_rows.push_back(i);
    Tensor qa_images = generate_from_records(cfg, p, qa_rows, true, seed + 1);
    std::vector<std::string> predictions;
    std::vector<data::QARecord> records;
    for (index_t start = 0; start < qa_count; start += cfg.batch_size) {
      index_t take = std::min<index_t>(cfg.batch_size, qa_count - start);
      Tensor chunk({take, 3, cfg.final_resolution(), cfg.final_resolution()});
      std::memcpy(chunk.data(), qa_images.data() + start * chunk.size() / take,
                  sizeof(Scalar) * static_cast<size_t>(chunk.size()));
      std::vector<const std::vector<index_t>*> qseqs;
      for (index_t i = start; i < start + take; ++i)
        qseqs.push_back(&p.split_data.qas[static_cast<size_t>(i)].question_token_ids);
      std::vector<index_t> ids;
      std::vector<index_t> lengths;
      index_t max_len = 1;
      for (const auto* s : qseqs) max_len = std::max(max_len, static_cast<index_t>(s->size()));
      ids.assign(static_cast<size_t>(take * max_len), data::Vocabulary::kPadId);
      for (index_t i = 0; i < take; ++i) {
        const auto& s = *qseqs[static_cast<size_t>(i)];
        std::copy(s.begin(), s.end(), ids.begin() + i * max_len);
        lengths.push_back(std::max<index_t>(1, static_cast<index_t>(s.size())));
      }
      auto fwd = p.scorer.vqa->answer_probs(Var(chunk, false), ids, take, max_len, lengths);
      for (index_t i = 0; i < take; ++i) {
        index_t best = 0;
        for (index_t a = 1; a < p.scorer.answers.size(); ++a)
          if (fwd.answer_logits.value().at(i, a) > fwd.answer_logits.value().at(i, best))
            best = a;
        predictions.push_back(p.scorer.answers.answer_of(best));
        records.push_back(p.split_data.qas[static_cast<size_t>(start + i)]);
      }
    }
    auto acc = models::vqa_accuracy(predictions, records);
    report.vqa_acc_consensus = acc.consensus;
    report.vqa_acc_top1_any = acc.top1_any;
  }
  return report;
}

void write_sample_grid(const io::TrainConfig& cfg, const std::filesystem::path& gan_checkpoint,
                       const std::string& split, const std::filesystem::path& out_png,
                       std::uint64_t seed) {
  LoadedPipeline p = load_pipeline(cfg, gan_checkpoint, split);
  NoGrad ng;
  index_t caption_count = static_cast<index_t>(p.split_data.captions.size());
  index_t n = std::min<index_t>(64, caption_count);
  Rng pick(Rng::derive(seed, "sample_grid"));
  auto perm = pick.permutation(caption_count);
  std::vector<index_t> rows(perm.begin(), perm.begin() + n);
  Tensor images = generate_from_records(cfg, p, rows, false, seed);
  io::save_png(out_png, io::tile_grid(images, 8));
  std::ofstream sidecar(out_png.string() + ".txt");
  for (index_t r : rows) sidecar << p.split_data.captions[static_cast<size_t>(r)].text << "\n";
}

}  // namespace vqat2i::eval
