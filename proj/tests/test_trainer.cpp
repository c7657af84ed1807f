#include "vqat2i/train/trainer.hpp"

#include "vqat2i/data/synthetic.hpp"
#include "vqat2i/eval/evaluate.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace vqat2i;
using namespace vqat2i::train;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("vqat2i_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// tiny everything: 16px final stage, small widths, 12-image dataset
io::TrainConfig tiny_config(const fs::path& root, const std::string& variant) {
  io::TrainConfig cfg;
  cfg.variant = variant;
  cfg.seed = 5;
  cfg.data_dir = (root / "data").string();
  cfg.out_dir = (root / "runs").string();
  cfg.embedding_dim = 8;
  cfg.hidden_dim = 8;  // text feature dim 16
  cfg.noise_dim = 8;
  cfg.condition_dim = 4;
  cfg.base_channels = 8;
  cfg.stage_count = 2;
  cfg.base_resolution = 8;  // pyramid 8/16
  cfg.disc_channels = 8;
  cfg.disc_condition_channels = 8;
  cfg.damsm_channels = 8;
  cfg.vqa_channels = 8;
  cfg.vqa_attention_hidden = 8;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.damsm_epochs = 1;
  cfg.vqa_epochs = 1;
  cfg.checkpoint_every = 1;
  cfg.eval_every = 1;
  cfg.eval_samples = 16;
  cfg.eval_samples_train = 12;
  cfg.is_splits = 2;
  cfg.r_distractors = 9;
  return cfg;
}

fs::path make_dataset(const fs::path& root, index_t n_images = 12) {
  auto spec = data::SyntheticSceneSpec::defaults();
  data::generate_synthetic_dataset(spec, n_images, 77, root / "data");
  return root / "data";
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("select_best_checkpoint argmax and tie-breaking") {
  auto meta = [](index_t epoch, Scalar is) {
    CheckpointMeta m;
    m.epoch = epoch;
    m.is_mean = is;
    m.file = "ckpt" + std::to_string(epoch);
    return m;
  };
  SUBCASE("argmax") {
    auto best = select_best_checkpoint({meta(1, 2.0), meta(2, 2.5), meta(3, 2.3)});
    CHECK(best.epoch == 2);
  }
  SUBCASE("single checkpoint is its own best") {
    auto best = select_best_checkpoint({meta(4, 1.7)});
    CHECK(best.epoch == 4);
  }
  SUBCASE("ties resolve to the later epoch") {
    auto best = select_best_checkpoint({meta(1, 2.5), meta(2, 2.5)});
    CHECK(best.epoch == 2);
  }
  SUBCASE("unevaluated series raises") {
    CHECK_THROWS_AS(select_best_checkpoint({meta(1, -1)}), std::runtime_error);
  }
}

TEST_CASE("checkpoint round trip verifies digests") {
  Rng rng(1);
  nn::ParamStore ps;
  ps.param("w", nn::normal_init({4, 3}, rng));
  ps.param("b", Tensor({3}));
  std::vector<Scalar> extra{1, 2, 3};
  auto dir = temp_dir("ckpt");
  CheckpointData data;
  data.components = {{"model", &ps}};
  data.extras = {{"opt", &extra}};
  save_checkpoint(dir / "x.ckpt", data, {{"epochs_completed", 3}});

  nn::ParamStore ps2;
  ps2.param("w", Tensor({4, 3}));
  ps2.param("b", Tensor({3}));
  std::vector<Scalar> extra2;
  CheckpointData data2;
  data2.components = {{"model", &ps2}};
  data2.extras = {{"opt", &extra2}};
  auto meta = load_checkpoint(dir / "x.ckpt", data2);
  CHECK(meta.at("epochs_completed").get<int>() == 3);
  CHECK(ps2.digest() == ps.digest());
  CHECK(extra2 == extra);

  // corrupt one parameter byte (extras live at the tail, params before them)
  auto bytes = file_bytes(dir / "x.ckpt");
  bytes[bytes.size() - 3 * sizeof(Scalar) - 9] ^= 0x40;
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
  nn::ParamStore ps3;
  ps3.param("w", Tensor({4, 3}));
  ps3.param("b", Tensor({3}));
  std::vector<Scalar> extra3;
  CheckpointData data3;
  data3.components = {{"model", &ps3}};
  data3.extras = {{"opt", &extra3}};
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.ckpt", data3),
                       doctest::Contains("digest mismatch"), std::runtime_error);
}

TEST_CASE("missing pretraining checkpoints name the required command") {
  auto root = temp_dir("missing");
  make_dataset(root);
  auto cfg = tiny_config(root, "adapted");
  CHECK_THROWS_WITH_AS(vqat2i::train::train(cfg), doctest::Contains("pretrain-damsm"), MissingPretraining);
  pretrain_damsm(cfg);
  CHECK_THROWS_WITH_AS(vqat2i::train::train(cfg), doctest::Contains("pretrain-vqa"), MissingPretraining);
}

TEST_CASE("zero-epoch pretraining writes the initialization") {
  auto root = temp_dir("zero_epochs");
  make_dataset(root);
  auto cfg = tiny_config(root, "baseline");
  cfg.damsm_epochs = 0;
  auto result = pretrain_damsm(cfg);
  data::Dataset train_split =
      data::load_dataset(cfg.data_dir, "train", cfg.min_frequency, cfg.max_text_length);
  ModelBundle fresh = build_models(cfg, train_split, false);
  CheckpointData data;
  data.components = {{"text_encoder", &fresh.text_encoder->params()},
                     {"damsm_image", &fresh.damsm_image->params()}};
  std::uint64_t before_te = fresh.text_encoder->params().digest();
  std::uint64_t before_di = fresh.damsm_image->params().digest();
  load_checkpoint(result.checkpoint, data);
  CHECK(fresh.text_encoder->params().digest() == before_te);
  CHECK(fresh.damsm_image->params().digest() == before_di);
}

TEST_CASE("pretraining is deterministic under a fixed seed") {
  auto root_a = temp_dir("pre_det_a");
  auto root_b = temp_dir("pre_det_b");
  make_dataset(root_a);
  make_dataset(root_b);
  auto ca = tiny_config(root_a, "baseline");
  auto cb = tiny_config(root_b, "baseline");
  auto ra = pretrain_damsm(ca);
  auto rb = pretrain_damsm(cb);
  CHECK(ra.train_curve == rb.train_curve);
  CHECK(ra.heldout_curve == rb.heldout_curve);
  CHECK(file_bytes(ra.checkpoint) == file_bytes(rb.checkpoint));
  auto va = pretrain_vqa(ca);
  auto vb = pretrain_vqa(cb);
  CHECK(va.heldout_accuracy == vb.heldout_accuracy);
  CHECK(file_bytes(va.checkpoint) == file_bytes(vb.checkpoint));
}

TEST_CASE("variant contracts during one training epoch") {
  auto root = temp_dir("variants");
  make_dataset(root);
  auto cfg = tiny_config(root, "baseline");
  pretrain_damsm(cfg);
  pretrain_vqa(cfg);

  SUBCASE("baseline never invokes the vqa model or routes qa through d") {
    auto result = vqat2i::train::train(cfg);
    CHECK(result.vqa_forward_calls == 0);
    CHECK(result.qa_discriminator_batches == 0);
  }
  SUBCASE("naive pretrained keeps vqa frozen and hides qa from d") {
    cfg.variant = "naive_pretrained";
    auto result = vqat2i::train::train(cfg);
    CHECK(result.vqa_forward_calls > 0);
    CHECK(result.qa_discriminator_batches == 0);
    CHECK(result.vqa_digest_before == result.vqa_digest_after);
  }
  SUBCASE("naive end-to-end updates the vqa digests") {
    cfg.variant = "naive_end_to_end";
    auto result = vqat2i::train::train(cfg);
    CHECK(result.vqa_forward_calls > 0);
    CHECK(result.vqa_digest_before != result.vqa_digest_after);
  }
  SUBCASE("adapted routes qa batches through the discriminators") {
    cfg.variant = "adapted";
    auto result = vqat2i::train::train(cfg);
    CHECK(result.vqa_forward_calls > 0);
    CHECK(result.qa_discriminator_batches > 0);
    CHECK(result.vqa_digest_before == result.vqa_digest_after);
  }
}

TEST_CASE("frozen components stay frozen through adversarial training") {
  auto root = temp_dir("frozen");
  make_dataset(root);
  auto cfg = tiny_config(root, "adapted");
  pretrain_damsm(cfg);
  pretrain_vqa(cfg);
  auto result = vqat2i::train::train(cfg);

  // text encoder and matching encoder inside the GAN checkpoint equal the
  // pretraining checkpoint exactly
  data::Dataset train_split =
      data::load_dataset(cfg.data_dir, "train", cfg.min_frequency, cfg.max_text_length);
  ModelBundle a = build_models(cfg, train_split, false);
  CheckpointData da;
  da.components = {{"text_encoder", &a.text_encoder->params()},
                   {"damsm_image", &a.damsm_image->params()}};
  load_checkpoint(Paths{cfg.out_dir}.damsm_checkpoint(), da);

  ModelBundle b = build_models(cfg, train_split, true);
  CheckpointData db;
  db.components = {{"text_encoder", &b.text_encoder->params()},
                   {"damsm_image", &b.damsm_image->params()},
                   {"generator", &b.generator->params()}};
  for (size_t s = 0; s < b.discriminators.size(); ++s)
    db.components.emplace_back("discriminator" + std::to_string(s),
                               &b.discriminators[s]->params());
  db.components.emplace_back("vqa", &b.vqa->params());
  std::vector<std::vector<Scalar>> blobs(1 + b.discriminators.size());
  db.extras.emplace_back("adam_g", &blobs[0]);
  for (size_t s = 0; s < b.discriminators.size(); ++s)
    db.extras.emplace_back("adam_d" + std::to_string(s), &blobs[1 + s]);
  load_checkpoint(result.best.file, db);

  CHECK(a.text_encoder->params().digest() == b.text_encoder->params().digest());
  CHECK(a.damsm_image->params().digest() == b.damsm_image->params().digest());
}

TEST_CASE("a discriminator step leaves the generator untouched and vice versa") {
  auto root = temp_dir("isolation");
  make_dataset(root);
  auto cfg = tiny_config(root, "baseline");
  data::Dataset ds = data::load_dataset(cfg.data_dir, "train", cfg.min_frequency,
                                        cfg.max_text_length);
  ModelBundle m = build_models(cfg, ds, false);
  data::BatchStream stream(ds, cfg.batch_size, cfg.seed, 0.0);
  data::BatchStep step;
  stream.start_epoch(0);
  REQUIRE(stream.next(step));

  auto enc = m.text_encoder->encode(step.captions);
  Tensor eps({step.captions.n, cfg.condition_dim});
  Rng(3).fill_normal(eps);
  auto lat = m.generator->condition_augment(enc.sentence_embedding, eps);
  Tensor z({step.captions.n, cfg.noise_dim});
  Rng(4).fill_normal(z);
  auto pyr = m.generator->generate(ag::Var(z, false), lat.sample, enc.word_features,
                                   enc.lengths);

  std::uint64_t g_digest = m.generator->params().digest();
  std::vector<std::uint64_t> d_digests;
  for (auto& d : m.discriminators) d_digests.push_back(d->params().digest());

  // discriminator step on detached fakes
  std::vector<DiscriminatorStageInputs> din;
  for (size_t s = 0; s < m.discriminators.size(); ++s) {
    DiscriminatorStageInputs in;
    auto real = m.discriminators[s]->discriminate(
        ag::Var(downscale_to(step.captions.images, m.discriminators[s]->config().resolution),
                false),
        enc.sentence_embedding);
    in.real = {real.uncond_logit, real.cond_logit};
    auto fake = m.discriminators[s]->discriminate(ag::detach(pyr.images[s]),
                                                  enc.sentence_embedding);
    in.caption_fake = {fake.uncond_logit, fake.cond_logit};
    din.push_back(std::move(in));
  }
  auto [stage_losses, d_report] = discriminator_loss(din, VariantSpec::parse("baseline"));
  for (auto& loss : stage_losses) ag::backward(loss);
  std::vector<nn::Adam> opt_d;
  for (auto& d : m.discriminators)
    opt_d.emplace_back(d->params().params(), cfg.lr_d, cfg.beta1, cfg.beta2);
  for (size_t s = 0; s < opt_d.size(); ++s) opt_d[s].step();

  CHECK(m.generator->params().digest() == g_digest);  // untouched by the D step
  for (size_t s = 0; s < m.discriminators.size(); ++s)
    CHECK(m.discriminators[s]->params().digest() != d_digests[s]);

  // generator step: discriminators must stay exactly as the D step left them
  std::vector<std::uint64_t> d_after;
  for (auto& d : m.discriminators) d_after.push_back(d->params().digest());
  for (auto& d : m.discriminators) d->params().set_trainable(false);
  GeneratorLossInputs gin;
  for (size_t s = 0; s < m.discriminators.size(); ++s) {
    auto out = m.discriminators[s]->discriminate(pyr.images[s], enc.sentence_embedding);
    gin.caption_fake.push_back({out.uncond_logit, out.cond_logit});
  }
  gin.kl = lat.kl;
  auto [g_total, g_report] = generator_loss(gin, VariantSpec::parse("baseline"), {});
  ag::backward(g_total);
  nn::Adam opt_g(m.generator->params().params(), cfg.lr_g, cfg.beta1, cfg.beta2);
  opt_g.step();
  CHECK(m.generator->params().digest() != g_digest);
  for (size_t s = 0; s < m.discriminators.size(); ++s)
    CHECK(m.discriminators[s]->params().digest() == d_after[s]);
}

TEST_CASE("training twice with one seed reproduces the metrics log bit-exactly") {
  auto root_a = temp_dir("det_a");
  auto root_b = temp_dir("det_b");
  make_dataset(root_a);
  make_dataset(root_b);
  auto ca = tiny_config(root_a, "adapted");
  auto cb = tiny_config(root_b, "adapted");
  for (auto* c : {&ca, &cb}) {
    pretrain_damsm(*c);
    pretrain_vqa(*c);
  }
  auto ra = vqat2i::train::train(ca);
  auto rb = vqat2i::train::train(cb);
  CHECK(file_bytes(ra.metrics_log) == file_bytes(rb.metrics_log));
  CHECK(!file_bytes(ra.metrics_log).empty());
  CHECK(file_bytes(ra.best.file) == file_bytes(rb.best.file));
}

TEST_CASE("resume after k epochs matches an uninterrupted run by digest") {
  auto root_a = temp_dir("resume_a");
  auto root_b = temp_dir("resume_b");
  make_dataset(root_a);
  make_dataset(root_b);

  // uninterrupted: 2 epochs
  auto ca = tiny_config(root_a, "adapted");
  ca.epochs = 2;
  pretrain_damsm(ca);
  pretrain_vqa(ca);
  auto ra = vqat2i::train::train(ca);

  // interrupted: 1 epoch, then resume to 2
  auto cb = tiny_config(root_b, "adapted");
  cb.epochs = 1;
  pretrain_damsm(cb);
  pretrain_vqa(cb);
  auto rb1 = vqat2i::train::train(cb);
  cb.epochs = 2;
  auto rb2 = vqat2i::train::train(cb, fs::path(rb1.checkpoints.back().file));

  auto final_digests = [](const fs::path& ckpt) {
    std::ifstream in(ckpt, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), static_cast<std::streamsize>(hlen));
    auto header = nlohmann::json::parse(hstr);
    std::map<std::string, std::uint64_t> digests;
    for (const auto& c : header.at("components"))
      digests[c.at("name").get<std::string>()] = c.at("digest").get<std::uint64_t>();
    return digests;
  };
  // config hash differs (epochs 2 vs resumed), so compare parameter digests
  auto da = final_digests(ra.checkpoints.back().file);
  auto db = final_digests(rb2.checkpoints.back().file);
  CHECK(da == db);
  CHECK(da.size() >= 4);
}

TEST_CASE("evaluate_checkpoint writes a deterministic parseable report") {
  auto root = temp_dir("eval");
  make_dataset(root, 16);
  auto cfg = tiny_config(root, "adapted");
  pretrain_damsm(cfg);
  pretrain_vqa(cfg);
  auto result = vqat2i::train::train(cfg);

  auto r1 = eval::evaluate_checkpoint(cfg, result.best.file, "test", 8, 123);
  auto r2 = eval::evaluate_checkpoint(cfg, result.best.file, "test", 8, 123);
  CHECK(r1.to_json() == r2.to_json());
  CHECK(r1.is_mean >= 1.0);
  CHECK(r1.fid >= 0.0);
  CHECK(r1.r_precision >= 0.0);
  CHECK(r1.r_precision <= 1.0);
  CHECK(r1.vqa_acc_consensus >= 0.0);
  CHECK(r1.vqa_acc_consensus <= 1.0);
  CHECK(r1.sampled_with_replacement == false);

  auto file = root / "report.json";
  r1.save(file);
  auto back = eval::EvalReport::load(file);
  CHECK(back.to_json() == r1.to_json());

  // sample grid round trip
  eval::write_sample_grid(cfg, result.best.file, "test", root / "grid.png", 9);
  CHECK(fs::exists(root / "grid.png"));
  CHECK(fs::exists(root / "grid.png.txt"));
}
