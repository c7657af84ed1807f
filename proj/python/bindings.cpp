#include "vqat2i/cli/cli.hpp"
#include "vqat2i/data/synthetic.hpp"
#include "vqat2i/data/text.hpp"
#include "vqat2i/eval/metrics.hpp"
#include "vqat2i/models/vqa.hpp"
#include "vqat2i/train/objectives.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace vqat2i;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<index_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
  Tensor t(shape);
  std::memcpy(t.data(), a.data(), sizeof(double) * static_cast<size_t>(t.size()));
  return t;
}

train::StageLogits stage_from_probs(const std::vector<double>& uncond,
                                    const std::vector<double>& cond) {
  Tensor u({static_cast<index_t>(uncond.size())});
  Tensor c({static_cast<index_t>(cond.size())});
  for (size_t i = 0; i < uncond.size(); ++i)
    u[static_cast<index_t>(i)] = std::log(uncond[i] / (1.0 - uncond[i]));
  for (size_t i = 0; i < cond.size(); ++i)
    c[static_cast<index_t>(i)] = std::log(cond[i] / (1.0 - cond[i]));
  return {ag::Var(u, false), ag::Var(c, false)};
}

py::dict report_to_dict(const train::LossReport& r) {
  py::dict d;
  d["adv_uncond_caption"] = r.adv_uncond_caption;
  d["adv_uncond_qa"] = r.adv_uncond_qa;
  d["adv_cond_caption"] = r.adv_cond_caption;
  d["adv_cond_qa"] = r.adv_cond_qa;
  d["damsm_caption"] = r.damsm_caption;
  d["damsm_qa"] = r.damsm_qa;
  d["vqa"] = r.vqa;
  d["kl"] = r.kl;
  d["total_g"] = r.total_g;
  d["d_real_uncond"] = r.d_real_uncond;
  d["d_fake_uncond_caption"] = r.d_fake_uncond_caption;
  d["d_fake_uncond_qa"] = r.d_fake_uncond_qa;
  d["d_real_cond"] = r.d_real_cond;
  d["d_fake_cond_caption"] = r.d_fake_cond_caption;
  d["d_fake_cond_qa"] = r.d_fake_cond_qa;
  d["total_d"] = r.total_d;
  return d;
}

}  // namespace

PYBIND11_MODULE(_vqat2i, m) {
  m.doc() = "VQA-augmented text-to-image pipeline: core operations";

  m.def("tokenize", &data::tokenize, py::arg("text"));
  m.def("concatenate_qa", &data::concatenate_qa, py::arg("question"), py::arg("answer"));
  m.def("majority_answer", &data::majority_answer, py::arg("answers"));
  m.def(
      "build_vocabulary",
      [](const std::vector<std::string>& texts, index_t min_frequency) {
        auto v = data::build_vocabulary(texts, min_frequency);
        std::vector<std::string> tokens;
        for (index_t i = 0; i < v.size(); ++i) tokens.push_back(v.token_of(i));
        return tokens;
      },
      py::arg("texts"), py::arg("min_frequency") = 1,
      "Token list indexed by id; the first three ids are reserved markers.");

  m.def(
      "inception_score",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
         index_t splits) { return eval::inception_score(tensor_from_array(probs), splits); },
      py::arg("class_probs"), py::arg("splits") = 10);
  m.def(
      "fid",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& real,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& fake) {
        return eval::fid(eval::ActivationSet::from(tensor_from_array(real)),
                         eval::ActivationSet::from(tensor_from_array(fake)));
      },
      py::arg("real_activations"), py::arg("fake_activations"));
  m.def(
      "r_precision",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& images,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& captions,
         const std::vector<index_t>& true_caption, index_t distractors, std::uint64_t seed) {
        index_t n_captions = tensor_from_array(captions).dim(0);
        std::vector<index_t> group(static_cast<size_t>(n_captions));
        for (index_t i = 0; i < n_captions; ++i) group[static_cast<size_t>(i)] = i;
        return eval::r_precision(tensor_from_array(images), tensor_from_array(captions),
                                 true_caption, group, distractors, seed);
      },
      py::arg("image_features"), py::arg("caption_embeddings"), py::arg("true_caption"),
      py::arg("distractors") = 99, py::arg("seed") = 0);

  m.def("vqa_loss", &models::vqa_loss, py::arg("answer_probs"), py::arg("answer_ids"),
        "Mean negative log-likelihood over the listed correct answers.");
  m.def(
      "vqa_accuracy",
      [](const std::vector<std::string>& predictions,
         const std::vector<std::vector<std::string>>& answer_sets) {
        std::vector<data::QARecord> records;
        for (const auto& answers : answer_sets)
          records.push_back(data::make_qa_record("img", "q?", answers));
        auto acc = models::vqa_accuracy(predictions, records);
        return py::make_tuple(acc.consensus, acc.top1_any);
      },
      py::arg("predictions"), py::arg("answer_sets"));

  m.def(
      "generator_loss",
      [](const std::vector<std::vector<double>>& caption_uncond,
         const std::vector<std::vector<double>>& caption_cond,
         const std::vector<std::vector<double>>& qa_uncond,
         const std::vector<std::vector<double>>& qa_cond, double damsm_caption,
         double damsm_qa, double vqa, double kl, const std::string& variant,
         double lambda_damsm, double lambda_vqa, double kl_weight) {
        train::GeneratorLossInputs in;
        for (size_t s = 0; s < caption_uncond.size(); ++s)
          in.caption_fake.push_back(stage_from_probs(caption_uncond[s], caption_cond[s]));
        for (size_t s = 0; s < qa_uncond.size(); ++s)
          in.qa_fake.push_back(stage_from_probs(qa_uncond[s], qa_cond[s]));
        in.damsm_caption = ag::Var(Tensor::scalar(damsm_caption), false);
        in.damsm_qa = ag::Var(Tensor::scalar(damsm_qa), false);
        in.vqa = ag::Var(Tensor::scalar(vqa), false);
        in.kl = ag::Var(Tensor::scalar(kl), false);
        auto [total, report] = train::generator_loss(
            in, train::VariantSpec::parse(variant), {lambda_damsm, lambda_vqa, kl_weight});
        return report_to_dict(report);
      },
      py::arg("caption_uncond_probs"), py::arg("caption_cond_probs"),
      py::arg("qa_uncond_probs") = std::vector<std::vector<double>>{},
      py::arg("qa_cond_probs") = std::vector<std::vector<double>>{},
      py::arg("damsm_caption") = 0.0, py::arg("damsm_qa") = 0.0, py::arg("vqa") = 0.0,
      py::arg("kl") = 0.0, py::arg("variant") = "adapted", py::arg("lambda_damsm") = 1.0,
      py::arg("lambda_vqa") = 1.0, py::arg("kl_weight") = 1.0,
      "Assembles the generator objective from per-stage fooling probabilities.");

  m.def(
      "discriminator_loss",
      [](const std::vector<std::vector<double>>& real_uncond,
         const std::vector<std::vector<double>>& real_cond,
         const std::vector<std::vector<double>>& caption_uncond,
         const std::vector<std::vector<double>>& caption_cond,
         const std::vector<std::vector<double>>& qa_uncond,
         const std::vector<std::vector<double>>& qa_cond, const std::string& variant) {
        std::vector<train::DiscriminatorStageInputs> stages;
        for (size_t s = 0; s < real_uncond.size(); ++s) {
          train::DiscriminatorStageInputs st;
          st.real = stage_from_probs(real_uncond[s], real_cond[s]);
          st.caption_fake = stage_from_probs(caption_uncond[s], caption_cond[s]);
          if (s < qa_uncond.size())
            st.qa_fake = stage_from_probs(qa_uncond[s], qa_cond[s]);
          stages.push_back(std::move(st));
        }
        auto [losses, report] =
            train::discriminator_loss(stages, train::VariantSpec::parse(variant));
        return report_to_dict(report);
      },
      py::arg("real_uncond_probs"), py::arg("real_cond_probs"),
      py::arg("caption_uncond_probs"), py::arg("caption_cond_probs"),
      py::arg("qa_uncond_probs") = std::vector<std::vector<double>>{},
      py::arg("qa_cond_probs") = std::vector<std::vector<double>>{},
      py::arg("variant") = "adapted");

  m.def(
      "generate_synthetic_dataset",
      [](const std::string& out_dir, index_t n_images, std::uint64_t seed) {
        auto summary = data::generate_synthetic_dataset(data::SyntheticSceneSpec::defaults(),
                                                        n_images, seed, out_dir);
        py::dict d;
        d["n_images"] = summary.n_images;
        d["n_captions"] = summary.n_captions;
        d["n_qa"] = summary.n_qa;
        d["n_complementary"] = summary.n_complementary;
        d["vocab_hash"] = summary.vocab_hash;
        return d;
      },
      py::arg("out_dir"), py::arg("n_images"), py::arg("seed") = 1);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"vqat2i"};
        for (const auto& a : args) argv.push_back(a.c_str());
        return cli::run(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Invoke any CLI subcommand in-process; returns the exit code.");
}
