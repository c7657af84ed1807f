#include "vqat2i/train/objectives.hpp"

#include <json.hpp>

#include <stdexcept>

namespace vqat2i::train {

using namespace ag;

VariantSpec VariantSpec::from(Variant v) {
  VariantSpec spec;
  spec.name = v;
  switch (v) {
    case Variant::baseline:
      spec.discriminator_sees_qa = false;
      spec.vqa_model_trainable = false;
      spec.vqa_loss_enabled = false;
      spec.damsm_on_qa = false;
      break;
    case Variant::naive_end_to_end:
      spec.discriminator_sees_qa = false;
      spec.vqa_model_trainable = true;
      spec.vqa_loss_enabled = true;
      spec.damsm_on_qa = false;
      break;
    case Variant::naive_pretrained:
      spec.discriminator_sees_qa = false;
      spec.vqa_model_trainable = false;
      spec.vqa_loss_enabled = true;
      spec.damsm_on_qa = false;
      break;
    case Variant::adapted:
      spec.discriminator_sees_qa = true;
      spec.vqa_model_trainable = false;
      spec.vqa_loss_enabled = true;
      spec.damsm_on_qa = true;
      break;
  }
  return spec;
}

VariantSpec VariantSpec::parse(const std::string& name) {
  if (name == "baseline") return from(Variant::baseline);
  if (name == "naive_end_to_end") return from(Variant::naive_end_to_end);
  if (name == "naive_pretrained") return from(Variant::naive_pretrained);
  if (name == "adapted") return from(Variant::adapted);
  throw std::invalid_argument(
      "unknown variant '" + name +
      "' (expected baseline|naive_end_to_end|naive_pretrained|adapted)");
}

std::string VariantSpec::to_string() const {
  switch (name) {
    case Variant::baseline: return "baseline";
    case Variant::naive_end_to_end: return "naive_end_to_end";
    case Variant::naive_pretrained: return "naive_pretrained";
    case Variant::adapted: return "adapted";
  }
  throw std::logic_error("bad variant");
}

std::string LossReport::to_json_line() const {
  nlohmann::json j{{"adv_uncond_caption", adv_uncond_caption},
                   {"adv_uncond_qa", adv_uncond_qa},
                   {"adv_cond_caption", adv_cond_caption},
                   {"adv_cond_qa", adv_cond_qa},
                   {"damsm_caption", damsm_caption},
                   {"damsm_qa", damsm_qa},
                   {"vqa", vqa},
                   {"kl", kl},
                   {"total_g", total_g},
                   {"d_real_uncond", d_real_uncond},
                   {"d_fake_uncond_caption", d_fake_uncond_caption},
                   {"d_fake_uncond_qa", d_fake_uncond_qa},
                   {"d_real_cond", d_real_cond},
                   {"d_fake_cond_caption", d_fake_cond_caption},
                   {"d_fake_cond_qa", d_fake_cond_qa},
                   {"total_d", total_d}};
  return j.dump();
}

namespace {

bool has_samples(const std::vector<StageLogits>& stages) {
  return !stages.empty() && stages[0].uncond.defined() && stages[0].uncond.value().size() > 0;
}

// -E[log D] over the batch, averaged across stages, from retained logits:
// -log sigmoid(l) = softplus(-l)
Var mean_real_loss(const std::vector<StageLogits>& stages, bool cond) {
  Var total;
  for (const auto& s : stages) {
    Var term = mean_all(softplus(neg(cond ? s.cond : s.uncond)));
    total = total.defined() ? add(total, term) : term;
  }
  return mul_scalar(total, 1.0 / static_cast<Scalar>(stages.size()));
}

}  // namespace

std::pair<Var, LossReport> generator_loss(const GeneratorLossInputs& in,
                                          const VariantSpec& variant, const LossWeights& w) {
  if (!has_samples(in.caption_fake))
    throw std::invalid_argument("generator_loss: caption discriminator outputs required");
  bool use_qa_adv = variant.discriminator_sees_qa && has_samples(in.qa_fake);
  bool use_damsm_qa = variant.damsm_on_qa && in.damsm_qa.has_value();
  bool use_vqa = variant.vqa_loss_enabled && in.vqa.has_value();
  if (variant.vqa_loss_enabled && !in.vqa.has_value() && !in.qa_fake.empty())
    throw std::invalid_argument("generator_loss: variant enables the answering loss but no "
                                "vqa term was provided");

  LossReport report;
  Var total;
  auto accumulate = [&total](const Var& term) {
    total = total.defined() ? add(total, term) : term;
    return term.item();
  };

  Var uncond_cap = mean_real_loss(in.caption_fake, false);
  report.adv_uncond_caption = accumulate(uncond_cap);
  Var cond_cap = mean_real_loss(in.caption_fake, true);
  report.adv_cond_caption = accumulate(cond_cap);
  if (use_qa_adv) {
    report.adv_uncond_qa = accumulate(mean_real_loss(in.qa_fake, false));
    report.adv_cond_qa = accumulate(mean_real_loss(in.qa_fake, true));
  }
  if (in.damsm_caption)
    report.damsm_caption = accumulate(mul_scalar(*in.damsm_caption, w.lambda_damsm));
  if (use_damsm_qa) report.damsm_qa = accumulate(mul_scalar(*in.damsm_qa, w.lambda_damsm));
  if (use_vqa) report.vqa = accumulate(mul_scalar(*in.vqa, w.lambda_vqa));
  if (in.kl && w.kl_weight != 0) report.kl = accumulate(mul_scalar(*in.kl, w.kl_weight));

  report.total_g = total.item();
  return {total, report};
}

std::pair<std::vector<Var>, LossReport> discriminator_loss(
    const std::vector<DiscriminatorStageInputs>& stages, const VariantSpec& variant) {
  if (stages.empty()) throw std::invalid_argument("discriminator_loss: no stages");
  Scalar inv = 1.0 / static_cast<Scalar>(stages.size());

  LossReport report;
  std::vector<Var> per_stage;
  for (const auto& st : stages) {
    bool use_qa = variant.discriminator_sees_qa && st.qa_fake.has_value() &&
                  st.qa_fake->uncond.defined() && st.qa_fake->uncond.value().size() > 0;
    // real terms: -log D; fake terms: -log(1 - D) = softplus(logit)
    Var real_u = mean_all(softplus(neg(st.real.uncond)));
    Var fake_u_cap = mean_all(softplus(st.caption_fake.uncond));
    Var real_c = mean_all(softplus(neg(st.real.cond)));
    Var fake_c_cap = mean_all(softplus(st.caption_fake.cond));
    Var stage_total = add(add(real_u, fake_u_cap), add(real_c, fake_c_cap));
    report.d_real_uncond += real_u.item() * inv;
    report.d_fake_uncond_caption += fake_u_cap.item() * inv;
    report.d_real_cond += real_c.item() * inv;
    report.d_fake_cond_caption += fake_c_cap.item() * inv;
    if (use_qa) {
      Var fake_u_qa = mean_all(softplus(st.qa_fake->uncond));
      Var fake_c_qa = mean_all(softplus(st.qa_fake->cond));
      stage_total = add(stage_total, add(fake_u_qa, fake_c_qa));
      report.d_fake_uncond_qa += fake_u_qa.item() * inv;
      report.d_fake_cond_qa += fake_c_qa.item() * inv;
    }
    per_stage.push_back(stage_total);
  }
  report.total_d = report.d_real_uncond + report.d_fake_uncond_caption +
                   report.d_fake_uncond_qa + report.d_real_cond +
                   report.d_fake_cond_caption + report.d_fake_cond_qa;
  return {per_stage, report};
}

}  // namespace vqat2i::train
