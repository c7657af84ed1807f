#pragma once

#include "vqat2i/core/autograd.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vqat2i::train {

using ag::Var;

enum class Variant { baseline, naive_end_to_end, naive_pretrained, adapted };

struct VariantSpec {
  Variant name = Variant::adapted;
  bool discriminator_sees_qa = true;
  bool vqa_model_trainable = false;
  bool vqa_loss_enabled = true;
  bool damsm_on_qa = true;

  static VariantSpec from(Variant v);
  static VariantSpec parse(const std::string& name);
  std::string to_string() const;
};

struct LossWeights {
  Scalar lambda_damsm = 5.0;
  Scalar lambda_vqa = 1.0;
  Scalar kl_weight = 1.0;
};

/// Per-stage logits of one discriminator applied to one image batch.
struct StageLogits {
  Var uncond;  // [n]
  Var cond;    // [n]
};

/// Named scalar components; totals always equal the sum of the enabled
/// (already weighted) components.
struct LossReport {
  // generator side
  Scalar adv_uncond_caption = 0, adv_uncond_qa = 0;
  Scalar adv_cond_caption = 0, adv_cond_qa = 0;
  Scalar damsm_caption = 0, damsm_qa = 0;
  Scalar vqa = 0, kl = 0;
  Scalar total_g = 0;
  // discriminator side
  Scalar d_real_uncond = 0, d_fake_uncond_caption = 0, d_fake_uncond_qa = 0;
  Scalar d_real_cond = 0, d_fake_cond_caption = 0, d_fake_cond_qa = 0;
  Scalar total_d = 0;

  std::string to_json_line() const;  // single-line JSON for the metrics log
};

struct GeneratorLossInputs {
  std::vector<StageLogits> caption_fake;  // D_i(x caption) per stage
  std::vector<StageLogits> qa_fake;       // D_i(x qa) per stage; empty when unused
  std::optional<Var> damsm_caption;       // scalar
  std::optional<Var> damsm_qa;            // scalar
  std::optional<Var> vqa;                 // scalar
  std::optional<Var> kl;                  // scalar
};

/// Generator objective: negative log probabilities of fooling each stage
/// discriminator (conditional and unconditional, averaged over stages), the
/// matching losses, the answering loss on QA images and the conditioning
/// divergence. Variant flags drop the QA-side terms.
std::pair<Var, LossReport> generator_loss(const GeneratorLossInputs& in,
                                          const VariantSpec& variant, const LossWeights& w);

struct DiscriminatorStageInputs {
  StageLogits real;          // D(x_r), D(x_r, t)
  StageLogits caption_fake;  // D(x caption), D(x caption, t)
  std::optional<StageLogits> qa_fake;
};

/// Per-stage discriminator objectives (each stage trains on its own sum) plus
/// the aggregated report across stages.
std::pair<std::vector<Var>, LossReport> discriminator_loss(
    const std::vector<DiscriminatorStageInputs>& stages, const VariantSpec& variant);

}  // namespace vqat2i::train
