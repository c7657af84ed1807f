#include "vqat2i/io/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace vqat2i::io {

using nlohmann::json;

namespace {

std::string fmt_float(Scalar v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

index_t parse_int(const std::string& s) {
  size_t pos = 0;
  long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not an integer: " + s);
  return static_cast<index_t>(v);
}

Scalar parse_float(const std::string& s) {
  size_t pos = 0;
  Scalar v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not a number: " + s);
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("not a bool: " + s);
}

#define FIELD_INT(name, help)                                                   \
  ConfigField{#name, "int", help,                                               \
              [](const TrainConfig& c) { return std::to_string(c.name); },      \
              [](TrainConfig& c, const std::string& s) { c.name = parse_int(s); }}
#define FIELD_U64(name, help)                                                   \
  ConfigField{#name, "int", help,                                               \
              [](const TrainConfig& c) { return std::to_string(c.name); },      \
              [](TrainConfig& c, const std::string& s) {                        \
                c.name = static_cast<std::uint64_t>(std::stoull(s));            \
              }}
#define FIELD_FLOAT(name, help)                                                 \
  ConfigField{#name, "float", help,                                             \
              [](const TrainConfig& c) { return fmt_float(c.name); },           \
              [](TrainConfig& c, const std::string& s) { c.name = parse_float(s); }}
#define FIELD_BOOL(name, help)                                                  \
  ConfigField{#name, "bool", help,                                              \
              [](const TrainConfig& c) {                                        \
                return std::string(c.name ? "true" : "false");                  \
              },                                                                \
              [](TrainConfig& c, const std::string& s) { c.name = parse_bool(s); }}
#define FIELD_STR(name, help)                                                   \
  ConfigField{#name, "string", help, [](const TrainConfig& c) { return c.name; }, \
              [](TrainConfig& c, const std::string& s) { c.name = s; }}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      FIELD_STR(preset, "desk or full; sets scale defaults before overrides"),
      FIELD_STR(variant, "baseline | naive_end_to_end | naive_pretrained | adapted"),
      FIELD_U64(seed, "master seed; every random stream derives from it"),
      FIELD_STR(data_dir, "dataset directory (manifest.jsonl + images/)"),
      FIELD_STR(out_dir, "output root for checkpoints, logs and reports"),
      FIELD_INT(min_frequency, "vocabulary frequency threshold"),
      FIELD_INT(max_text_length, "token truncation length"),
      FIELD_FLOAT(qa_ratio, "QA batch size relative to the caption batch"),
      FIELD_INT(embedding_dim, "text encoder token embedding width"),
      FIELD_INT(hidden_dim, "text encoder hidden width per direction"),
      FIELD_FLOAT(dropout, "text encoder embedding dropout during pretraining"),
      FIELD_STR(rnn_cell, "recurrent cell: lstm or gru"),
      FIELD_BOOL(pretrain_with_qa, "include QA texts in matching pretraining"),
      FIELD_INT(noise_dim, "generator noise dimension"),
      FIELD_INT(condition_dim, "conditioning latent dimension"),
      FIELD_INT(base_channels, "generator hidden channels per stage"),
      FIELD_INT(stage_count, "pyramid stages (1..3)"),
      FIELD_INT(base_resolution, "first stage resolution"),
      FIELD_FLOAT(kl_weight, "conditioning divergence weight in the generator loss"),
      FIELD_INT(disc_channels, "discriminator base channels"),
      FIELD_INT(disc_condition_channels, "compressed sentence width in the cond head"),
      FIELD_STR(stages_in_loss, "which stages enter the adversarial losses (all)"),
      FIELD_INT(damsm_channels, "matching image encoder base channels"),
      FIELD_FLOAT(gamma1, "attention sharpening inside the matching score"),
      FIELD_FLOAT(gamma2, "smooth-max aggregation over words"),
      FIELD_FLOAT(gamma3, "contrastive temperature over the batch"),
      FIELD_FLOAT(lambda_damsm, "matching loss weight in the generator objective"),
      FIELD_INT(vqa_channels, "vqa image tower base channels"),
      FIELD_INT(vqa_attention_hidden, "stacked attention hidden width"),
      FIELD_INT(vqa_glimpses, "stacked attention hops"),
      FIELD_INT(answer_top_n, "answer vocabulary cut (0 keeps all training answers)"),
      FIELD_FLOAT(lambda_vqa, "answering loss weight in the generator objective"),
      FIELD_BOOL(strict_eq2, "unweighted objective without the conditioning term"),
      FIELD_INT(epochs, "adversarial training epochs"),
      FIELD_INT(batch_size, "records per step"),
      FIELD_FLOAT(lr_g, "generator learning rate"),
      FIELD_FLOAT(lr_d, "discriminator learning rate"),
      FIELD_FLOAT(beta1, "first moment decay"),
      FIELD_FLOAT(beta2, "second moment decay"),
      FIELD_INT(d_steps_per_g, "discriminator updates per generator update"),
      FIELD_INT(checkpoint_every, "epochs between checkpoints"),
      FIELD_INT(eval_every, "epochs between quick scores (0 disables)"),
      FIELD_INT(damsm_epochs, "matching pretraining epochs"),
      FIELD_INT(vqa_epochs, "vqa pretraining epochs"),
      FIELD_INT(eval_samples, "generated images per evaluation"),
      FIELD_INT(eval_samples_train, "generated images per quick in-training score"),
      FIELD_INT(is_splits, "inception-style score splits"),
      FIELD_INT(r_distractors, "mismatched captions per retrieval trial"),
  };
  return fields;
}

void apply_preset(TrainConfig& cfg, const std::string& preset) {
  if (preset == "desk") {
    cfg = TrainConfig{};  // defaults above are the desk preset
  } else if (preset == "full") {
    cfg = TrainConfig{};
    cfg.preset = "full";
    cfg.min_frequency = 5;
    cfg.embedding_dim = 300;
    cfg.hidden_dim = 128;
    cfg.base_channels = 48;
    cfg.base_resolution = 64;  // 64/128/256 pyramid
    cfg.disc_channels = 64;
    cfg.damsm_channels = 64;
    cfg.vqa_channels = 64;
    cfg.vqa_attention_hidden = 128;
    cfg.answer_top_n = 3000;
    cfg.epochs = 120;
    cfg.batch_size = 14;
    cfg.damsm_epochs = 100;
    cfg.vqa_epochs = 40;
    cfg.eval_samples = 30000;
    cfg.eval_samples_train = 2048;
  } else {
    throw std::invalid_argument("unknown preset '" + preset + "' (expected desk|full)");
  }
  cfg.preset = preset;
}

namespace {

const ConfigField& field_by_key(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

TrainConfig load_config(const std::optional<std::filesystem::path>& file,
                        const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  json j;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw std::runtime_error("cannot read config file: " + file->string());
    j = json::parse(in);
    if (j.contains("preset")) apply_preset(cfg, j["preset"].get<std::string>());
  }
  // preset from overrides wins over the file's preset
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq != std::string::npos && ov.substr(0, eq) == "preset")
      apply_preset(cfg, ov.substr(eq + 1));
  }
  if (file) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const ConfigField& f = field_by_key(it.key());
      f.set(cfg, it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
    }
  }
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must look like key=value, got '" + ov + "'");
    const ConfigField& f = field_by_key(ov.substr(0, eq));
    f.set(cfg, ov.substr(eq + 1));
  }
  if (cfg.strict_eq2) {
    cfg.lambda_damsm = 1.0;
    cfg.lambda_vqa = 1.0;
    cfg.kl_weight = 0.0;
  }
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.lr_g <= 0 || cfg.lr_d <= 0) throw std::invalid_argument("learning rates must be > 0");
  return cfg;
}

std::string config_to_json(const TrainConfig& cfg) {
  json j;
  for (const auto& f : config_fields()) {
    if (f.type == "int")
      j[f.key] = std::stoll(f.get(cfg));
    else if (f.type == "float")
      j[f.key] = std::stod(f.get(cfg));
    else if (f.type == "bool")
      j[f.key] = f.get(cfg) == "true";
    else
      j[f.key] = f.get(cfg);
  }
  return j.dump(2);
}

void save_config(const TrainConfig& cfg, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write config: " + file.string());
  out << config_to_json(cfg) << "\n";
}

std::uint64_t TrainConfig::hash() const {
  // structural identity only: fields that change the models or the update
  // math. Paths, epoch budgets and evaluation cadence stay out so a resumed
  // or relocated run still matches its checkpoints.
  static const std::set<std::string> operational = {
      "preset",          "data_dir",    "out_dir",          "epochs",
      "checkpoint_every", "eval_every",  "damsm_epochs",     "vqa_epochs",
      "eval_samples",    "eval_samples_train", "is_splits", "r_distractors"};
  std::uint64_t h = kFnvBasis;
  for (const auto& f : config_fields()) {
    if (operational.count(f.key)) continue;
    h = fnv1a64(f.key, h);
    h = fnv1a64(f.get(*this), h);
  }
  return h;
}

}  // namespace vqat2i::io
