#include "vqat2i/cli/cli.hpp"

#include "vqat2i/data/records.hpp"
#include "vqat2i/eval/evaluate.hpp"
#include "vqat2i/io/config.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace vqat2i;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("vqat2i_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(std::vector<std::string> args) {
  std::vector<const char*> argv{"vqat2i"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::uint64_t dir_digest(const fs::path& dir) {
  std::uint64_t h = kFnvBasis;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() != ".lock")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    h = fnv1a64(f.filename().string(), h);
    std::ifstream in(f, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

// tiny overrides shared by the pipeline commands
std::vector<std::string> tiny_sets(const fs::path& root) {
  return {"--data", (root / "data").string(),
          "--out",  (root / "runs").string(),
          "--set",  "embedding_dim=8",
          "--set",  "hidden_dim=8",
          "--set",  "noise_dim=8",
          "--set",  "condition_dim=4",
          "--set",  "base_channels=8",
          "--set",  "stage_count=2",
          "--set",  "base_resolution=8",
          "--set",  "disc_channels=8",
          "--set",  "disc_condition_channels=8",
          "--set",  "damsm_channels=8",
          "--set",  "vqa_channels=8",
          "--set",  "vqa_attention_hidden=8",
          "--set",  "batch_size=4",
          "--set",  "epochs=1",
          "--set",  "damsm_epochs=1",
          "--set",  "vqa_epochs=1",
          "--set",  "checkpoint_every=1",
          "--set",  "eval_every=1",
          "--set",  "eval_samples=8",
          "--set",  "eval_samples_train=8",
          "--set",  "is_splits=2",
          "--set",  "r_distractors=5"};
}

}  // namespace

TEST_CASE("synth-data twice with one seed produces identical dataset digests") {
  auto root_a = temp_dir("synth_a");
  auto root_b = temp_dir("synth_b");
  CHECK(run_cli({"synth-data", "--n", "50", "--seed", "7", "--data",
                 (root_a / "data").string()}) == 0);
  CHECK(run_cli({"synth-data", "--n", "50", "--seed", "7", "--data",
                 (root_b / "data").string()}) == 0);
  CHECK(dir_digest(root_a / "data") == dir_digest(root_b / "data"));
}

TEST_CASE("unknown override keys are rejected with the exact key name") {
  auto root = temp_dir("badkey");
  // capture stderr is awkward here; the exit code carries the contract
  CHECK(run_cli({"synth-data", "--n", "2", "--data", (root / "data").string(), "--set",
                 "not_a_real_key=1"}) == 1);
}

TEST_CASE("train without pretraining checkpoints exits 1") {
  auto root = temp_dir("no_ckpt");
  auto args = tiny_sets(root);
  REQUIRE(run_cli({"synth-data", "--n", "12", "--seed", "3", "--data",
                   (root / "data").string()}) == 0);
  std::vector<std::string> train_args{"train", "--variant", "adapted"};
  train_args.insert(train_args.end(), args.begin(), args.end());
  CHECK(run_cli(train_args) == 1);  // names pretrain-damsm on stderr
}

TEST_CASE("print-config echoes the resolved configuration") {
  CHECK(run_cli({"train", "--print-config", "--set", "epochs=3"}) == 0);
}

TEST_CASE("full pipeline through the cli and report round trip") {
  auto root = temp_dir("pipeline");
  auto args = tiny_sets(root);
  REQUIRE(run_cli({"synth-data", "--n", "12", "--seed", "3", "--data",
                   (root / "data").string()}) == 0);
  auto with = [&](std::vector<std::string> head) {
    head.insert(head.end(), args.begin(), args.end());
    return head;
  };
  REQUIRE(run_cli(with({"pretrain-damsm"})) == 0);
  REQUIRE(run_cli(with({"pretrain-vqa"})) == 0);
  REQUIRE(run_cli(with({"train", "--variant", "adapted"})) == 0);
  REQUIRE(run_cli(with({"evaluate", "--checkpoint", "best", "--samples", "6", "--report",
                        (root / "report.json").string()})) == 0);
  auto report = eval::EvalReport::load(root / "report.json");
  CHECK(report.is_mean >= 1.0);
  CHECK(report.n_samples == 6);
  REQUIRE(run_cli(with({"sample", "--checkpoint", "best", "--out-png",
                        (root / "grid.png").string()})) == 0);
  CHECK(fs::exists(root / "grid.png"));
  CHECK(fs::exists(root / "grid.png.txt"));
}

TEST_CASE("prepare-data builds a manifest from annotation files") {
  auto root = temp_dir("prepare");
  std::ofstream(root / "captions.json")
      << R"({"annotations":[{"image_id":1,"caption":"A red circle."}]})";
  std::ofstream(root / "questions.json")
      << R"({"questions":[{"question_id":9,"image_id":1,"question":"Is there a circle?"}]})";
  std::ofstream(root / "annotations.json")
      << R"({"annotations":[{"question_id":9,"answers":[{"answer":"yes"}]}]})";
  CHECK(run_cli({"prepare-data", "--captions", (root / "captions.json").string(),
                 "--questions", (root / "questions.json").string(), "--annotations",
                 (root / "annotations.json").string(), "--split", "train", "--data",
                 (root / "data").string()}) == 0);
  auto entries = data::read_manifest(root / "data" / "manifest.jsonl");
  CHECK(entries.size() == 2);
  auto meta = data::read_dataset_meta(root / "data" / "dataset.meta");
  CHECK(meta.n_images == 1);
  CHECK(meta.n_qa == 1);
}

TEST_CASE("invalid variant exits 1") {
  CHECK(run_cli({"train", "--variant", "bogus", "--print-config"}) == 1);
}
