#pragma once

#include "vqat2i/data/text.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vqat2i::data {

struct CaptionRecord {
  std::string image_id;
  std::string text;
  std::vector<index_t> token_ids;
  index_t length = 0;
};

struct QARecord {
  std::string image_id;
  std::string question;
  std::vector<std::string> answers;  // K >= 1 ground-truth answers
  std::string majority;
  std::string qa_text;  // question + " " + majority answer, lowercased
  std::vector<index_t> qa_token_ids;
  std::vector<index_t> question_token_ids;
};

struct ComplementaryPair {
  std::string question;
  std::string image_id_a, answer_a;
  std::string image_id_b, answer_b;
};

struct ComplementaryPairIndex {
  std::vector<ComplementaryPair> entries;
};

/// All unordered pairs of records sharing exact question text with differing
/// majority answers and differing images; each pair listed once, in a
/// deterministic order (question, then record occurrence).
ComplementaryPairIndex index_complementary_pairs(const std::vector<QARecord>& records);

/// Fills majority/qa_text from the answers. Token ids are left empty until a
/// vocabulary exists (see encode_records).
QARecord make_qa_record(std::string image_id, std::string question,
                        std::vector<std::string> answers);

void encode_caption(CaptionRecord& rec, const Vocabulary& vocab, index_t max_len);
void encode_qa(QARecord& rec, const Vocabulary& vocab, index_t max_len);

// ---- manifest files (one JSON object per line) ----

struct ManifestEntry {
  std::string image_id;
  std::string type;  // "caption" | "qa"
  std::string text;
  std::string question;
  std::vector<std::string> answers;
  std::string split;  // "train" | "test"
};

void write_manifest(const std::filesystem::path& file, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& file);

struct DatasetMeta {
  std::uint64_t seed = 0;
  index_t n_images = 0;
  index_t n_captions = 0;
  index_t n_qa = 0;
  std::uint64_t vocab_hash = 0;
};

void write_dataset_meta(const std::filesystem::path& file, const DatasetMeta& meta);
DatasetMeta read_dataset_meta(const std::filesystem::path& file);

/// Converts COCO-style caption annotations plus VQA-2.0-style question and
/// annotation files into a manifest. Only the documented field subset is read:
/// image_id, caption / question, answers[].answer.
index_t ingest_annotations(const std::filesystem::path& coco_captions_json,
                           const std::filesystem::path& vqa_questions_json,
                           const std::filesystem::path& vqa_annotations_json,
                           const std::filesystem::path& out_manifest,
                           const std::string& split);

}  // namespace vqat2i::data
