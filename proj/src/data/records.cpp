#include "vqat2i/data/records.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <tuple>
#include <stdexcept>

namespace vqat2i::data {

using nlohmann::json;

ComplementaryPairIndex index_complementary_pairs(const std::vector<QARecord>& records) {
  std::map<std::string, std::vector<size_t>> by_question;
  for (size_t i = 0; i < records.size(); ++i)
    by_question[records[i].question].push_back(i);

  ComplementaryPairIndex index;
  std::set<std::tuple<std::string, std::string, std::string, std::string, std::string>> seen;
  for (const auto& [question, ids] : by_question) {
    for (size_t a = 0; a < ids.size(); ++a)
      for (size_t b = a + 1; b < ids.size(); ++b) {
        const QARecord* ra = &records[ids[a]];
        const QARecord* rb = &records[ids[b]];
        if (ra->image_id == rb->image_id || ra->majority == rb->majority) continue;
        // canonical orientation so duplicate records cannot produce a
        // reversed twin of an existing entry
        if (std::tie(rb->image_id, rb->majority) < std::tie(ra->image_id, ra->majority))
          std::swap(ra, rb);
        auto key = std::make_tuple(question, ra->image_id, ra->majority, rb->image_id,
                                   rb->majority);
        if (!seen.insert(key).second) continue;
        index.entries.push_back({question, ra->image_id, ra->majority, rb->image_id,
                                 rb->majority});
      }
  }
  return index;
}

QARecord make_qa_record(std::string image_id, std::string question,
                        std::vector<std::string> answers) {
  QARecord rec;
  rec.image_id = std::move(image_id);
  rec.question = std::move(question);
  rec.answers = std::move(answers);
  rec.majority = majority_answer(rec.answers);
  rec.qa_text = concatenate_qa(rec.question, rec.majority);
  return rec;
}

void encode_caption(CaptionRecord& rec, const Vocabulary& vocab, index_t max_len) {
  rec.token_ids = vocab.encode(rec.text, max_len);
  rec.length = static_cast<index_t>(rec.token_ids.size());
  if (rec.length < 1) throw std::invalid_argument("caption with no tokens: " + rec.image_id);
}

void encode_qa(QARecord& rec, const Vocabulary& vocab, index_t max_len) {
  rec.qa_token_ids = vocab.encode(rec.qa_text, max_len);
  rec.question_token_ids = vocab.encode(rec.question, max_len);
  if (rec.qa_token_ids.empty()) throw std::invalid_argument("QA with no tokens: " + rec.image_id);
}

void write_manifest(const std::filesystem::path& file,
                    const std::vector<ManifestEntry>& entries) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write manifest: " + file.string());
  for (const auto& e : entries) {
    json j{{"image_id", e.image_id}, {"type", e.type}, {"text", e.text},
           {"question", e.question}, {"answers", e.answers}, {"split", e.split}};
    out << j.dump() << "\n";
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read manifest: " + file.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json j = json::parse(line);
    ManifestEntry e;
    e.image_id = j.at("image_id").get<std::string>();
    e.type = j.at("type").get<std::string>();
    e.text = j.value("text", "");
    e.question = j.value("question", "");
    if (j.contains("answers")) e.answers = j["answers"].get<std::vector<std::string>>();
    e.split = j.value("split", "train");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_dataset_meta(const std::filesystem::path& file, const DatasetMeta& meta) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write dataset meta: " + file.string());
  json j{{"seed", meta.seed},
         {"n_images", meta.n_images},
         {"n_captions", meta.n_captions},
         {"n_qa", meta.n_qa},
         {"vocab_hash", meta.vocab_hash}};
  out << j.dump(2) << "\n";
}

DatasetMeta read_dataset_meta(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read dataset meta: " + file.string());
  json j = json::parse(in);
  DatasetMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_images = j.at("n_images").get<index_t>();
  m.n_captions = j.at("n_captions").get<index_t>();
  m.n_qa = j.at("n_qa").get<index_t>();
  m.vocab_hash = j.at("vocab_hash").get<std::uint64_t>();
  return m;
}

namespace {

std::string image_id_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return std::to_string(v.get<std::int64_t>());
}

json load_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  return json::parse(in);
}

}  // namespace

index_t ingest_annotations(const std::filesystem::path& coco_captions_json,
                           const std::filesystem::path& vqa_questions_json,
                           const std::filesystem::path& vqa_annotations_json,
                           const std::filesystem::path& out_manifest,
                           const std::string& split) {
  std::vector<ManifestEntry> entries;

  json captions = load_json(coco_captions_json);
  for (const auto& ann : captions.at("annotations")) {
    ManifestEntry e;
    e.image_id = image_id_string(ann.at("image_id"));
    e.type = "caption";
    e.text = ann.at("caption").get<std::string>();
    e.split = split;
    entries.push_back(std::move(e));
  }

  // question_id -> (image_id, question)
  json questions = load_json(vqa_questions_json);
  std::map<std::int64_t, std::pair<std::string, std::string>> by_qid;
  for (const auto& q : questions.at("questions")) {
    by_qid[q.at("question_id").get<std::int64_t>()] = {image_id_string(q.at("image_id")),
                                                       q.at("question").get<std::string>()};
  }

  json annotations = load_json(vqa_annotations_json);
  for (const auto& ann : annotations.at("annotations")) {
    auto it = by_qid.find(ann.at("question_id").get<std::int64_t>());
    if (it == by_qid.end())
      throw std::runtime_error("annotation references unknown question_id");
    ManifestEntry e;
    e.image_id = it->second.first;
    e.type = "qa";
    e.question = it->second.second;
    for (const auto& a : ann.at("answers")) e.answers.push_back(a.at("answer").get<std::string>());
    e.text = concatenate_qa(e.question, majority_answer(e.answers));
    e.split = split;
    entries.push_back(std::move(e));
  }

  write_manifest(out_manifest, entries);
  return static_cast<index_t>(entries.size());
}

}  // namespace vqat2i::data
