#include "vqat2i/data/batcher.hpp"

#include "vqat2i/io/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace vqat2i::data {

Dataset load_dataset(const std::filesystem::path& dir, const std::string& split,
                     index_t min_frequency, index_t max_text_length) {
  auto entries = read_manifest(dir / "manifest.jsonl");
  if (entries.empty()) throw std::runtime_error("empty manifest in " + dir.string());

  std::vector<std::string> train_texts;
  for (const auto& e : entries)
    if (e.split == "train") train_texts.push_back(e.type == "qa" ? e.text : e.text);

  Dataset ds;
  ds.vocab = build_vocabulary(train_texts, min_frequency);
  ds.max_text_length = max_text_length;

  auto want = [&](const ManifestEntry& e) { return split == "all" || e.split == split; };
  for (const auto& e : entries) {
    if (!want(e)) continue;
    if (!ds.image_row.count(e.image_id)) {
      ds.image_row[e.image_id] = static_cast<index_t>(ds.image_ids.size());
      ds.image_ids.push_back(e.image_id);
    }
    if (e.type == "caption") {
      CaptionRecord rec;
      rec.image_id = e.image_id;
      rec.text = e.text;
      encode_caption(rec, ds.vocab, max_text_length);
      ds.captions.push_back(std::move(rec));
    } else if (e.type == "qa") {
      QARecord rec = make_qa_record(e.image_id, e.question, e.answers);
      encode_qa(rec, ds.vocab, max_text_length);
      ds.qas.push_back(std::move(rec));
    } else {
      throw std::runtime_error("unknown manifest entry type: " + e.type);
    }
  }
  if (ds.image_ids.empty()) throw std::runtime_error("no records for split " + split);

  // load all images up front; desk-scale datasets are small
  Tensor first = io::load_png(dir / "images" / (ds.image_ids[0] + ".png"));
  ds.resolution = first.dim(1);
  ds.images = Tensor({static_cast<index_t>(ds.image_ids.size()), 3, ds.resolution, ds.resolution});
  for (size_t i = 0; i < ds.image_ids.size(); ++i) {
    Tensor img = i == 0 ? first : io::load_png(dir / "images" / (ds.image_ids[i] + ".png"));
    if (img.dim(1) != ds.resolution || img.dim(2) != ds.resolution)
      throw std::runtime_error("image resolution mismatch: " + ds.image_ids[i]);
    std::memcpy(ds.images.data() + static_cast<index_t>(i) * img.size(), img.data(),
                sizeof(Scalar) * static_cast<size_t>(img.size()));
  }

  auto scenes_file = dir / "scenes.jsonl";
  if (std::filesystem::exists(scenes_file)) {
    ds.scene_spec = SyntheticSceneSpec::defaults();
    ds.scene_spec.canvas_size = ds.resolution;
    auto all_scenes = read_scenes(scenes_file);
    ds.scenes.resize(ds.image_ids.size());
    for (auto& sc : all_scenes) {
      auto it = ds.image_row.find(sc.image_id);
      if (it != ds.image_row.end()) ds.scenes[static_cast<size_t>(it->second)] = std::move(sc);
    }
    ds.has_scenes = true;
  }
  return ds;
}

BatchStream::BatchStream(const Dataset& ds, index_t batch_size, std::uint64_t seed,
                         Scalar qa_ratio)
    : ds_(ds), batch_size_(batch_size), seed_(seed), qa_ratio_(qa_ratio) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (batch_size > static_cast<index_t>(ds.captions.size()))
    throw std::invalid_argument("batch_size " + std::to_string(batch_size) +
                                " exceeds dataset size " + std::to_string(ds.captions.size()));
  if (qa_ratio > 0 && ds.qas.empty())
    throw std::invalid_argument("qa_ratio > 0 but dataset has no QA records");
  start_epoch(0);
}

void BatchStream::start_epoch(index_t epoch) {
  epoch_ = epoch;
  Rng rng(Rng::derive(seed_, "batch_captions", static_cast<std::uint64_t>(epoch)));
  caption_order_ = rng.permutation(static_cast<index_t>(ds_.captions.size()));
  caption_pos_ = 0;
  qa_wraps_ = 0;
  if (!ds_.qas.empty()) {
    Rng qrng(Rng::derive(seed_, "batch_qa", static_cast<std::uint64_t>(epoch)));
    qa_order_ = qrng.permutation(static_cast<index_t>(ds_.qas.size()));
    qa_pos_ = 0;
  }
}

index_t BatchStream::steps_per_epoch() const {
  index_t n = static_cast<index_t>(ds_.captions.size());
  return (n + batch_size_ - 1) / batch_size_;
}

namespace {

// pad + sort by descending length, gather images
TextBatch build_batch(const Dataset& ds, const std::vector<index_t>& indices,
                      const std::vector<std::vector<index_t>*>& token_seqs,
                      const std::vector<std::string*>& image_ids) {
  TextBatch batch;
  batch.n = static_cast<index_t>(indices.size());
  std::vector<index_t> order(indices.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](index_t a, index_t b) {
    return token_seqs[static_cast<size_t>(a)]->size() > token_seqs[static_cast<size_t>(b)]->size();
  });

  batch.max_len = 0;
  for (const auto* seq : token_seqs)
    batch.max_len = std::max(batch.max_len, static_cast<index_t>(seq->size()));
  batch.token_ids.assign(static_cast<size_t>(batch.n * batch.max_len), Vocabulary::kPadId);
  batch.images = Tensor({batch.n, 3, ds.resolution, ds.resolution});
  index_t img_size = 3 * ds.resolution * ds.resolution;

  for (index_t i = 0; i < batch.n; ++i) {
    index_t src = order[static_cast<size_t>(i)];
    const auto& seq = *token_seqs[static_cast<size_t>(src)];
    std::copy(seq.begin(), seq.end(), batch.token_ids.begin() + i * batch.max_len);
    batch.lengths.push_back(static_cast<index_t>(seq.size()));
    batch.record_indices.push_back(indices[static_cast<size_t>(src)]);
    index_t row = ds.image_row.at(*image_ids[static_cast<size_t>(src)]);
    std::memcpy(batch.images.data() + i * img_size, ds.images.data() + row * img_size,
                sizeof(Scalar) * static_cast<size_t>(img_size));
  }
  return batch;
}

}  // namespace

TextBatch BatchStream::caption_batch(const std::vector<index_t>& record_indices) const {
  std::vector<std::vector<index_t>*> seqs;
  std::vector<std::string*> ids;
  for (index_t r : record_indices) {
    auto& rec = const_cast<CaptionRecord&>(ds_.captions[static_cast<size_t>(r)]);
    seqs.push_back(&rec.token_ids);
    ids.push_back(&rec.image_id);
  }
  return build_batch(ds_, record_indices, seqs, ids);
}

TextBatch BatchStream::qa_batch(const std::vector<index_t>& record_indices) const {
  std::vector<std::vector<index_t>*> seqs;
  std::vector<std::string*> ids;
  for (index_t r : record_indices) {
    auto& rec = const_cast<QARecord&>(ds_.qas[static_cast<size_t>(r)]);
    seqs.push_back(&rec.qa_token_ids);
    ids.push_back(&rec.image_id);
  }
  return build_batch(ds_, record_indices, seqs, ids);
}

bool BatchStream::next(BatchStep& step) {
  index_t n = static_cast<index_t>(ds_.captions.size());
  if (caption_pos_ >= n) return false;
  index_t take = std::min(batch_size_, n - caption_pos_);
  std::vector<index_t> cap_idx(caption_order_.begin() + caption_pos_,
                               caption_order_.begin() + caption_pos_ + take);
  caption_pos_ += take;
  step.captions = caption_batch(cap_idx);

  index_t qa_take = qa_ratio_ > 0
                        ? std::max<index_t>(1, static_cast<index_t>(std::llround(
                                                   qa_ratio_ * static_cast<Scalar>(take))))
                        : 0;
  std::vector<index_t> qa_idx;
  while (static_cast<index_t>(qa_idx.size()) < qa_take) {
    if (qa_pos_ >= static_cast<index_t>(qa_order_.size())) {
      ++qa_wraps_;
      Rng qrng(Rng::derive(seed_, "batch_qa_wrap", static_cast<std::uint64_t>(epoch_),
                           qa_wraps_));
      qa_order_ = qrng.permutation(static_cast<index_t>(ds_.qas.size()));
      qa_pos_ = 0;
    }
    qa_idx.push_back(qa_order_[static_cast<size_t>(qa_pos_++)]);
  }
  step.qa = qa_take > 0 ? qa_batch(qa_idx) : TextBatch{};
  return true;
}

}  // namespace vqat2i::data
