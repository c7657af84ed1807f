#pragma once

#include "vqat2i/data/records.hpp"
#include "vqat2i/data/synthetic.hpp"

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace vqat2i::data {

/// One padded text batch plus the paired ground-truth images.
struct TextBatch {
  index_t n = 0;
  index_t max_len = 0;
  std::vector<index_t> token_ids;       // flat [n, max_len], pad id beyond length
  std::vector<index_t> lengths;         // descending
  Tensor images;                        // [n, 3, R, R]
  std::vector<index_t> record_indices;  // into the source record vector

  std::vector<index_t> row(index_t i) const {
    return {token_ids.begin() + i * max_len, token_ids.begin() + (i + 1) * max_len};
  }
};

struct Dataset {
  Vocabulary vocab;  // built from the train split
  std::vector<CaptionRecord> captions;
  std::vector<QARecord> qas;
  std::vector<std::string> image_ids;
  std::unordered_map<std::string, index_t> image_row;
  Tensor images;  // [M, 3, R, R] in [-1, 1]
  index_t resolution = 0;
  index_t max_text_length = 20;
  // synthetic extras (empty for ingested real data)
  bool has_scenes = false;
  SyntheticSceneSpec scene_spec;
  std::vector<Scene> scenes;  // aligned with image_ids

  const Scene& scene_of(index_t image_row_index) const {
    return scenes.at(static_cast<size_t>(image_row_index));
  }
};

/// Loads manifest + images for one split ("train", "test" or "all"). The
/// vocabulary always comes from the train split so splits stay compatible.
Dataset load_dataset(const std::filesystem::path& dir, const std::string& split,
                     index_t min_frequency, index_t max_text_length);

struct BatchStep {
  TextBatch captions;
  TextBatch qa;
};

/// Seeded epoch permutation over captions; QA records stream alongside from
/// their own per-epoch seeded permutation (cycling within the epoch), so any
/// epoch's batches can be reconstructed without replaying earlier ones.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, index_t batch_size, std::uint64_t seed, Scalar qa_ratio = 1.0);

  void start_epoch(index_t epoch);
  bool next(BatchStep& step);
  index_t steps_per_epoch() const;

  TextBatch caption_batch(const std::vector<index_t>& record_indices) const;
  TextBatch qa_batch(const std::vector<index_t>& record_indices) const;

 private:
  const Dataset& ds_;
  index_t batch_size_;
  std::uint64_t seed_;
  Scalar qa_ratio_;
  std::vector<index_t> caption_order_;
  index_t caption_pos_ = 0;
  index_t epoch_ = 0;
  std::vector<index_t> qa_order_;
  index_t qa_pos_ = 0;
  std::uint64_t qa_wraps_ = 0;
};

inline BatchStream make_batches(const Dataset& ds, index_t batch_size, std::uint64_t seed,
                                Scalar qa_ratio = 1.0) {
  return BatchStream(ds, batch_size, seed, qa_ratio);
}

}  // namespace vqat2i::data
