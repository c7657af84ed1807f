#pragma once

#include "vqat2i/core/tensor.hpp"
#include "vqat2i/data/records.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vqat2i::data {

enum class ShapeKind { circle, square, triangle };

struct PaletteColor {
  std::string name;
  Scalar r, g, b;
};

struct PlacedShape {
  ShapeKind kind;
  index_t color;   // palette index
  index_t cell;    // 0..3: top-left, top-right, bottom-left, bottom-right
  index_t dx = 0;  // jitter in pixels
  index_t dy = 0;
  index_t radius = 10;
};

struct Scene {
  std::string image_id;
  std::vector<PlacedShape> shapes;  // no two shapes share (kind, color)
};

struct SyntheticSceneSpec {
  index_t canvas_size = 64;
  std::vector<PaletteColor> palette;  // up to 8 colors
  std::vector<ShapeKind> kinds{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  index_t max_shapes = 2;
  // Templates; placeholders {color} {kind} {cell} {count} are substituted.
  std::vector<std::string> caption_templates{
      "a {color} {kind} in the {cell}",
      "a {color} {kind}",
      "the {cell} shows a {color} {kind}",
      "an image with {count} shapes",
      "a picture of a {color} {kind}",
  };
  std::vector<std::string> qa_templates{
      "is there a {color} {kind}?",
      "what color is the {kind}?",
      "where is the {color} {kind}?",
      "how many shapes are there?",
  };
  static SyntheticSceneSpec defaults();
};

std::string to_string(ShapeKind k);
std::string cell_name(index_t cell);

/// Deterministic scene for image index i under the dataset seed. Even/odd
/// image pairs force a rotating (color, kind) probe combo present/absent so
/// complementary QA pairs exist by construction.
Scene sample_scene(const SyntheticSceneSpec& spec, std::uint64_t seed, index_t image_index);

/// Rasterizes to [3, S, S] with values in [-1, 1].
Tensor render_scene(const SyntheticSceneSpec& spec, const Scene& scene);

std::vector<std::string> scene_captions(const SyntheticSceneSpec& spec, const Scene& scene,
                                        index_t count, std::uint64_t seed);
std::vector<QARecord> scene_qa_records(const SyntheticSceneSpec& spec, const Scene& scene,
                                       index_t image_index, std::uint64_t seed);

/// Rule-based oracle: answers any question produced by scene_qa_records from
/// the scene alone. nullopt for unrecognized questions.
std::optional<std::string> scene_answer(const SyntheticSceneSpec& spec, const Scene& scene,
                                        const std::string& question);

/// Class label for scoring models: (kind, color) of the first shape.
index_t scene_class(const SyntheticSceneSpec& spec, const Scene& scene);
index_t scene_class_count(const SyntheticSceneSpec& spec);

struct SyntheticDatasetSummary {
  index_t n_images = 0;
  index_t n_captions = 0;
  index_t n_qa = 0;
  index_t n_complementary = 0;
  std::uint64_t vocab_hash = 0;
};

/// Writes images/, manifest.jsonl, scenes.jsonl and dataset.meta under out_dir.
/// Every 4th image lands in the test split. Byte-identical re-runs per seed.
SyntheticDatasetSummary generate_synthetic_dataset(const SyntheticSceneSpec& spec,
                                                   index_t n_images, std::uint64_t seed,
                                                   const std::filesystem::path& out_dir);

void write_scenes(const std::filesystem::path& file, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes(const std::filesystem::path& file);

}  // namespace vqat2i::data
