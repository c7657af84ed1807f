#include "vqat2i/data/synthetic.hpp"

#include "vqat2i/io/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace vqat2i::data {

using nlohmann::json;

SyntheticSceneSpec SyntheticSceneSpec::defaults() {
  SyntheticSceneSpec spec;
  spec.palette = {
      {"red", 0.90, 0.10, 0.10},    {"green", 0.10, 0.80, 0.15},
      {"blue", 0.15, 0.25, 0.90},   {"yellow", 0.90, 0.85, 0.10},
      {"purple", 0.60, 0.15, 0.80}, {"orange", 0.95, 0.55, 0.10},
      {"white", 0.95, 0.95, 0.95},  {"cyan", 0.10, 0.85, 0.85},
  };
  return spec;
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  throw std::logic_error("bad shape kind");
}

static ShapeKind shape_kind_from(const std::string& s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  throw std::invalid_argument("unknown shape kind: " + s);
}

std::string cell_name(index_t cell) {
  static const char* names[4] = {"top left", "top right", "bottom left", "bottom right"};
  if (cell < 0 || cell > 3) throw std::out_of_range("bad cell");
  return names[cell];
}

namespace {

std::string fill_template(std::string tpl, const SyntheticSceneSpec& spec,
                          const PlacedShape* shape, index_t count) {
  auto replace_all = [&tpl](const std::string& key, const std::string& value) {
    for (size_t pos; (pos = tpl.find(key)) != std::string::npos;)
      tpl.replace(pos, key.size(), value);
  };
  if (shape) {
    replace_all("{color}", spec.palette[static_cast<size_t>(shape->color)].name);
    replace_all("{kind}", to_string(shape->kind));
    replace_all("{cell}", cell_name(shape->cell));
  }
  replace_all("{count}", std::to_string(count));
  return tpl;
}

// Rotating (kind, color) combo forced present on even images and absent on
// odd ones; both halves of a pair get asked the same presence question.
std::pair<index_t, index_t> probe_combo(const SyntheticSceneSpec& spec, index_t image_index) {
  index_t ncombo = static_cast<index_t>(spec.palette.size() * spec.kinds.size());
  index_t c = (image_index / 2) % ncombo;
  index_t color = c % static_cast<index_t>(spec.palette.size());
  index_t kind = c / static_cast<index_t>(spec.palette.size());
  return {kind, color};
}

bool scene_has(const Scene& scene, index_t kind, index_t color) {
  for (const auto& s : scene.shapes)
    if (static_cast<index_t>(s.kind) == kind && s.color == color) return true;
  return false;
}

std::string presence_question(const SyntheticSceneSpec& spec, index_t kind, index_t color) {
  PlacedShape tmp{spec.kinds[static_cast<size_t>(kind)], color, 0};
  return fill_template(spec.qa_templates[0], spec, &tmp, 0);
}

}  // namespace

Scene sample_scene(const SyntheticSceneSpec& spec, std::uint64_t seed, index_t image_index) {
  Rng rng(Rng::derive(seed, "scene", static_cast<std::uint64_t>(image_index)));
  auto [probe_kind, probe_color] = probe_combo(spec, image_index);
  bool force_present = image_index % 2 == 0;

  index_t n_kinds = static_cast<index_t>(spec.kinds.size());
  index_t n_colors = static_cast<index_t>(spec.palette.size());
  index_t n_shapes = 1 + rng.uniform_int(spec.max_shapes);
  // distinct (kind,color) combos and distinct cells bound the shape count
  index_t avail = n_kinds * n_colors - (force_present ? 0 : 1);
  n_shapes = std::min({n_shapes, avail, index_t(4)});
  auto cells = rng.permutation(4);

  Scene scene;
  std::set<std::pair<index_t, index_t>> used;  // (kind, color) pairs
  for (index_t i = 0; i < n_shapes; ++i) {
    index_t kind, color;
    if (i == 0 && force_present) {
      kind = probe_kind;
      color = probe_color;
    } else {
      do {
        kind = rng.uniform_int(n_kinds);
        color = rng.uniform_int(n_colors);
      } while (used.count({kind, color}) ||
               (!force_present && kind == probe_kind && color == probe_color));
    }
    used.insert({kind, color});
    PlacedShape s;
    s.kind = spec.kinds[static_cast<size_t>(kind)];
    s.color = color;
    s.cell = cells[static_cast<size_t>(i)];
    s.dx = rng.uniform_int(7) - 3;
    s.dy = rng.uniform_int(7) - 3;
    s.radius = 8 + rng.uniform_int(4);
    scene.shapes.push_back(s);
  }
  return scene;
}

Tensor render_scene(const SyntheticSceneSpec& spec, const Scene& scene) {
  index_t S = spec.canvas_size;
  Tensor img = Tensor::full({3, S, S}, -0.85);
  Scalar unit = static_cast<Scalar>(S) / 64.0;
  for (const auto& shape : scene.shapes) {
    Scalar cx = (shape.cell % 2 ? 3.0 : 1.0) * S / 4.0 + shape.dx * unit;
    Scalar cy = (shape.cell / 2 ? 3.0 : 1.0) * S / 4.0 + shape.dy * unit;
    Scalar r = shape.radius * unit;
    const auto& col = spec.palette[static_cast<size_t>(shape.color)];
    Scalar rgb[3] = {col.r * 2 - 1, col.g * 2 - 1, col.b * 2 - 1};
    for (index_t y = 0; y < S; ++y)
      for (index_t x = 0; x < S; ++x) {
        Scalar px = x + 0.5 - cx, py = y + 0.5 - cy;
        bool inside = false;
        switch (shape.kind) {
          case ShapeKind::circle: inside = px * px + py * py <= r * r; break;
          case ShapeKind::square: inside = std::abs(px) <= r && std::abs(py) <= r; break;
          case ShapeKind::triangle:
            // upward triangle: apex (0,-r), base corners (+-r, +r)
            inside = py >= -r && py <= r && std::abs(px) <= (py + r) * 0.5;
            break;
        }
        if (inside)
          for (index_t c = 0; c < 3; ++c) img[(c * S + y) * S + x] = rgb[c];
      }
  }
  return img;
}

std::vector<std::string> scene_captions(const SyntheticSceneSpec& spec, const Scene& scene,
                                        index_t count, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, "captions", fnv1a64(scene.image_id)));
  index_t n = static_cast<index_t>(scene.shapes.size());
  std::vector<std::string> captions;
  // Every shape's color/kind/position shows up via the positional template.
  for (const auto& s : scene.shapes)
    captions.push_back(fill_template(spec.caption_templates[0], spec, &s, n));
  captions.push_back(fill_template(spec.caption_templates[3], spec, nullptr, n));
  index_t tpl = 1;
  while (static_cast<index_t>(captions.size()) < count) {
    const auto& s = scene.shapes[static_cast<size_t>(rng.uniform_int(n))];
    static const size_t rotate[3] = {1, 4, 2};
    captions.push_back(
        fill_template(spec.caption_templates[rotate[tpl % 3]], spec, &s, n));
    ++tpl;
  }
  captions.resize(static_cast<size_t>(count));
  return captions;
}

std::vector<QARecord> scene_qa_records(const SyntheticSceneSpec& spec, const Scene& scene,
                                       index_t image_index, std::uint64_t seed) {
  index_t n = static_cast<index_t>(scene.shapes.size());
  std::vector<QARecord> records;
  std::set<std::string> asked;
  auto add = [&](const std::string& question, const std::string& answer) {
    if (!asked.insert(question).second) return;
    records.push_back(make_qa_record(scene.image_id, question, {answer, answer, answer}));
  };

  // paired probe question (see probe_combo)
  auto [pk, pc] = probe_combo(spec, image_index);
  add(presence_question(spec, pk, pc), scene_has(scene, pk, pc) ? "yes" : "no");

  std::map<ShapeKind, index_t> kind_counts;
  for (const auto& s : scene.shapes) ++kind_counts[s.kind];

  for (const auto& s : scene.shapes) {
    add(fill_template(spec.qa_templates[0], spec, &s, n), "yes");
    add(fill_template(spec.qa_templates[2], spec, &s, n), cell_name(s.cell));
    if (kind_counts[s.kind] == 1)
      add(fill_template(spec.qa_templates[1], spec, &s, n),
          spec.palette[static_cast<size_t>(s.color)].name);
  }
  add(fill_template(spec.qa_templates[3], spec, nullptr, n), std::to_string(n));

  // one guaranteed-absent combo, scanned from a seeded start
  Rng rng(Rng::derive(seed, "qa_negative", static_cast<std::uint64_t>(image_index)));
  index_t ncombo = static_cast<index_t>(spec.palette.size() * spec.kinds.size());
  index_t start = rng.uniform_int(ncombo);
  for (index_t step = 0; step < ncombo; ++step) {
    index_t c = (start + step) % ncombo;
    index_t color = c % static_cast<index_t>(spec.palette.size());
    index_t kind = c / static_cast<index_t>(spec.palette.size());
    if (!scene_has(scene, kind, color)) {
      add(presence_question(spec, kind, color), "no");
      break;
    }
  }
  return records;
}

std::optional<std::string> scene_answer(const SyntheticSceneSpec& spec, const Scene& scene,
                                        const std::string& question) {
  std::string q = lowercase(trim(question));
  auto find_color = [&](const std::string& name) -> index_t {
    for (size_t i = 0; i < spec.palette.size(); ++i)
      if (spec.palette[i].name == name) return static_cast<index_t>(i);
    return -1;
  };

  if (q == "how many shapes are there?")
    return std::to_string(scene.shapes.size());

  auto parse_kind = [](const std::string& word) -> std::optional<ShapeKind> {
    std::string w = word;
    if (!w.empty() && w.back() == '?') w.pop_back();
    if (w == "circle" || w == "square" || w == "triangle") return shape_kind_from(w);
    return std::nullopt;
  };

  std::vector<std::string> toks = tokenize(q);
  if (q.rfind("is there a ", 0) == 0 && toks.size() == 5) {
    index_t color = find_color(toks[3]);
    auto kind = parse_kind(toks[4]);
    if (color < 0 || !kind) return std::nullopt;
    return scene_has(scene, static_cast<index_t>(*kind), color) ? "yes" : "no";
  }
  if (q.rfind("what color is the ", 0) == 0 && toks.size() == 5) {
    auto kind = parse_kind(toks[4]);
    if (!kind) return std::nullopt;
    const PlacedShape* found = nullptr;
    for (const auto& s : scene.shapes)
      if (s.kind == *kind) {
        if (found) return std::nullopt;  // ambiguous
        found = &s;
      }
    if (!found) return std::nullopt;
    return spec.palette[static_cast<size_t>(found->color)].name;
  }
  if (q.rfind("where is the ", 0) == 0 && toks.size() == 5) {
    index_t color = find_color(toks[3]);
    auto kind = parse_kind(toks[4]);
    if (color < 0 || !kind) return std::nullopt;
    for (const auto& s : scene.shapes)
      if (s.kind == *kind && s.color == color) return cell_name(s.cell);
    return std::nullopt;
  }
  return std::nullopt;
}

index_t scene_class(const SyntheticSceneSpec& spec, const Scene& scene) {
  const auto& s = scene.shapes.front();
  index_t kind = 0;
  for (size_t i = 0; i < spec.kinds.size(); ++i)
    if (spec.kinds[i] == s.kind) kind = static_cast<index_t>(i);
  return kind * static_cast<index_t>(spec.palette.size()) + s.color;
}

index_t scene_class_count(const SyntheticSceneSpec& spec) {
  return static_cast<index_t>(spec.kinds.size() * spec.palette.size());
}

void write_scenes(const std::filesystem::path& file, const std::vector<Scene>& scenes) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write scenes: " + file.string());
  for (const auto& sc : scenes) {
    json shapes = json::array();
    for (const auto& s : sc.shapes)
      shapes.push_back({{"kind", to_string(s.kind)},
                        {"color", s.color},
                        {"cell", s.cell},
                        {"dx", s.dx},
                        {"dy", s.dy},
                        {"radius", s.radius}});
    out << json{{"image_id", sc.image_id}, {"shapes", shapes}}.dump() << "\n";
  }
}

std::vector<Scene> read_scenes(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read scenes: " + file.string());
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json j = json::parse(line);
    Scene sc;
    sc.image_id = j.at("image_id").get<std::string>();
    for (const auto& js : j.at("shapes")) {
      PlacedShape s;
      s.kind = shape_kind_from(js.at("kind").get<std::string>());
      s.color = js.at("color").get<index_t>();
      s.cell = js.at("cell").get<index_t>();
      s.dx = js.at("dx").get<index_t>();
      s.dy = js.at("dy").get<index_t>();
      s.radius = js.at("radius").get<index_t>();
      sc.shapes.push_back(s);
    }
    scenes.push_back(std::move(sc));
  }
  return scenes;
}

SyntheticDatasetSummary generate_synthetic_dataset(const SyntheticSceneSpec& spec,
                                                   index_t n_images, std::uint64_t seed,
                                                   const std::filesystem::path& out_dir) {
  if (n_images < 1) throw std::invalid_argument("n_images must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create output directory: " + out_dir.string());

  std::vector<ManifestEntry> manifest;
  std::vector<Scene> scenes;
  std::vector<QARecord> all_qa;
  std::vector<std::string> train_texts;
  index_t n_captions = 0, n_qa = 0;

  for (index_t i = 0; i < n_images; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img_%05lld", static_cast<long long>(i));
    Scene scene = sample_scene(spec, seed, i);
    scene.image_id = buf;
    std::string split = (i % 4 == 3) ? "test" : "train";

    Tensor img = render_scene(spec, scene);
    io::save_png(out_dir / "images" / (scene.image_id + ".png"), img);

    for (const auto& cap : scene_captions(spec, scene, 5, seed)) {
      manifest.push_back({scene.image_id, "caption", cap, "", {}, split});
      ++n_captions;
      if (split == "train") train_texts.push_back(cap);
    }
    for (const auto& qa : scene_qa_records(spec, scene, i, seed)) {
      manifest.push_back({scene.image_id, "qa", qa.qa_text, qa.question, qa.answers, split});
      ++n_qa;
      all_qa.push_back(qa);
      if (split == "train") train_texts.push_back(qa.qa_text);
    }
    scenes.push_back(std::move(scene));
  }

  Vocabulary vocab = build_vocabulary(train_texts, 1);
  write_manifest(out_dir / "manifest.jsonl", manifest);
  write_scenes(out_dir / "scenes.jsonl", scenes);

  DatasetMeta meta;
  meta.seed = seed;
  meta.n_images = n_images;
  meta.n_captions = n_captions;
  meta.n_qa = n_qa;
  meta.vocab_hash = vocab.hash();
  write_dataset_meta(out_dir / "dataset.meta", meta);

  SyntheticDatasetSummary summary;
  summary.n_images = n_images;
  summary.n_captions = n_captions;
  summary.n_qa = n_qa;
  summary.n_complementary = static_cast<index_t>(index_complementary_pairs(all_qa).entries.size());
  summary.vocab_hash = meta.vocab_hash;
  return summary;
}

}  // namespace vqat2i::data
