#include "vqat2i/train/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vqat2i::train {

using nlohmann::json;

namespace {
constexpr char kMagic[9] = "VQ2ICKP1";
}

void save_checkpoint(const std::filesystem::path& file, const CheckpointData& data,
                     const json& meta) {
  json header;
  header["version"] = 1;
  header["meta"] = meta;
  json components = json::array();
  for (const auto& [name, store] : data.components) {
    json c;
    c["name"] = name;
    c["digest"] = store->digest();
    json params = json::array();
    for (const auto& [pname, var] : store->entries())
      params.push_back({{"name", pname}, {"shape", var.value().shape()}});
    c["params"] = params;
    components.push_back(c);
  }
  header["components"] = components;
  json extras = json::array();
  for (const auto& [name, blob] : data.extras)
    extras.push_back({{"name", name}, {"size", blob->size()}});
  header["extras"] = extras;

  std::string hstr = header.dump();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + file.string());
  out.write(kMagic, 8);
  std::uint64_t hlen = hstr.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hstr.data(), static_cast<std::streamsize>(hstr.size()));
  for (const auto& [name, store] : data.components)
    for (const auto& [pname, var] : store->entries())
      out.write(reinterpret_cast<const char*>(var.value().data()),
                static_cast<std::streamsize>(sizeof(Scalar) * var.value().size()));
  for (const auto& [name, blob] : data.extras)
    out.write(reinterpret_cast<const char*>(blob->data()),
              static_cast<std::streamsize>(sizeof(Scalar) * blob->size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + file.string());
}

namespace {

json read_header(std::ifstream& in, const std::filesystem::path& file) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + file.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hstr(hlen, '\0');
  in.read(hstr.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + file.string());
  json header = json::parse(hstr);
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in " + file.string());
  return header;
}

}  // namespace

json load_checkpoint(const std::filesystem::path& file, const CheckpointData& data) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + file.string());
  json header = read_header(in, file);

  const json& components = header.at("components");
  if (components.size() != data.components.size())
    throw std::runtime_error("checkpoint component count mismatch in " + file.string());
  for (size_t ci = 0; ci < data.components.size(); ++ci) {
    const auto& [name, store] = data.components[ci];
    const json& c = components[ci];
    if (c.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint component '" + c.at("name").get<std::string>() +
                               "' does not match expected '" + name + "'");
    const json& params = c.at("params");
    if (params.size() != store->entries().size())
      throw std::runtime_error("parameter count mismatch for component " + name);
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto [pname, var] = store->entries()[pi];
      auto shape = params[pi].at("shape").get<std::vector<index_t>>();
      if (params[pi].at("name").get<std::string>() != pname || shape != var.value().shape())
        throw std::runtime_error("parameter layout mismatch at " + name + "." + pname);
      in.read(reinterpret_cast<char*>(var.value().data()),
              static_cast<std::streamsize>(sizeof(Scalar) * var.value().size()));
    }
    if (!in) throw std::runtime_error("truncated checkpoint data: " + file.string());
    std::uint64_t digest = c.at("digest").get<std::uint64_t>();
    if (store->digest() != digest)
      throw std::runtime_error("digest mismatch for component " + name + " in " +
                               file.string());
  }
  const json& extras = header.at("extras");
  if (extras.size() != data.extras.size())
    throw std::runtime_error("checkpoint extras mismatch in " + file.string());
  for (size_t ei = 0; ei < data.extras.size(); ++ei) {
    auto& [name, blob] = data.extras[ei];
    if (extras[ei].at("name").get<std::string>() != name)
      throw std::runtime_error("extra blob name mismatch: " + name);
    blob->resize(extras[ei].at("size").get<size_t>());
    in.read(reinterpret_cast<char*>(blob->data()),
            static_cast<std::streamsize>(sizeof(Scalar) * blob->size()));
  }
  if (!in) throw std::runtime_error("truncated checkpoint data: " + file.string());
  return header.at("meta");
}

json peek_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + file.string());
  return read_header(in, file).at("meta");
}

json CheckpointMeta::to_json() const {
  return json{{"epoch", epoch}, {"step", step}, {"is_mean", is_mean},
              {"config_hash", config_hash}, {"file", file}};
}

CheckpointMeta CheckpointMeta::from_json(const json& j) {
  CheckpointMeta m;
  m.epoch = j.at("epoch").get<index_t>();
  m.step = j.at("step").get<index_t>();
  m.is_mean = j.at("is_mean").get<Scalar>();
  m.config_hash = j.at("config_hash").get<std::uint64_t>();
  m.file = j.at("file").get<std::string>();
  return m;
}

CheckpointMeta select_best_checkpoint(const std::vector<CheckpointMeta>& series) {
  const CheckpointMeta* best = nullptr;
  for (const auto& m : series) {
    if (m.is_mean < 0) continue;  // never evaluated
    if (!best || m.is_mean > best->is_mean ||
        (m.is_mean == best->is_mean && m.epoch > best->epoch))
      best = &m;
  }
  if (!best) throw std::runtime_error("no evaluated checkpoints in the series");
  return *best;
}

void append_checkpoint_series(const std::filesystem::path& file, const CheckpointMeta& meta) {
  std::ofstream out(file, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + file.string());
  out << meta.to_json().dump() << "\n";
}

std::vector<CheckpointMeta> read_checkpoint_series(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::vector<CheckpointMeta> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(CheckpointMeta::from_json(json::parse(line)));
  }
  return out;
}

}  // namespace vqat2i::train
