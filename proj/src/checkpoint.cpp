#include "eln/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "eln/datagen.hpp"

namespace eln {

namespace {

constexpr char kMagic[8] = {'E', 'L', 'N', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

const NamedArray* CheckpointData::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void CheckpointData::add_parameters(const std::string& prefix, const ParameterSet& params) {
  for (const auto& e : params.entries()) {
    auto d = e.value.data();
    arrays.push_back({prefix + "/" + e.name, e.value.shape(), std::vector<float>(d.begin(), d.end())});
  }
}

void CheckpointData::add_array(const std::string& name, Shape shape, std::vector<float> values) {
  arrays.push_back({name, std::move(shape), std::move(values)});
}

void CheckpointData::load_parameters(const std::string& prefix, ParameterSet& params) const {
  for (auto& e : params.entries()) {
    const auto* a = find(prefix + "/" + e.name);
    if (a == nullptr) throw IoError("checkpoint is missing '" + prefix + "/" + e.name + "'");
    if (a->shape != e.value.shape()) {
      throw IoError("checkpoint shape mismatch for '" + a->name + "': " + shape_str(a->shape) + " vs " +
                    shape_str(e.value.shape()));
    }
    auto dst = e.value.mutable_data();
    std::copy(a->values.begin(), a->values.end(), dst.begin());
  }
}

bool CheckpointData::has_prefix(const std::string& prefix) const {
  const std::string p = prefix + "/";
  for (const auto& a : arrays) {
    if (a.name.rfind(p, 0) == 0) return true;
  }
  return false;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  nlohmann::json header{{"format", "eln-checkpoint"}, {"version", 1},        {"stage", data.stage},
                        {"iteration", data.iteration}, {"config", data.config}, {"meta", data.meta}};
  nlohmann::json tensors = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& a : data.arrays) {
    tensors.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += static_cast<std::int64_t>(a.values.size());
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : data.arrays) {
      out.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t n = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint file: " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("truncated checkpoint header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  CheckpointData data;
  data.stage = header.at("stage").get<std::string>();
  data.iteration = header.at("iteration").get<std::int64_t>();
  data.config = header.value("config", nlohmann::json::object());
  data.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    NamedArray a;
    a.name = t.at("name").get<std::string>();
    a.shape = t.at("shape").get<Shape>();
    const auto count = t.at("count").get<std::size_t>();
    if (static_cast<std::int64_t>(count) != shape_numel(a.shape)) throw IoError("checkpoint entry size mismatch: " + a.name);
    a.values.resize(count);
    in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint payload at '" + a.name + "'");
    data.arrays.push_back(std::move(a));
  }
  return data;
}

}  // namespace eln
