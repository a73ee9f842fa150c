#include "omgseg/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "omgseg/io.hpp"
#include "omgseg/rng.hpp"

namespace omgseg {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

namespace {

constexpr char kMagic[8] = {'O', 'M', 'G', 'S', 'E', 'G', 'C', 'K'};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void to_json(nlohmann::json& j, const CheckpointManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", e.offset},
                       {"trainable", e.trainable}});
  j = {{"version", m.version},         {"config", m.config},         {"config_hash", m.config_hash},
       {"model_hash", m.model_hash},   {"entries", entries},         {"meta", m.meta}};
}

void from_json(const nlohmann::json& j, CheckpointManifest& m) {
  io::reject_unknown_keys(j, {"version", "config", "config_hash", "model_hash", "entries", "meta"}, "manifest");
  m.version = j.at("version").get<int>();
  m.config = j.at("config").get<ModelConfig>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.model_hash = j.at("model_hash").get<std::string>();
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    CheckpointEntry ce;
    ce.name = e.at("name").get<std::string>();
    ce.shape = e.at("shape").get<std::vector<std::int64_t>>();
    ce.dtype = e.at("dtype").get<std::string>();
    ce.offset = e.at("offset").get<std::uint64_t>();
    ce.trainable = e.at("trainable").get<bool>();
    m.entries.push_back(std::move(ce));
  }
  m.meta = j.value("meta", nlohmann::json::object());
}

std::string config_hash(const ModelConfig& cfg) { return hex64(fnv1a64(nlohmann::json(cfg).dump())); }

std::string model_hash(const OmgSegModel& model) { return hex64(model.params().checksum()); }

void save_checkpoint(const std::filesystem::path& path, const OmgSegModel& model, const nlohmann::json& meta) {
  CheckpointManifest m;
  m.config = model.config();
  m.config_hash = config_hash(model.config());
  m.model_hash = model_hash(model);
  m.meta = meta;
  std::uint64_t offset = 0;
  for (const auto* p : model.params().all()) {
    m.entries.push_back({p->name, {p->value.rows(), p->value.cols()}, "f64", offset, p->trainable});
    offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(double);
  }
  const std::string manifest = nlohmann::json(m).dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::uint32_t version = static_cast<std::uint32_t>(m.version);
  const std::uint64_t len = manifest.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto* p : model.params().all())
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * static_cast<Eigen::Index>(sizeof(double))));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

namespace {

std::pair<CheckpointManifest, std::string> read_all(const std::filesystem::path& path, bool blobs) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint: " + path.string());
  if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));
  if (len > (std::uint64_t{1} << 30)) throw DataError("checkpoint manifest too large");
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("truncated checkpoint manifest");
  CheckpointManifest m;
  try {
    m = nlohmann::json::parse(manifest).get<CheckpointManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint manifest: ") + e.what());
  }
  std::string data;
  if (blobs) data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return {std::move(m), std::move(data)};
}

}  // namespace

CheckpointManifest read_manifest(const std::filesystem::path& path) { return read_all(path, false).first; }

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto [m, data] = read_all(path, true);
  if (config_hash(m.config) != m.config_hash) throw DataError("checkpoint config hash mismatch");
  ad::ParameterStore store;
  std::uint64_t expected = 0;
  for (const auto& e : m.entries) {
    if (e.dtype != "f64" || e.shape.size() != 2 || e.shape[0] < 0 || e.shape[1] < 0)
      throw DataError("unsupported checkpoint array " + e.name);
    const auto bytes = static_cast<std::uint64_t>(e.shape[0] * e.shape[1]) * sizeof(double);
    if (e.offset != expected || e.offset + bytes > data.size()) throw DataError("checkpoint array out of range: " + e.name);
    ad::Matrix v(e.shape[0], e.shape[1]);
    std::memcpy(v.data(), data.data() + e.offset, bytes);
    store.add(e.name, std::move(v), e.trainable);
    expected += bytes;
  }
  if (expected != data.size()) throw DataError("checkpoint has trailing bytes");
  OmgSegModel model(m.config, std::move(store));
  if (model_hash(model) != m.model_hash) throw DataError("checkpoint model hash mismatch");
  return {std::move(model), std::move(m)};
}

}  // namespace omgseg
