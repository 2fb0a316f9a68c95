#include "coe/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace coe {

using nlohmann::json;

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  json manifest = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, rec] : data.tensors) {
    if (name == "__meta__") throw UsageError("checkpoint: '__meta__' is a reserved tensor name");
    manifest[name] = {{"dtype", rec.dtype},
                      {"shape", rec.shape},
                      {"offset", offset},
                      {"nbytes", rec.bytes.size()}};
    offset += rec.bytes.size();
  }
  manifest["__meta__"] = data.meta;
  const std::string text = manifest.dump();

  // Write to a sibling temp file then rename, so an interrupted save never
  // clobbers the previous checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + tmp + "' for writing");
    const std::uint64_t len = text.size();
    char header[8];
    for (int i = 0; i < 8; ++i) header[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(header, 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, rec] : data.tensors)
      out.write(reinterpret_cast<const char*>(rec.bytes.data()),
                static_cast<std::streamsize>(rec.bytes.size()));
    if (!out.flush()) throw IoError("checkpoint: write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  char header[8];
  if (!in.read(header, 8)) throw IoError("checkpoint: truncated header in '" + path + "'");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(header[i])) << (8 * i);

  const auto file_size = std::filesystem::file_size(path);
  if (8 + len > file_size)
    throw IoError("checkpoint: manifest length overflows file in '" + path + "'");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len)))
    throw IoError("checkpoint: truncated manifest in '" + path + "'");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("checkpoint: corrupt manifest in '" + path + "': " + e.what());
  }
  if (!manifest.is_object()) throw IoError("checkpoint: manifest is not an object in '" + path + "'");

  const std::uint64_t payload_size = file_size - 8 - len;
  std::vector<std::byte> payload(payload_size);
  if (payload_size &&
      !in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload_size)))
    throw IoError("checkpoint: truncated payload in '" + path + "'");

  CheckpointData data;
  for (auto it = manifest.begin(); it != manifest.end(); ++it) {
    if (it.key() == "__meta__") {
      data.meta = it.value();
      continue;
    }
    const auto& entry = it.value();
    for (const char* field : {"dtype", "shape", "offset", "nbytes"})
      if (!entry.contains(field))
        throw IoError("checkpoint: manifest entry '" + it.key() + "' missing field '" + field + "'");
    TensorRecord rec;
    rec.dtype = entry.at("dtype").get<std::string>();
    if (rec.dtype != "f32" && rec.dtype != "f64")
      throw IoError("checkpoint: unknown dtype '" + rec.dtype + "' for '" + it.key() + "'");
    rec.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    const std::uint64_t elem_size = rec.dtype == "f32" ? 4 : 8;
    if (nbytes != static_cast<std::uint64_t>(numel(rec.shape)) * elem_size)
      throw IoError("checkpoint: nbytes does not match shape for '" + it.key() + "'");
    if (offset + nbytes > payload_size)
      throw IoError("checkpoint: offset overflow for '" + it.key() + "'");
    rec.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                     payload.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
    data.tensors.emplace(it.key(), std::move(rec));
  }
  if (data.meta.is_null()) throw IoError("checkpoint: missing __meta__ in '" + path + "'");
  return data;
}

}  // namespace coe
