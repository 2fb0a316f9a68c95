#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "coe/tensor.hpp"
#include "json.hpp"

namespace coe {

// Named-tensor container behind the checkpoint file format:
//   8-byte little-endian unsigned manifest length,
//   UTF-8 JSON manifest {name: {dtype, shape, offset, nbytes}, ..., "__meta__": {...}},
//   raw little-endian IEEE-754 payload; offsets are relative to the payload
//   start (end of the manifest).
struct TensorRecord {
  std::string dtype;  // "f32" | "f64"
  Shape shape;
  std::vector<std::byte> bytes;
};

struct CheckpointData {
  std::map<std::string, TensorRecord> tensors;  // ordered: manifest is deterministic
  nlohmann::json meta;                          // configs, step counter
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (sizeof(T) == 4)
    return "f32";
  else
    return "f64";
}

template <typename T>
TensorRecord to_record(const Tensor<T>& t) {
  TensorRecord rec;
  rec.dtype = dtype_name<T>();
  rec.shape = t.shape();
  rec.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(T));
  std::memcpy(rec.bytes.data(), t.data().data(), rec.bytes.size());
  return rec;
}

template <typename T>
Tensor<T> from_record(const std::string& name, const TensorRecord& rec) {
  if (rec.dtype != dtype_name<T>())
    throw IoError("checkpoint: dtype mismatch for '" + name + "': file has " + rec.dtype +
                  ", expected " + dtype_name<T>());
  Tensor<T> t(rec.shape);
  if (rec.bytes.size() != static_cast<std::size_t>(t.size()) * sizeof(T))
    throw IoError("checkpoint: byte count mismatch for '" + name + "'");
  std::memcpy(t.data().data(), rec.bytes.data(), rec.bytes.size());
  return t;
}

}  // namespace coe
